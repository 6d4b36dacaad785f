//! `sslab` — train, sweep, and verify self-supervised learning experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence,
//! 4 verification failure.

use clap::{Args, Parser, Subcommand};
use sslab_core::config::{preset, ExperimentConfig};
use sslab_core::error::Error;
use sslab_core::eval::{table1_cells, table2_cells, GridCell};
use sslab_core::runner::{run_experiment, run_grid_to_csv};
use sslab_core::verify::run_verification;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Default output root: $SSLAB_OUT, or ./runs.
fn out_root() -> PathBuf {
    std::env::var_os("SSLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Parser)]
#[command(name = "sslab", about = "Self-supervised learning experiments on the desk-scale stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Named preset: vanilla-bn | no-bn | modified-init | gn-ws
    #[arg(long)]
    preset: Option<String>,
    /// Config file (flat key=value lines, may contain preset=NAME)
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Override a single key, repeatable: --set lr=0.1 --set epochs=40
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// RNG seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch budget override
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one experiment and write artifacts
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Artifact directory (default: <out root>/run-<config hash>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (kernels are single-threaded; >1 is clamped)
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Force single-threaded, bit-reproducible execution
        #[arg(long)]
        deterministic: bool,
        /// Continue from the last checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Run an ablation sweep and write a merged results CSV
    Grid {
        /// Built-in spec (table1 | table2) or a grid file listing specs/presets
        spec: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output CSV path (default: <out root>/grid-<spec>.csv)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Run the full invariant suite and print a pass/fail report
    Verify,
}

fn build_config(a: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&a.preset, &a.config) {
        (Some(p), None) => preset(p)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
            ExperimentConfig::parse_str(&text)?
        }
        (None, None) => ExperimentConfig::default(),
        (Some(_), Some(_)) => unreachable!("clap forbids --preset with --config"),
    };
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{}'", s)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    Ok(cfg)
}

fn grid_cells(spec: &str, base: &ExperimentConfig) -> Result<Vec<GridCell>, Error> {
    match spec {
        "table1" => Ok(table1_cells(base)),
        "table2" => Ok(table2_cells(base)),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read grid spec {}: {}", path, e)))?;
            let mut cells = Vec::new();
            for raw in text.lines() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match line {
                    "table1" => cells.extend(table1_cells(base)),
                    "table2" => cells.extend(table2_cells(base)),
                    name => {
                        // a preset name, run at the base budget
                        let mut cfg = preset(name)?;
                        cfg.epochs = base.epochs;
                        cfg.batch_size = base.batch_size;
                        cfg.dataset_size = base.dataset_size;
                        cfg.image_size = base.image_size;
                        cfg.probe_train_size = base.probe_train_size;
                        cfg.probe_test_size = base.probe_test_size;
                        cfg.seed = base.seed;
                        cells.push(GridCell { id: name.to_string(), cfg });
                    }
                }
            }
            if cells.is_empty() {
                return Err(Error::Config(format!("grid spec {} contains no cells", path)));
            }
            Ok(cells)
        }
    }
}

fn note_threads(threads: usize, deterministic: bool) {
    if threads > 1 {
        eprintln!("note: kernels are single-threaded; --threads {} clamped to 1", threads);
    }
    if deterministic {
        eprintln!("note: deterministic mode (single-threaded kernels, seeded RNG streams)");
    }
}

fn real_main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { cfg, out, threads, deterministic, resume } => {
            note_threads(threads, deterministic);
            let cfg = match build_config(&cfg) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {}", e);
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let out_dir = out.unwrap_or_else(|| out_root().join(format!("run-{}", cfg.hash())));
            match run_experiment(&cfg, &out_dir, resume) {
                Ok(report) => {
                    println!("run {} finished: {} epochs", report.config_hash, report.epochs_run);
                    if let Some(p) = &report.probe {
                        println!("probe accuracy: train {:.3} test {:.3}", p.train_acc, p.test_acc);
                    }
                    if let Some(c) = &report.collapse {
                        println!(
                            "collapse: verdict={} feature_std={:.4e} eff_rank={:.2}",
                            if c.collapsed { "collapsed" } else { "healthy" },
                            c.feature_std,
                            c.effective_rank
                        );
                    }
                    println!("artifacts: {}", out_dir.display());
                    if report.diverged {
                        eprintln!(
                            "diverged: {} (checkpoint retained)",
                            report.note.as_deref().unwrap_or("")
                        );
                        return ExitCode::from(EXIT_DIVERGED);
                    }
                    ExitCode::SUCCESS
                }
                Err(e @ Error::Config(_)) => {
                    eprintln!("config error: {}", e);
                    ExitCode::from(EXIT_CONFIG)
                }
                Err(e) => {
                    eprintln!("error: {}", e);
                    ExitCode::FAILURE
                }
            }
        }
        Cmd::Grid { spec, cfg, out, threads } => {
            note_threads(threads, false);
            let base = match build_config(&cfg) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {}", e);
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let cells = match grid_cells(&spec, &base) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {}", e);
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let csv = out.unwrap_or_else(|| {
                let name = spec.replace(['/', '\\'], "_");
                out_root().join(format!("grid-{}.csv", name))
            });
            match run_grid_to_csv(&cells, &csv) {
                Ok(results) => {
                    for r in &results {
                        println!(
                            "{:<24} diverged={} collapsed={} probe_acc={:.3} batch_stats={}",
                            r.id, r.diverged, r.collapsed, r.probe_acc, r.uses_batch_statistics
                        );
                    }
                    println!("results: {}", csv.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}", e);
                    ExitCode::FAILURE
                }
            }
        }
        Cmd::Verify => {
            let report = run_verification();
            print!("{}", report.render());
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            }
        }
    }
}

fn main() -> ExitCode {
    real_main()
}
