//! Run orchestration: owns the artifact directory for one experiment
//! (config snapshot, streaming metrics CSV, checkpoints, final summary)
//! and for grid sweeps.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::data::synthetic_shapes;
use crate::error::{Error, Result};
use crate::eval::{
    collapse_metrics, encode_dataset, linear_probe, run_cell, CellResult, CollapseReport,
    GridCell, ProbeResult,
};
use crate::model::Mode;
use crate::train::{EpochMetrics, Trainer};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str =
    "epoch,step,loss,positive,negative,lr,feature_std,pairwise_cosine,probe_acc";

#[derive(Debug)]
pub struct RunReport {
    pub config_hash: String,
    pub epochs_run: usize,
    pub diverged: bool,
    pub note: Option<String>,
    pub final_loss: Option<f64>,
    pub collapse: Option<CollapseReport>,
    pub probe: Option<ProbeResult>,
}

fn metrics_row(m: &EpochMetrics, step: u64, probe_acc: Option<f64>) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        m.epoch,
        step,
        m.loss,
        m.positive,
        m.negative,
        m.lr,
        m.feature_std,
        m.mean_pairwise_cosine,
        probe_acc.map(|a| a.to_string()).unwrap_or_default()
    )
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("last.ckpt")
}

/// Run one experiment end to end, writing artifacts under `out_dir`:
/// `config.txt`, `metrics.csv` (one row per epoch), `last.ckpt` (refreshed
/// every epoch), and `summary.txt`. With `resume`, picks up from `last.ckpt`
/// and appends; the resulting state is bit-identical to an uninterrupted run.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, resume: bool) -> Result<RunReport> {
    fs::create_dir_all(out_dir)?;
    let ckpt = checkpoint_path(out_dir);
    let metrics_path = out_dir.join("metrics.csv");

    let (mut trainer, mut metrics_file) = if resume && ckpt.exists() {
        let t = load_checkpoint(&ckpt)?;
        if t.cfg.hash() != cfg.hash() {
            return Err(Error::Config(format!(
                "resume config mismatch: checkpoint {} vs requested {}",
                t.cfg.hash(),
                cfg.hash()
            )));
        }
        let f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        (t, f)
    } else {
        let t = Trainer::new(cfg.clone())?;
        fs::write(out_dir.join("config.txt"), cfg.to_canonical_string())?;
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "{}", METRICS_HEADER)?;
        (t, f)
    };

    let mut diverged = false;
    let mut note = None;
    let mut last: Option<EpochMetrics> = None;
    while trainer.epoch < trainer.cfg.epochs {
        match trainer.train_epoch() {
            Ok(m) => {
                writeln!(metrics_file, "{}", metrics_row(&m, trainer.step, None))?;
                metrics_file.flush()?;
                save_checkpoint(&ckpt, &trainer)?;
                last = Some(m);
            }
            Err(Error::Divergence { step, what }) => {
                diverged = true;
                note = Some(format!("diverged at step {}: {}", step, what));
                break;
            }
            Err(Error::NonFinite(what)) => {
                diverged = true;
                note = Some(format!("non-finite value in forward: {}", what));
                break;
            }
            Err(e) => return Err(e),
        }
    }

    // final evaluation on held-out labeled sets; failures here (e.g. a net
    // that diverged before populating running stats) are reported, not fatal
    let cfg = &trainer.cfg;
    let mut collapse = None;
    let mut probe = None;
    let eval_result: Result<(CollapseReport, ProbeResult)> = (|| {
        let ptrain = synthetic_shapes(cfg.probe_train_size, cfg.data_seed + 1, cfg.image_size);
        let ptest = synthetic_shapes(cfg.probe_test_size, cfg.data_seed + 2, cfg.image_size);
        let feats = encode_dataset(&trainer.online, &ptrain, cfg.batch_size, Mode::Eval)?;
        let c = collapse_metrics(&feats, cfg.collapse_std_rel, cfg.collapse_cosine)?;
        let p = linear_probe(&trainer.online, &ptrain, &ptest, cfg.batch_size)?;
        Ok((c, p))
    })();
    match eval_result {
        Ok((c, p)) => {
            collapse = Some(c);
            probe = Some(p);
        }
        Err(e) => {
            let msg = format!("final evaluation failed: {}", e);
            note = Some(match note {
                Some(n) => format!("{}; {}", n, msg),
                None => msg,
            });
        }
    }

    let report = RunReport {
        config_hash: cfg.hash(),
        epochs_run: trainer.epoch,
        diverged,
        note,
        final_loss: last.map(|m| m.loss),
        collapse,
        probe,
    };

    let mut summary = String::new();
    summary.push_str(&format!("config_hash={}\n", report.config_hash));
    summary.push_str(&format!("epochs_run={}\n", report.epochs_run));
    summary.push_str(&format!("diverged={}\n", report.diverged));
    if let Some(l) = report.final_loss {
        summary.push_str(&format!("final_loss={}\n", l));
    }
    if let Some(c) = &report.collapse {
        summary.push_str(&format!("collapsed={}\n", c.collapsed));
        summary.push_str(&format!("feature_std={}\n", c.feature_std));
        summary.push_str(&format!("effective_rank={}\n", c.effective_rank));
        summary.push_str(&format!("pairwise_cosine={}\n", c.mean_pairwise_cosine));
    }
    if let Some(p) = &report.probe {
        summary.push_str(&format!("probe_train_acc={}\n", p.train_acc));
        summary.push_str(&format!("probe_test_acc={}\n", p.test_acc));
    }
    summary.push_str(&format!(
        "uses_batch_statistics={}\n",
        trainer.online.uses_batch_statistics()
    ));
    if let Some(n) = &report.note {
        summary.push_str(&format!("note={}\n", n));
    }
    fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(report)
}

/// Run a grid, streaming one CSV row per finished cell to `csv_path`.
pub fn run_grid_to_csv(cells: &[GridCell], csv_path: &Path) -> Result<Vec<CellResult>> {
    if cells.is_empty() {
        return Err(Error::Invalid("empty grid".into()));
    }
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut seen = std::collections::HashSet::new();
    for c in cells {
        if !seen.insert(c.cfg.hash()) {
            return Err(Error::Invalid(format!("duplicate grid cell {}", c.id)));
        }
    }
    let mut f = fs::File::create(csv_path)?;
    writeln!(f, "{}", crate::eval::csv_header())?;
    let mut out = Vec::with_capacity(cells.len());
    for c in cells {
        let r = run_cell(c);
        writeln!(f, "{}", r.csv_row())?;
        f.flush()?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn tiny_cfg() -> ExperimentConfig {
        let mut c = preset("vanilla-bn").unwrap();
        c.set("dataset_size", "16").unwrap();
        c.set("batch_size", "8").unwrap();
        c.set("epochs", "2").unwrap();
        c.set("warmup_epochs", "1").unwrap();
        c.set("image_size", "16").unwrap();
        c.set("probe_train_size", "20").unwrap();
        c.set("probe_test_size", "10").unwrap();
        c
    }

    #[test]
    fn run_writes_all_artifacts_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let cfg = tiny_cfg();
        let ra = run_experiment(&cfg, &a, false).unwrap();
        let rb = run_experiment(&cfg, &b, false).unwrap();
        assert!(!ra.diverged);
        assert_eq!(ra.epochs_run, 2);
        assert!(ra.probe.is_some());
        let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
        let mb = fs::read_to_string(b.join("metrics.csv")).unwrap();
        assert_eq!(ma, mb, "same config and seed must give byte-identical metrics");
        assert!(ma.starts_with(METRICS_HEADER));
        assert_eq!(ma.lines().count(), 3);
        assert!(a.join("last.ckpt").exists());
        assert!(fs::read_to_string(a.join("summary.txt")).unwrap().contains("probe_test_acc="));
        let _ = rb;
    }

    #[test]
    fn resume_is_bit_identical_to_straight_through() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full");
        let mut cfg = tiny_cfg();
        cfg.set("epochs", "3").unwrap();
        run_experiment(&cfg, &full, false).unwrap();
        // emulate an interruption: one epoch of the same 3-epoch run, with
        // its artifacts on disk, then resume to completion
        let interrupted = dir.path().join("interrupted");
        {
            // run one epoch of the 3-epoch config by training manually
            let mut t = Trainer::new(cfg.clone()).unwrap();
            fs::create_dir_all(&interrupted).unwrap();
            fs::write(interrupted.join("config.txt"), cfg.to_canonical_string()).unwrap();
            let mut f = fs::File::create(interrupted.join("metrics.csv")).unwrap();
            writeln!(f, "{}", METRICS_HEADER).unwrap();
            let m = t.train_epoch().unwrap();
            writeln!(f, "{}", metrics_row(&m, t.step, None)).unwrap();
            save_checkpoint(&checkpoint_path(&interrupted), &t).unwrap();
        }
        run_experiment(&cfg, &interrupted, true).unwrap();
        let mf = fs::read_to_string(full.join("metrics.csv")).unwrap();
        let mi = fs::read_to_string(interrupted.join("metrics.csv")).unwrap();
        assert_eq!(mf, mi, "resumed metrics must match the uninterrupted run");
        let hf = load_checkpoint(&checkpoint_path(&full)).unwrap();
        let hi = load_checkpoint(&checkpoint_path(&interrupted)).unwrap();
        assert_eq!(
            hf.online.params.content_hash(),
            hi.online.params.content_hash()
        );
    }

    #[test]
    fn resume_with_a_different_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = tiny_cfg();
        run_experiment(&cfg, &out, false).unwrap();
        let mut other = cfg.clone();
        other.set("lr", "0.05").unwrap();
        assert!(run_experiment(&other, &out, true).is_err());
    }
}
