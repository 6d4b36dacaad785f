//! Self-verification: runs every mechanical invariant of the library —
//! finite-difference gradient checks for each layer and loss, normalization
//! equivalences, batch-independence probes, the init-protocol equivalence,
//! and a fault-injection check that proves the gradient checker can fail.
//!
//! Failures are report content, never errors, so a caller can print the full
//! table and exit nonzero at the end.

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Fault, Graph, Var};
use crate::model::{ArchConfig, Assembly, ComponentNorms, FwdEffects, Mode};
use crate::norm::{
    batch_norm_train, group_norm, instance_norm, layer_norm, weight_standardize, NormKind,
};
use crate::objectives::{byol_loss, cosine_similarity, infonce_loss};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured quantity (max relative error, max abs difference, ...).
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {:<40} measured={:.3e} tol={:.1e}  {}\n",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.detail
            ));
        }
        let n_fail = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.checks.len(),
            n_fail
        ));
        out
    }
}

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn rng_for(seed: u64, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(case as u64))
}

/// Weighted scalarization: sum(out * r) with a fixed random weighting, so the
/// check exercises every output coordinate with distinct upstream gradients.
fn weighted_sum(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.leaf(r, false)?;
    let prod = g.mul(out, rv)?;
    g.sum_all(prod)
}

type CaseFn = dyn Fn(usize) -> Result<crate::gradcheck::GradCheckReport>;

fn run_cases(name: &str, cases: usize, f: &CaseFn) -> CheckResult {
    let mut max_err: f64 = 0.0;
    let mut passed = true;
    let mut detail = format!("{} cases", cases);
    for i in 0..cases {
        match f(i) {
            Ok(rep) => {
                max_err = max_err.max(rep.max_rel_err);
                if !rep.passed {
                    passed = false;
                    detail = format!("case {} failed", i);
                }
            }
            Err(e) => {
                passed = false;
                detail = format!("case {} errored: {}", i, e);
                break;
            }
        }
    }
    CheckResult { name: name.into(), passed, measured: max_err, tolerance: GRAD_TOL, detail }
}

/// The per-layer / per-loss finite-difference gradient suite. `cases` random
/// instances per operation, all with independent inputs and weightings.
pub fn grad_checks(cases: usize, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();

    out.push(run_cases("grad/conv2d wrt input", cases, &move |i| {
        let mut rng = rng_for(seed, i);
        let x = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 2, 3], 0.5, &mut rng);
        let r = Tensor::randn(&[2, 5, 5, 3], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let wv = g.leaf(&w, false)?;
                let y = g.conv2d(v, wv, 1, 1)?;
                weighted_sum(g, y, &r)
            },
            &x,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/conv2d wrt weight", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x11, i);
        let x = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 2, 3], 0.5, &mut rng);
        let r = Tensor::randn(&[2, 5, 5, 3], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let xv = g.leaf(&x, false)?;
                let y = g.conv2d(xv, v, 1, 1)?;
                weighted_sum(g, y, &r)
            },
            &w,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/linear wrt input", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x22, i);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 4], 0.5, &mut rng);
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let wv = g.leaf(&w, false)?;
                let y = g.matmul(v, wv)?;
                weighted_sum(g, y, &r)
            },
            &x,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/linear wrt weight", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x33, i);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 4], 0.5, &mut rng);
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let xv = g.leaf(&x, false)?;
                let y = g.matmul(xv, v)?;
                weighted_sum(g, y, &r)
            },
            &w,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/batch_norm (train)", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x44, i);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let gamma = Tensor::randn(&[6], 0.5, &mut rng);
        let beta = Tensor::randn(&[6], 0.5, &mut rng);
        let r = Tensor::randn(&[4, 6], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let ga = g.leaf(&gamma, false)?;
                let be = g.leaf(&beta, false)?;
                let (y, _, _) = batch_norm_train(g, v, ga, be, 1e-5)?;
                weighted_sum(g, y, &r)
            },
            &x,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    for (label, groups) in [("layer_norm", 0usize), ("group_norm (G=2)", 2), ("instance_norm", usize::MAX)] {
        let name = format!("grad/{}", label);
        out.push(run_cases(&name, cases, &move |i| {
            let mut rng = rng_for(seed ^ 0x55 ^ groups as u64, i);
            let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
            let gamma = Tensor::randn(&[6], 0.5, &mut rng);
            let beta = Tensor::randn(&[6], 0.5, &mut rng);
            let r = Tensor::randn(&[3, 6], 1.0, &mut rng);
            grad_check(
                move |g, v| {
                    let ga = g.leaf(&gamma, false)?;
                    let be = g.leaf(&beta, false)?;
                    let y = match groups {
                        0 => layer_norm(g, v, ga, be, 1e-5)?,
                        usize::MAX => instance_norm(g, v, ga, be, 1e-5)?,
                        k => group_norm(g, v, ga, be, k, 1e-5)?,
                    };
                    weighted_sum(g, y, &r)
                },
                &x,
                FD_STEP,
                GRAD_TOL,
            )
        }));
    }

    out.push(run_cases("grad/ws-linear wrt raw weight", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x66, i);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 0.5, &mut rng);
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let ws = weight_standardize(g, v, 1e-4)?;
                let wt = g.transpose2d(ws)?;
                let xv = g.leaf(&x, false)?;
                let y = g.matmul(xv, wt)?;
                weighted_sum(g, y, &r)
            },
            &w,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/ws-conv wrt raw weight", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x77, i);
        let x = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 2, 2], 0.5, &mut rng);
        let r = Tensor::randn(&[2, 5, 5, 3], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let ws = weight_standardize(g, v, 1e-4)?;
                let xv = g.leaf(&x, false)?;
                let y = g.conv2d(xv, ws, 1, 1)?;
                weighted_sum(g, y, &r)
            },
            &w,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/cosine_similarity", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x88, i);
        let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 6], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let bv = g.leaf(&b, false)?;
                let c = cosine_similarity(g, v, bv)?;
                g.mean_all(c)
            },
            &a,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/bootstrap loss wrt prediction", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0x99, i);
        let q = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let t = Tensor::randn(&[4, 6], 1.0, &mut rng);
        grad_check(
            move |g, v| Ok(byol_loss(g, v, &t)?.loss),
            &q,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out.push(run_cases("grad/contrastive loss wrt embeddings", cases, &move |i| {
        let mut rng = rng_for(seed ^ 0xaa, i);
        let z = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let zp = Tensor::randn(&[3, 5], 1.0, &mut rng);
        grad_check(
            move |g, v| {
                let zpv = g.leaf(&zp, false)?;
                Ok(infonce_loss(g, v, zpv, 0.1)?.loss)
            },
            &z,
            FD_STEP,
            GRAD_TOL,
        )
    }));

    out
}

fn apply_norm_kind(
    g: &mut Graph,
    kind: NormKind,
    x: Var,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<Var> {
    let ga = g.leaf(gamma, false)?;
    let be = g.leaf(beta, false)?;
    match kind {
        NormKind::Layer => layer_norm(g, x, ga, be, 1e-5),
        NormKind::Instance => instance_norm(g, x, ga, be, 1e-5),
        NormKind::Group(k) => group_norm(g, x, ga, be, k, 1e-5),
        NormKind::Batch => Ok(batch_norm_train(g, x, ga, be, 1e-5)?.0),
        NormKind::None => crate::norm::affine(g, x, ga, be),
    }
}

/// GN(G=1) vs LN and GN(G=C) vs IN on `trials` random tensors; exact match.
pub fn norm_equivalences(trials: usize, seed: u64) -> Vec<CheckResult> {
    let tol = 1e-10;
    let mut results = Vec::new();
    for (name, a, b) in [
        ("equiv/group(G=1) vs layer", NormKind::Group(1), NormKind::Layer),
        ("equiv/group(G=C) vs instance", NormKind::Group(6), NormKind::Instance),
    ] {
        let mut max_diff: f64 = 0.0;
        let mut ok = true;
        let mut detail = format!("{} tensors", trials);
        for i in 0..trials {
            let mut rng = rng_for(seed ^ 0xbeef, i);
            let rank4 = i % 2 == 0;
            let shape: &[usize] = if rank4 { &[2, 3, 3, 6] } else { &[4, 6] };
            let x = Tensor::randn(shape, 1.0, &mut rng);
            let gamma = Tensor::randn(&[6], 0.5, &mut rng);
            let beta = Tensor::randn(&[6], 0.5, &mut rng);
            let run = |kind: NormKind| -> Result<Tensor> {
                let mut g = Graph::new();
                let xv = g.leaf(&x, false)?;
                let y = apply_norm_kind(&mut g, kind, xv, &gamma, &beta)?;
                Ok(g.value(y))
            };
            match (run(a), run(b)) {
                (Ok(ya), Ok(yb)) => {
                    let d = ya.max_abs_diff(&yb);
                    max_diff = max_diff.max(d);
                    if d > tol {
                        ok = false;
                    }
                }
                _ => {
                    ok = false;
                    detail = format!("tensor {} errored", i);
                }
            }
        }
        results.push(CheckResult { name: name.into(), passed: ok, measured: max_diff, tolerance: tol, detail });
    }
    results
}

/// Standardized weight rows: |mean| < 1e-10 exactly, and std equal to the
/// value the eps floor dictates, sqrt(var / (var + eps)) — which is within
/// eps of 1 whenever the raw row variance is at least ~0.5.
pub fn ws_invariants(trials: usize, seed: u64) -> CheckResult {
    let eps = 1e-4;
    let d = 64;
    let mut max_mean: f64 = 0.0;
    let mut max_floor_err: f64 = 0.0;
    let mut worst_unit_dev: f64 = 0.0;
    let mut ok = true;
    for i in 0..trials {
        let mut rng = rng_for(seed ^ 0xc0de, i);
        let w = Tensor::randn(&[5, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let wv = g.leaf(&w, true).unwrap();
        let ws = weight_standardize(&mut g, wv, eps).unwrap();
        let y = g.value(ws);
        for row in 0..5 {
            let raw = &w.data()[row * d..(row + 1) * d];
            let raw_mean = raw.iter().sum::<f64>() / d as f64;
            let raw_var = raw.iter().map(|v| (v - raw_mean) * (v - raw_mean)).sum::<f64>() / d as f64;
            let vals = &y.data()[row * d..(row + 1) * d];
            let mean = vals.iter().sum::<f64>() / d as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let std = var.sqrt();
            let expected = (raw_var / (raw_var + eps)).sqrt();
            max_mean = max_mean.max(mean.abs());
            max_floor_err = max_floor_err.max((std - expected).abs());
            if raw_var >= 0.5 {
                worst_unit_dev = worst_unit_dev.max((std - 1.0).abs());
                if (std - 1.0).abs() > eps {
                    ok = false;
                }
            }
            if mean.abs() > 1e-10 || (std - expected).abs() > 1e-10 {
                ok = false;
            }
        }
    }
    CheckResult {
        name: "ws/row mean 0, std 1 (eps floor)".into(),
        passed: ok,
        measured: max_mean.max(worst_unit_dev),
        tolerance: eps,
        detail: format!(
            "{} weights, max |mean| {:.2e}, max floor-relation err {:.2e}",
            trials, max_mean, max_floor_err
        ),
    }
}

/// LN/GN/IN leave sample 0 untouched when sample 1 changes; train-mode BN
/// must exhibit a counterexample.
pub fn batch_independence(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd00d);
    let x1 = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let mut x2 = x1.clone();
    for v in x2.data_mut()[6..12].iter_mut() {
        *v += 1.0; // perturb sample 1 only
    }
    let gamma = Tensor::ones(&[6]);
    let beta = Tensor::zeros(&[6]);
    let row0 = |x: &Tensor, kind: NormKind| -> Tensor {
        let mut g = Graph::new();
        let xv = g.leaf(x, false).unwrap();
        let y = apply_norm_kind(&mut g, kind, xv, &gamma, &beta).unwrap();
        Tensor::new(&[6], g.data_of(y)[..6].to_vec()).unwrap()
    };
    let mut results = Vec::new();
    for (name, kind, expect_independent) in [
        ("independence/layer_norm", NormKind::Layer, true),
        ("independence/group_norm", NormKind::Group(2), true),
        ("independence/instance_norm", NormKind::Instance, true),
        ("independence/batch_norm counterexample", NormKind::Batch, false),
    ] {
        let d = row0(&x1, kind).max_abs_diff(&row0(&x2, kind));
        let passed = if expect_independent { d == 0.0 } else { d > 0.0 };
        results.push(CheckResult {
            name: name.into(),
            passed,
            measured: d,
            tolerance: 0.0,
            detail: if expect_independent {
                "sample 0 must not move".into()
            } else {
                "sample 0 must move under batch statistics".into()
            },
        });
    }
    // weight standardization never looks at activations at all
    let conv = |x: &Tensor| -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::randn(&[3, 1, 1, 6], 0.5, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x, false).unwrap();
        let wv = g.leaf(&w, false).unwrap();
        let ws = weight_standardize(&mut g, wv, 1e-4).unwrap();
        let x4 = g.reshape(xv, &[4, 1, 1, 6]).unwrap();
        let y = g.conv2d(x4, ws, 1, 0).unwrap();
        Tensor::new(&[3], g.data_of(y)[..3].to_vec()).unwrap()
    };
    let d = conv(&x1).max_abs_diff(&conv(&x2));
    results.push(CheckResult {
        name: "independence/ws-conv".into(),
        passed: d == 0.0,
        measured: d,
        tolerance: 0.0,
        detail: "sample 0 must not move".into(),
    });
    results
}

fn small_bn_assembly(seed: u64) -> Result<Assembly> {
    let arch = ArchConfig {
        in_channels: 3,
        image_size: 8,
        stem_channels: 4,
        stem_stride: 1,
        stage_channels: vec![4, 8],
        stage_strides: vec![1, 2],
        blocks_per_stage: 1,
        proj_hidden: 8,
        d_proj: 4,
    };
    let norms = ComponentNorms {
        encoder: NormKind::Batch,
        projector: NormKind::Batch,
        predictor: NormKind::Batch,
    };
    Assembly::build(arch, norms, false, true, 2, 1e-5, 0.9, 1e-4, seed)
}

/// First-site and end-to-end agreement between the BN network (train mode,
/// capture batch) and its affine rewrite.
pub fn init_protocol_equivalence(seed: u64) -> Vec<CheckResult> {
    let inner = || -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let x = Tensor::randn(&[4, 8, 8, 3], 0.2, &mut rng);
        let forward = |asm: &Assembly| -> Result<(Tensor, Tensor)> {
            let mut g = Graph::new();
            let b = asm.bind(&mut g, false)?;
            let xv = g.leaf(&x, false)?;
            let mut fx = FwdEffects::recording();
            let y = asm.forward_encoder(&mut g, &b, xv, Mode::Train, &mut fx)?;
            let z = asm.forward_projector(&mut g, &b, y, Mode::Train, &mut fx)?;
            let q = asm.forward_predictor(&mut g, &b, z, Mode::Train, &mut fx)?;
            let first = fx.site_outputs.unwrap().remove(0).1;
            let _ = y;
            Ok((first, g.value(q)))
        };
        let mut reference = small_bn_assembly(seed)?;
        crate::init_protocol::set_capture_gammas(&mut reference)?;
        let (rf, rq) = forward(&reference)?;
        let mut rewritten = small_bn_assembly(seed)?;
        crate::init_protocol::capture_and_reinit(&mut rewritten, &x, 1e-3)?;
        let (nf, nq) = forward(&rewritten)?;
        Ok((rf.max_abs_diff(&nf), rq.max_abs_diff(&nq)))
    };
    match inner() {
        Ok((first, end)) => vec![
            CheckResult {
                name: "init/first-site equivalence".into(),
                passed: first <= 1e-10,
                measured: first,
                tolerance: 1e-10,
                detail: "BN train-mode vs affine rewrite, capture batch".into(),
            },
            CheckResult {
                name: "init/end-to-end equivalence".into(),
                passed: end <= 1e-4,
                measured: end,
                tolerance: 1e-4,
                detail: "full network output on capture batch".into(),
            },
        ],
        Err(e) => vec![CheckResult {
            name: "init/equivalence".into(),
            passed: false,
            measured: f64::NAN,
            tolerance: 1e-4,
            detail: format!("errored: {}", e),
        }],
    }
}

/// Prove the checker can fail: a deliberately corrupted backward formula must
/// produce a failing gradient check.
pub fn fault_injection_selfcheck(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (name, fault) in [
        ("selfcheck/relu backward fault detected", Fault::ReluBackward),
        ("selfcheck/matmul backward fault detected", Fault::MatmulBackward),
        ("selfcheck/conv backward fault detected", Fault::Conv2dBackward),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabad);
        let x = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 2, 2, 2], 0.5, &mut rng);
        let w2 = Tensor::randn(&[10, 5], 0.5, &mut rng);
        let rep = grad_check(
            move |g, v| {
                // conv -> relu -> matmul so each injectable backward is on
                // the gradient path
                g.inject_fault(fault);
                let wv = g.leaf(&w, false)?;
                let c = g.conv2d(v, wv, 1, 1)?;
                let a = g.relu(c)?;
                let flat = g.reshape(a, &[10, 10])?;
                let w2v = g.leaf(&w2, false)?;
                let y = g.matmul(flat, w2v)?;
                let sq = g.square(y)?;
                g.sum_all(sq)
            },
            &x,
            FD_STEP,
            GRAD_TOL,
        );
        let detected = matches!(&rep, Ok(r) if !r.passed);
        out.push(CheckResult {
            name: name.into(),
            passed: detected,
            measured: rep.as_ref().map(|r| r.max_rel_err).unwrap_or(f64::NAN),
            tolerance: GRAD_TOL,
            detail: "corrupted backward must fail the check".into(),
        });
    }
    out
}

/// The full verification suite at report-friendly sizes.
pub fn run_verification() -> VerifyReport {
    let mut report = VerifyReport::default();
    report.checks.extend(grad_checks(3, 42));
    report.checks.extend(norm_equivalences(50, 42));
    report.checks.push(ws_invariants(50, 42));
    report.checks.extend(batch_independence(42));
    report.checks.extend(init_protocol_equivalence(42));
    report.checks.extend(fault_injection_selfcheck(42));
    report
}
