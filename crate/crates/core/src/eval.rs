//! Collapse diagnostics, linear-probe evaluation, and the ablation grid
//! runner (per-component norm grid plus the four summary variants).

use crate::config::{ExperimentConfig, InitMode, Objective};
use crate::data::{synthetic_shapes, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Assembly, FwdEffects, Mode};
use crate::norm::NormKind;
use crate::tensor::Tensor;
use crate::train::Trainer;
use nalgebra::DMatrix;

/// Diagnostics over an (N, D) batch of encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct CollapseReport {
    /// sqrt(trace(cov) / D): mean per-dimension spread.
    pub feature_std: f64,
    /// RMS magnitude of the features, the reference scale for the verdict.
    pub rms_scale: f64,
    /// Mean cosine similarity over distinct pairs of rows.
    pub mean_pairwise_cosine: f64,
    /// exp(entropy) of the normalized covariance spectrum; near D for
    /// isotropic features, near 1 when everything lies on a line.
    pub effective_rank: f64,
    /// Collapsed iff feature_std < std_rel * rms_scale AND cosine > threshold.
    pub collapsed: bool,
}

pub fn collapse_metrics(feats: &Tensor, std_rel: f64, cos_thresh: f64) -> Result<CollapseReport> {
    let shape = feats.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::ShapeMismatch("collapse metrics need (N >= 2, D) features".into()));
    }
    let (n, d) = (shape[0], shape[1]);
    let x = feats.data();

    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += x[r * d + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // sample covariance (biased, matching the norm layers' convention)
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            let di = x[r * d + i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (x[r * d + j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    let feature_std = (trace.max(0.0) / d as f64).sqrt();
    let rms_scale = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();

    let effective_rank = if trace <= 0.0 {
        1.0
    } else {
        let eig = cov.symmetric_eigen();
        let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
        let mut entropy = 0.0;
        for l in eig.eigenvalues.iter() {
            let p = l.max(0.0) / total;
            if p > 0.0 {
                entropy -= p * p.ln();
            }
        }
        entropy.exp()
    };

    let mut cos_sum = 0.0;
    let mut pairs = 0usize;
    let norms: Vec<f64> = (0..n)
        .map(|r| (0..d).map(|c| x[r * d + c] * x[r * d + c]).sum::<f64>().sqrt())
        .collect();
    for a in 0..n {
        for b in a + 1..n {
            let dot: f64 = (0..d).map(|c| x[a * d + c] * x[b * d + c]).sum();
            let denom = (norms[a] * norms[b]).max(1e-24);
            cos_sum += dot / denom;
            pairs += 1;
        }
    }
    let mean_pairwise_cosine = cos_sum / pairs as f64;
    let collapsed = feature_std < std_rel * rms_scale && mean_pairwise_cosine > cos_thresh;
    Ok(CollapseReport { feature_std, rms_scale, mean_pairwise_cosine, effective_rank, collapsed })
}

/// Encoder representations for a whole dataset, stacked to (N, D).
pub fn encode_dataset(asm: &Assembly, data: &Dataset, batch: usize, mode: Mode) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot encode an empty dataset".into()));
    }
    let d = asm.arch.d_repr();
    let mut out = Vec::with_capacity(data.len() * d);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let x = data.batch(chunk)?;
        let mut g = Graph::new();
        let bound = asm.bind(&mut g, false)?;
        let xv = g.leaf(&x, false)?;
        let mut fx = FwdEffects::default();
        let y = asm.forward_encoder(&mut g, &bound, xv, mode, &mut fx)?;
        out.extend_from_slice(g.data_of(y));
    }
    Tensor::new(&[data.len(), d], out)
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Multinomial logistic regression on frozen features: full-batch gradient
/// descent from a zero init (convex, so deterministic with no RNG at all).
/// Features are standardized with training-set statistics.
pub fn probe_features(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
) -> Result<ProbeResult> {
    let d = *train_x
        .shape()
        .last()
        .filter(|_| train_x.shape().len() == 2)
        .ok_or_else(|| Error::ShapeMismatch("probe expects (N, D) features".into()))?;
    let n = train_x.shape()[0];
    if n != train_y.len() || test_x.shape()[0] != test_y.len() || test_x.shape()[1] != d {
        return Err(Error::ShapeMismatch("probe features/labels disagree".into()));
    }
    if train_y.iter().chain(test_y).any(|&c| c >= classes) {
        return Err(Error::Invalid("label out of range".into()));
    }

    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mu[c] += train_x.data()[r * d + c];
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    for r in 0..n {
        for c in 0..d {
            let v = train_x.data()[r * d + c] - mu[c];
            sd[c] += v * v;
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / n as f64).sqrt().max(1e-8);
    }
    let standardize = |x: &Tensor| -> Vec<f64> {
        let rows = x.shape()[0];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] = (x.data()[r * d + c] - mu[c]) / sd[c];
            }
        }
        out
    };
    let xt = standardize(train_x);
    let xe = standardize(test_x);

    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    let l2 = 1e-4;
    for _ in 0..steps {
        let mut gw = vec![0.0; classes * d];
        let mut gb = vec![0.0; classes];
        for r in 0..n {
            let row = &xt[r * d..(r + 1) * d];
            let mut maxl = f64::NEG_INFINITY;
            for (k, p) in probs.iter_mut().enumerate() {
                let logit = b[k] + w[k * d..(k + 1) * d].iter().zip(row).map(|(a, v)| a * v).sum::<f64>();
                *p = logit;
                maxl = maxl.max(logit);
            }
            let z: f64 = probs.iter().map(|l| (l - maxl).exp()).sum();
            for k in 0..classes {
                let p = (probs[k] - maxl).exp() / z;
                let err = p - if k == train_y[r] { 1.0 } else { 0.0 };
                gb[k] += err;
                for c in 0..d {
                    gw[k * d + c] += err * row[c];
                }
            }
        }
        let scale = lr / n as f64;
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= scale * gi + lr * l2 * *wi;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= scale * gi;
        }
    }

    let acc = |x: &[f64], y: &[usize]| -> f64 {
        let rows = y.len();
        let mut hits = 0usize;
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..classes {
                let logit =
                    b[k] + w[k * d..(k + 1) * d].iter().zip(row).map(|(a, v)| a * v).sum::<f64>();
                if logit > best.1 {
                    best = (k, logit);
                }
            }
            if best.0 == y[r] {
                hits += 1;
            }
        }
        hits as f64 / rows as f64
    };
    Ok(ProbeResult { train_acc: acc(&xt, train_y), test_acc: acc(&xe, test_y) })
}

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.5;

/// Probe a frozen encoder: encode both splits in eval mode (running stats for
/// any BN sites), then fit the frozen-feature classifier. The encoder is
/// untouched — enforced by a parameter-hash check.
pub fn linear_probe(
    asm: &Assembly,
    train: &Dataset,
    test: &Dataset,
    batch: usize,
) -> Result<ProbeResult> {
    let before = asm.params.content_hash();
    let ftr = encode_dataset(asm, train, batch, Mode::Eval)?;
    let fte = encode_dataset(asm, test, batch, Mode::Eval)?;
    let res = probe_features(&ftr, &train.labels, &fte, &test.labels, train.classes, PROBE_STEPS, PROBE_LR)?;
    debug_assert_eq!(asm.params.content_hash(), before, "probe must not touch the encoder");
    if asm.params.content_hash() != before {
        return Err(Error::Invalid("probe modified encoder parameters".into()));
    }
    Ok(res)
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub id: String,
    pub cfg: ExperimentConfig,
}

fn norm_label(k: NormKind) -> &'static str {
    match k {
        NormKind::Batch => "bn",
        NormKind::Layer => "ln",
        NormKind::Group(_) => "gn",
        NormKind::Instance => "in",
        NormKind::None => "-",
    }
}

/// The 15 bootstrap cells of the per-component ablation: encoder BN with
/// {projector BN, none} x {predictor BN, none}; encoder LN with LN/none in the
/// heads; no encoder norm with {BN, LN, none} head combinations.
const GRID_BYOL: &[(NormKind, NormKind, NormKind)] = &[
    (NormKind::Batch, NormKind::Batch, NormKind::Batch),
    (NormKind::Batch, NormKind::Batch, NormKind::None),
    (NormKind::Batch, NormKind::None, NormKind::Batch),
    (NormKind::Batch, NormKind::None, NormKind::None),
    (NormKind::Layer, NormKind::Layer, NormKind::Layer),
    (NormKind::Layer, NormKind::Layer, NormKind::None),
    (NormKind::Layer, NormKind::None, NormKind::Layer),
    (NormKind::Layer, NormKind::None, NormKind::None),
    (NormKind::None, NormKind::Batch, NormKind::Batch),
    (NormKind::None, NormKind::Batch, NormKind::None),
    (NormKind::None, NormKind::Layer, NormKind::Layer),
    (NormKind::None, NormKind::Layer, NormKind::None),
    (NormKind::None, NormKind::None, NormKind::Batch),
    (NormKind::None, NormKind::None, NormKind::Layer),
    (NormKind::None, NormKind::None, NormKind::None),
];

/// The 7 contrastive cells (no predictor): every (encoder, projector) pair
/// that appears in the grid.
const GRID_SIMCLR: &[(NormKind, NormKind)] = &[
    (NormKind::Batch, NormKind::Batch),
    (NormKind::Batch, NormKind::None),
    (NormKind::Layer, NormKind::Layer),
    (NormKind::Layer, NormKind::None),
    (NormKind::None, NormKind::Batch),
    (NormKind::None, NormKind::Layer),
    (NormKind::None, NormKind::None),
];

/// The full per-component grid (15 bootstrap + 7 contrastive cells), sharing
/// the base config's budget and seed.
pub fn table1_cells(base: &ExperimentConfig) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &(e, p, q) in GRID_BYOL {
        let mut cfg = base.clone();
        cfg.objective = Objective::Byol;
        cfg.encoder_norm = e;
        cfg.projector_norm = p;
        cfg.predictor_norm = q;
        cfg.init_mode = InitMode::Standard;
        cfg.ws = false;
        let id = format!("byol/{}/{}/{}", norm_label(e), norm_label(p), norm_label(q));
        cells.push(GridCell { id, cfg });
    }
    for &(e, p) in GRID_SIMCLR {
        let mut cfg = base.clone();
        cfg.objective = Objective::Simclr;
        cfg.encoder_norm = e;
        cfg.projector_norm = p;
        cfg.predictor_norm = NormKind::None;
        cfg.init_mode = InitMode::Standard;
        cfg.ws = false;
        let id = format!("simclr/{}/{}", norm_label(e), norm_label(p));
        cells.push(GridCell { id, cfg });
    }
    cells
}

/// The four summary variants, keeping the base config's budget and seed.
pub fn table2_cells(base: &ExperimentConfig) -> Vec<GridCell> {
    crate::config::PRESET_NAMES
        .iter()
        .map(|name| {
            let mut cfg = crate::config::preset(name).expect("preset names are valid");
            cfg.epochs = base.epochs;
            cfg.batch_size = base.batch_size;
            cfg.dataset_size = base.dataset_size;
            cfg.data_seed = base.data_seed;
            cfg.image_size = base.image_size;
            cfg.probe_train_size = base.probe_train_size;
            cfg.probe_test_size = base.probe_test_size;
            cfg.seed = base.seed;
            if cfg.warmup_epochs > cfg.epochs {
                // keep the 5x-longer-warmup relation at small budgets
                cfg.warmup_epochs = if cfg.init_mode == InitMode::BnCaptureReinit {
                    cfg.epochs / 2
                } else {
                    cfg.epochs / 10
                };
            }
            GridCell { id: (*name).to_string(), cfg }
        })
        .collect()
}

/// Whether a cell's trained network consults batch statistics at inference
/// time, accounting for the init protocol removing every BN site.
pub fn cell_uses_batch_statistics(cfg: &ExperimentConfig) -> bool {
    if cfg.init_mode == InitMode::BnCaptureReinit {
        return false;
    }
    let mut kinds = vec![cfg.encoder_norm, cfg.projector_norm];
    if cfg.has_predictor() {
        kinds.push(cfg.predictor_norm);
    }
    kinds.iter().any(|k| k.uses_batch_statistics())
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub id: String,
    pub config_hash: String,
    pub seed: u64,
    pub diverged: bool,
    pub collapsed: bool,
    pub feature_std: f64,
    pub effective_rank: f64,
    pub mean_pairwise_cosine: f64,
    pub probe_acc: f64,
    pub uses_batch_statistics: bool,
    pub final_loss: f64,
    pub error: Option<String>,
}

pub fn csv_header() -> &'static str {
    "cell,config_hash,seed,diverged,collapsed,feature_std,effective_rank,mean_pairwise_cosine,probe_acc,uses_batch_statistics,final_loss,error"
}

impl CellResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.id,
            self.config_hash,
            self.seed,
            self.diverged,
            self.collapsed,
            self.feature_std,
            self.effective_rank,
            self.mean_pairwise_cosine,
            self.probe_acc,
            self.uses_batch_statistics,
            self.final_loss,
            self.error.as_deref().unwrap_or("").replace(',', ";"),
        )
    }
}

fn run_cell_inner(id: &str, cfg: &ExperimentConfig) -> Result<CellResult> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let summary = trainer.train(|_| {})?;
    let probe_train = synthetic_shapes(cfg.probe_train_size, cfg.data_seed + 1, cfg.image_size);
    let probe_test = synthetic_shapes(cfg.probe_test_size, cfg.data_seed + 2, cfg.image_size);
    let feats = encode_dataset(&trainer.online, &probe_train, cfg.batch_size, Mode::Eval)?;
    let report = collapse_metrics(&feats, cfg.collapse_std_rel, cfg.collapse_cosine)?;
    let probe = linear_probe(&trainer.online, &probe_train, &probe_test, cfg.batch_size)?;
    Ok(CellResult {
        id: id.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        diverged: summary.diverged,
        collapsed: report.collapsed,
        feature_std: report.feature_std,
        effective_rank: report.effective_rank,
        mean_pairwise_cosine: report.mean_pairwise_cosine,
        probe_acc: probe.test_acc,
        uses_batch_statistics: trainer.online.uses_batch_statistics(),
        final_loss: summary.epochs.last().map(|m| m.loss).unwrap_or(f64::NAN),
        error: summary.note,
    })
}

/// Train and evaluate one cell; every failure is folded into the result so a
/// grid keeps going.
pub fn run_cell(cell: &GridCell) -> CellResult {
    match run_cell_inner(&cell.id, &cell.cfg) {
        Ok(r) => r,
        Err(e) => CellResult {
            id: cell.id.clone(),
            config_hash: cell.cfg.hash(),
            seed: cell.cfg.seed,
            diverged: false,
            collapsed: false,
            feature_std: f64::NAN,
            effective_rank: f64::NAN,
            mean_pairwise_cosine: f64::NAN,
            probe_acc: f64::NAN,
            uses_batch_statistics: cell_uses_batch_statistics(&cell.cfg),
            final_loss: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

/// Run every cell, invoking the callback as each finishes (for streaming CSV).
pub fn run_grid(cells: &[GridCell], mut on_cell: impl FnMut(&CellResult)) -> Result<Vec<CellResult>> {
    if cells.is_empty() {
        return Err(Error::Invalid("empty grid".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in cells {
        if !seen.insert(c.cfg.hash()) {
            return Err(Error::Invalid(format!("duplicate grid cell {}", c.id)));
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for c in cells {
        let r = run_cell(c);
        on_cell(&r);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_features_are_collapsed() {
        let f = Tensor::full(&[8, 4], 0.7);
        let r = collapse_metrics(&f, 1e-3, 0.99).unwrap();
        assert!(r.feature_std < 1e-12);
        assert!((r.mean_pairwise_cosine - 1.0).abs() < 1e-12);
        assert!(r.collapsed);
        assert!(r.effective_rank < 1.0 + 1e-6);
    }

    #[test]
    fn gaussian_features_have_near_full_rank_and_are_healthy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::randn(&[400, 8], 1.0, &mut rng);
        let r = collapse_metrics(&f, 1e-3, 0.99).unwrap();
        assert!(r.effective_rank > 7.0, "rank {}", r.effective_rank);
        assert!(!r.collapsed);
        assert!(r.feature_std > 0.8 && r.feature_std < 1.2);
    }

    #[test]
    fn spread_and_rank_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::randn(&[60, 6], 1.0, &mut rng);
        let base = collapse_metrics(&f, 1e-3, 0.99).unwrap();
        // random orthogonal matrix from a QR factorization
        let m = DMatrix::<f64>::from_fn(6, 6, |_, _| {
            let t = Tensor::randn(&[1], 1.0, &mut rng);
            t.data()[0]
        });
        let q = m.qr().q();
        let fm = DMatrix::from_row_slice(60, 6, f.data());
        let rotated = fm * q;
        let mut row_major = Vec::with_capacity(60 * 6);
        for r in 0..60 {
            for c in 0..6 {
                row_major.push(rotated[(r, c)]);
            }
        }
        let rf = Tensor::new(&[60, 6], row_major).unwrap();
        let rot = collapse_metrics(&rf, 1e-3, 0.99).unwrap();
        assert!((base.feature_std - rot.feature_std).abs() < 1e-9);
        assert!((base.effective_rank - rot.effective_rank).abs() < 1e-6);
    }

    #[test]
    fn probe_separates_separable_features_and_not_constant_ones() {
        // class k has mean 3*e_k in 4-d: trivially separable
        let classes = 4;
        let n = 80;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut make = |seed_off: u64| {
            let _ = seed_off;
            let noise = Tensor::randn(&[n, classes], 0.3, &mut rng);
            let mut x = noise.data().to_vec();
            let mut y = Vec::with_capacity(n);
            for r in 0..n {
                let k = r % classes;
                x[r * classes + k] += 3.0;
                y.push(k);
            }
            (Tensor::new(&[n, classes], x).unwrap(), y)
        };
        let (xt, yt) = make(0);
        let (xe, ye) = make(1);
        let r = probe_features(&xt, &yt, &xe, &ye, classes, 200, 0.5).unwrap();
        assert!(r.test_acc > 0.9, "separable accuracy {}", r.test_acc);

        let cx = Tensor::full(&[n, classes], 0.5);
        let rc = probe_features(&cx, &yt, &cx, &ye, classes, 200, 0.5).unwrap();
        // chance = 1/4; allow 3 binomial standard errors
        let se = (0.25 * 0.75 / n as f64).sqrt();
        assert!((rc.test_acc - 0.25).abs() <= 3.0 * se, "constant-feature accuracy {}", rc.test_acc);
    }

    #[test]
    fn probe_is_deterministic_and_leaves_the_encoder_alone() {
        let mut cfg = preset("gn-ws").unwrap();
        cfg.set("image_size", "16").unwrap();
        let asm = cfg.build_assembly().unwrap();
        let train = synthetic_shapes(20, 1, 16);
        let test = synthetic_shapes(10, 2, 16);
        let before = asm.params.content_hash();
        let a = linear_probe(&asm, &train, &test, 8).unwrap();
        let b = linear_probe(&asm, &train, &test, 8).unwrap();
        assert_eq!(a.test_acc, b.test_acc);
        assert_eq!(a.train_acc, b.train_acc);
        assert_eq!(asm.params.content_hash(), before);
    }

    #[test]
    fn grid_enumerations_match_the_published_layout() {
        let base = preset("vanilla-bn").unwrap();
        let t1 = table1_cells(&base);
        assert_eq!(t1.len(), 22);
        assert_eq!(t1.iter().filter(|c| c.cfg.objective == Objective::Byol).count(), 15);
        assert_eq!(t1.iter().filter(|c| c.cfg.objective == Objective::Simclr).count(), 7);
        let hashes: std::collections::HashSet<_> = t1.iter().map(|c| c.cfg.hash()).collect();
        assert_eq!(hashes.len(), 22, "cells are unique");

        let t2 = table2_cells(&base);
        assert_eq!(t2.len(), 4);
        let by_id: std::collections::HashMap<_, _> =
            t2.iter().map(|c| (c.id.as_str(), &c.cfg)).collect();
        assert!(cell_uses_batch_statistics(by_id["vanilla-bn"]));
        assert!(!cell_uses_batch_statistics(by_id["no-bn"]));
        assert!(!cell_uses_batch_statistics(by_id["modified-init"]));
        assert!(!cell_uses_batch_statistics(by_id["gn-ws"]));
    }

    #[test]
    fn static_batch_stat_flag_matches_swapped_sample_probe() {
        // dynamic check: encode a batch, swap one other sample, compare row 0
        for preset_name in ["gn-ws", "no-bn", "vanilla-bn"] {
            let mut cfg = preset(preset_name).unwrap();
            cfg.set("image_size", "16").unwrap();
            let asm = cfg.build_assembly().unwrap();
            let ds = synthetic_shapes(5, 3, 16);
            let run = |idx: &[usize]| {
                let x = ds.batch(idx).unwrap();
                let mut g = Graph::new();
                let b = asm.bind(&mut g, false).unwrap();
                let xv = g.leaf(&x, false).unwrap();
                let mut fx = FwdEffects::default();
                let y = asm.forward_encoder(&mut g, &b, xv, Mode::Train, &mut fx).unwrap();
                g.data_of(y)[..asm.arch.d_repr()].to_vec()
            };
            let a = run(&[0, 1, 2, 3]);
            let b = run(&[0, 4, 2, 3]);
            let depends = a != b;
            assert_eq!(
                depends,
                cell_uses_batch_statistics(&cfg),
                "dynamic vs static disagreement for {}",
                preset_name
            );
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(run_grid(&[], |_| {}).is_err());
    }
}
