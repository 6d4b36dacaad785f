//! Training loop shared by the bootstrap (online/target) and contrastive
//! objectives: view augmentation, the optimizer step, the exponential moving
//! average of the target network, and divergence handling.

use crate::config::{ExperimentConfig, InitMode, Objective};
use crate::data::{synthetic_shapes, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init_protocol::CapturedStats;
use crate::model::{Assembly, Bound, FwdEffects, Mode, ParamKind};
use crate::objectives::{byol_loss, infonce_loss};
use crate::optim::{lars_step, sgd_step, Optimizer, Schedule};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// xi <- (1 - eta) * xi + eta * theta. With eta = 1 the target copies the
/// online weights; with eta = 0 it is frozen.
pub fn ema_update(xi: &mut Tensor, theta: &Tensor, eta: f64) -> Result<()> {
    if xi.shape() != theta.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ema shapes {:?} vs {:?}",
            xi.shape(),
            theta.shape()
        )));
    }
    for (x, t) in xi.data_mut().iter_mut().zip(theta.data()) {
        *x = (1.0 - eta) * *x + eta * *t;
    }
    Ok(())
}

/// Apply the EMA to every trainable tensor of the target; running-stat
/// buffers are copied outright so the target stays usable in eval mode.
pub fn ema_update_assembly(target: &mut Assembly, online: &Assembly, eta: f64) -> Result<()> {
    for e in target.params.iter_mut() {
        let src = &online.params.get(&e.name)?.tensor;
        if e.kind == ParamKind::Buffer {
            e.tensor = src.clone();
        } else {
            ema_update(&mut e.tensor, src, eta)?;
        }
    }
    Ok(())
}

/// Random crop (zero-pad then crop back), horizontal flip, brightness shift,
/// contrast scale. All draws come from the caller's stream, two independent
/// sets per image for the two views.
#[derive(Debug, Clone, Copy)]
pub struct AugmentationPolicy {
    pub crop_pad: usize,
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentationPolicy {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        AugmentationPolicy {
            crop_pad: cfg.aug_crop_pad,
            flip_p: cfg.aug_flip_p,
            brightness: cfg.aug_brightness,
            contrast: cfg.aug_contrast,
        }
    }

    /// One augmented view of an (H, W, C) image; values stay in [0, 1].
    pub fn augment(&self, img: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let shape = img.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch("augment expects (H, W, C)".into()));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let p = self.crop_pad as isize;
        // crop offsets into the zero-padded image
        let oy = rng.gen_range(0..=2 * self.crop_pad) as isize;
        let ox = rng.gen_range(0..=2 * self.crop_pad) as isize;
        let flip = rng.gen_range(0.0..1.0) < self.flip_p;
        let delta = if self.brightness > 0.0 {
            rng.gen_range(-self.brightness..=self.brightness)
        } else {
            0.0
        };
        let factor = if self.contrast > 0.0 {
            rng.gen_range(1.0 - self.contrast..=1.0 + self.contrast)
        } else {
            1.0
        };

        let src = img.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..h as isize {
            for col in 0..w as isize {
                let sr = r + oy - p;
                let sc_unflipped = col + ox - p;
                let sc = if flip { w as isize - 1 - sc_unflipped } else { sc_unflipped };
                if sr < 0 || sr >= h as isize || sc < 0 || sc >= w as isize {
                    continue; // zero padding
                }
                let dst = ((r as usize * w) + col as usize) * c;
                let srco = ((sr as usize * w) + sc as usize) * c;
                out[dst..dst + c].copy_from_slice(&src[srco..srco + c]);
            }
        }
        // skip the photometric pass entirely at the identity settings so the
        // no-op policy is exact (mean + (v - mean) is not an fp identity)
        if factor != 1.0 || delta != 0.0 {
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            for v in out.iter_mut() {
                *v = (mean + (*v - mean) * factor + delta).clamp(0.0, 1.0);
            }
        }
        Tensor::new(shape, out)
    }

    /// Two views of the selected images, stacked to (N, H, W, C) each.
    pub fn make_views(
        &self,
        data: &Dataset,
        indices: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor)> {
        let mut v1 = Vec::new();
        let mut v2 = Vec::new();
        let mut shape = Vec::new();
        for &i in indices {
            let img = &data.images[i];
            shape = img.shape().to_vec();
            v1.extend_from_slice(self.augment(img, rng)?.data());
            v2.extend_from_slice(self.augment(img, rng)?.data());
        }
        let full = [&[indices.len()][..], &shape].concat();
        Ok((Tensor::new(&full, v1)?, Tensor::new(&full, v2)?))
    }
}

/// Per-epoch training record, one row of metrics.csv.
#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Alignment term: mean cosine for the bootstrap objective, mean positive
    /// logit term for the contrastive one.
    pub positive: f64,
    /// Repulsion term (contrastive only; 0 for the bootstrap objective).
    pub negative: f64,
    pub lr: f64,
    pub feature_std: f64,
    pub mean_pairwise_cosine: f64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub diverged: bool,
    pub note: Option<String>,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub online: Assembly,
    pub target: Option<Assembly>,
    pub bufs: HashMap<String, Tensor>,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub schedule: Schedule,
    pub captured: Option<CapturedStats>,
    pub dataset: Dataset,
    pub aug: AugmentationPolicy,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Trainer> {
        if cfg.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let dataset = match cfg.dataset.as_str() {
            "synthetic" => synthetic_shapes(cfg.dataset_size, cfg.data_seed, cfg.image_size),
            other => return Err(Error::Config(format!("unknown dataset '{}'", other))),
        };
        if dataset.len() < cfg.batch_size {
            return Err(Error::Config("dataset smaller than one batch".into()));
        }
        let mut online = cfg.build_assembly()?;
        let captured = if cfg.init_mode == InitMode::BnCaptureReinit {
            let n = cfg.batch_size.min(dataset.len());
            let indices: Vec<usize> = (0..n).collect();
            let batch = dataset.batch(&indices)?;
            Some(crate::init_protocol::capture_and_reinit(&mut online, &batch, cfg.stat_floor)?)
        } else {
            None
        };
        let target = if cfg.objective == Objective::Byol { Some(online.clone()) } else { None };
        let steps_per_epoch = (dataset.len() / cfg.batch_size).max(1);
        let schedule = Schedule {
            base_lr: cfg.lr,
            warmup_epochs: cfg.warmup_epochs,
            total_epochs: cfg.epochs.max(cfg.warmup_epochs),
            steps_per_epoch,
        };
        let aug = AugmentationPolicy::from_config(&cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            online,
            target,
            bufs: HashMap::new(),
            step: 0,
            epoch: 0,
            rng,
            schedule,
            captured,
            dataset,
            aug,
        })
    }

    /// EMA coefficient applied to the online weights. The published update is
    /// written with the decay rate multiplying the online side; by default we
    /// use the conventional reading (decay keeps the target), and `ema_literal`
    /// switches to the formula exactly as printed.
    pub fn ema_eta(&self) -> f64 {
        if self.cfg.ema_literal {
            self.cfg.target_decay
        } else {
            1.0 - self.cfg.target_decay
        }
    }

    fn collect_grads(&self, g: &Graph, bound: &Bound) -> Result<HashMap<String, Tensor>> {
        let mut grads = HashMap::new();
        for e in self.online.params.iter() {
            if !e.trainable {
                continue;
            }
            let v = bound.var(&e.name)?;
            if let Some(grad) = g.grad(v) {
                grads.insert(e.name.clone(), grad);
            }
        }
        Ok(grads)
    }

    /// One optimizer step on one batch of two views. Returns
    /// (loss, positive term, negative term).
    pub fn step_once(&mut self, v: &Tensor, v_prime: &Tensor) -> Result<(f64, f64, f64)> {
        let lr = self.schedule.lr_at(self.step)?;
        let mut g = Graph::new();
        let bound = self.online.bind(&mut g, true)?;
        let mut fx = FwdEffects::default();
        let (o1, o2) = self.online.forward_views(&mut g, &bound, v, v_prime, Mode::Train, &mut fx)?;

        let (loss, pos, neg) = match self.cfg.objective {
            Objective::Byol => {
                let target = self.target.as_ref().expect("bootstrap objective has a target");
                let bt = target.bind(&mut g, false)?;
                // target batch-stat updates are discarded: its BN state only
                // moves through the EMA/copy below
                let mut fx_t = FwdEffects::default();
                let (t1, t2) = target.forward_views(&mut g, &bt, v, v_prime, Mode::Train, &mut fx_t)?;
                let tz1 = g.value(t1.z);
                let tz2 = g.value(t2.z);
                let l1 = byol_loss(&mut g, o1.q.expect("predictor"), &tz2)?;
                let l2 = byol_loss(&mut g, o2.q.expect("predictor"), &tz1)?;
                let s = g.add(l1.loss, l2.loss)?;
                let loss = g.scale(s, 0.5)?;
                (loss, 0.5 * (l1.alignment + l2.alignment), 0.0)
            }
            Objective::Simclr => {
                let l = infonce_loss(&mut g, o1.z, o2.z, self.cfg.temperature)?;
                (l.loss, l.positive, l.negative)
            }
        };
        let loss_val = g.data_of(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step: self.step, what: "non-finite loss".into() });
        }
        g.backward(loss)?;
        let grads = self.collect_grads(&g, &bound)?;
        match self.cfg.optimizer {
            Optimizer::Sgd => sgd_step(
                &mut self.online.params,
                &grads,
                &mut self.bufs,
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
                self.step,
            )?,
            Optimizer::Lars => lars_step(
                &mut self.online.params,
                &grads,
                &mut self.bufs,
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
                self.cfg.trust_coeff,
                self.step,
            )?,
        }
        self.online.apply_stat_updates(&fx.stat_updates)?;
        if let Some(target) = self.target.as_mut() {
            let eta = if self.cfg.ema_literal {
                self.cfg.target_decay
            } else {
                1.0 - self.cfg.target_decay
            };
            ema_update_assembly(target, &self.online, eta)?;
        }
        self.step += 1;
        Ok((loss_val, pos, neg))
    }

    /// Representations of up to `cap` dataset images, computed in train mode
    /// (batch statistics) with stat updates discarded, for collapse tracking.
    pub fn probe_representations(&self, cap: usize) -> Result<Tensor> {
        let n = cap.min(self.dataset.len()).max(2);
        let indices: Vec<usize> = (0..n).collect();
        let batch = self.dataset.batch(&indices)?;
        let mut g = Graph::new();
        let bound = self.online.bind(&mut g, false)?;
        let x = g.leaf(&batch, false)?;
        let mut fx = FwdEffects::default();
        let y = self.online.forward_encoder(&mut g, &bound, x, Mode::Train, &mut fx)?;
        Ok(g.value(y))
    }

    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let n = self.dataset.len();
        let bs = self.cfg.batch_size;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let mut last_lr = 0.0;
        for chunk in order.chunks_exact(bs) {
            last_lr = self.schedule.lr_at(self.step)?;
            let (v, vp) = self.aug.make_views(&self.dataset, chunk, &mut self.rng)?;
            let (l, p, ng) = self.step_once(&v, &vp)?;
            sums.0 += l;
            sums.1 += p;
            sums.2 += ng;
            batches += 1;
        }
        let reps = self.probe_representations(64)?;
        let report = crate::eval::collapse_metrics(&reps, self.cfg.collapse_std_rel, self.cfg.collapse_cosine)?;
        let m = EpochMetrics {
            epoch: self.epoch,
            loss: sums.0 / batches as f64,
            positive: sums.1 / batches as f64,
            negative: sums.2 / batches as f64,
            lr: last_lr,
            feature_std: report.feature_std,
            mean_pairwise_cosine: report.mean_pairwise_cosine,
        };
        self.epoch += 1;
        Ok(m)
    }

    /// Run to the configured epoch count. Numeric divergence ends the run
    /// early and is reported, not raised; structural errors propagate.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainSummary> {
        let mut epochs = Vec::new();
        while self.epoch < self.cfg.epochs {
            match self.train_epoch() {
                Ok(m) => {
                    on_epoch(&m);
                    epochs.push(m);
                }
                Err(Error::Divergence { step, what }) => {
                    return Ok(TrainSummary {
                        epochs,
                        diverged: true,
                        note: Some(format!("diverged at step {}: {}", step, what)),
                    });
                }
                Err(Error::NonFinite(what)) => {
                    return Ok(TrainSummary {
                        epochs,
                        diverged: true,
                        note: Some(format!("non-finite value in forward: {}", what)),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(TrainSummary { epochs, diverged: false, note: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn tiny(objective: &str) -> ExperimentConfig {
        let mut c = preset("vanilla-bn").unwrap();
        c.set("objective", objective).unwrap();
        c.set("dataset_size", "16").unwrap();
        c.set("batch_size", "8").unwrap();
        c.set("epochs", "1").unwrap();
        c.set("warmup_epochs", "1").unwrap();
        c.set("image_size", "16").unwrap();
        c
    }

    #[test]
    fn ema_endpoints_and_replay() {
        let theta = Tensor::new(&[2], vec![2.0, -4.0]).unwrap();
        let mut xi = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        ema_update(&mut xi, &theta, 1.0).unwrap();
        assert_eq!(xi.data(), theta.data());
        let mut frozen = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        ema_update(&mut frozen, &theta, 0.0).unwrap();
        assert_eq!(frozen.data(), &[1.0, 1.0]);
        // three literal updates against a hand expansion
        let mut x = 1.0;
        let mut xi = Tensor::new(&[1], vec![x]).unwrap();
        for t in [3.0, -1.0, 0.5] {
            let th = Tensor::new(&[1], vec![t]).unwrap();
            ema_update(&mut xi, &th, 0.25).unwrap();
            x = 0.75 * x + 0.25 * t;
        }
        assert!((xi.data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn augmentation_is_seeded_and_bounded() {
        let ds = synthetic_shapes(4, 7, 16);
        let pol = AugmentationPolicy { crop_pad: 4, flip_p: 0.5, brightness: 0.2, contrast: 0.2 };
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let (a1, a2) = pol.make_views(&ds, &[0, 1, 2], &mut r1).unwrap();
        let (b1, b2) = pol.make_views(&ds, &[0, 1, 2], &mut r2).unwrap();
        assert_eq!(a1.data(), b1.data());
        assert_eq!(a2.data(), b2.data());
        assert_ne!(a1.data(), a2.data(), "the two views draw independently");
        assert!(a1.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a1.shape(), &[3, 16, 16, 3]);
    }

    #[test]
    fn identity_policy_is_a_no_op() {
        let ds = synthetic_shapes(1, 7, 16);
        let pol = AugmentationPolicy { crop_pad: 0, flip_p: 0.0, brightness: 0.0, contrast: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = pol.augment(&ds.images[0], &mut rng).unwrap();
        assert_eq!(out.data(), ds.images[0].data());
    }

    #[test]
    fn bootstrap_epoch_moves_online_and_target_differently() {
        let mut t = Trainer::new(tiny("byol")).unwrap();
        let before_target = t.target.as_ref().unwrap().params.content_hash();
        assert_eq!(t.online.params.content_hash(), before_target);
        let s = t.train(|_| {}).unwrap();
        assert!(!s.diverged);
        assert_eq!(s.epochs.len(), 1);
        assert!(s.epochs[0].loss.is_finite());
        assert_eq!(t.step, 2);
        let h_on = t.online.params.content_hash();
        let h_tg = t.target.as_ref().unwrap().params.content_hash();
        assert_ne!(h_on, before_target, "online weights moved");
        assert_ne!(h_tg, before_target, "target tracked the online weights");
        assert_ne!(h_on, h_tg, "target lags the online network");
    }

    #[test]
    fn contrastive_epoch_runs_without_predictor() {
        let mut t = Trainer::new(tiny("simclr")).unwrap();
        assert!(t.target.is_none());
        let s = t.train(|_| {}).unwrap();
        assert!(!s.diverged);
        let m = s.epochs[0];
        assert!((m.loss - (m.positive + m.negative)).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = Trainer::new(tiny("byol")).unwrap();
        let mut b = Trainer::new(tiny("byol")).unwrap();
        a.train(|_| {}).unwrap();
        b.train(|_| {}).unwrap();
        assert_eq!(a.online.params.content_hash(), b.online.params.content_hash());
    }

    #[test]
    fn exploding_lr_reports_divergence_instead_of_erroring() {
        let mut cfg = tiny("byol");
        // normalization makes the network scale-invariant, so blow up a net
        // without any norms
        cfg.set("encoder_norm", "none").unwrap();
        cfg.set("projector_norm", "none").unwrap();
        cfg.set("predictor_norm", "none").unwrap();
        cfg.set("lr", "1e12").unwrap();
        cfg.set("optimizer", "sgd").unwrap();
        cfg.set("warmup_epochs", "0").unwrap();
        cfg.set("epochs", "4").unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let s = t.train(|_| {}).unwrap();
        assert!(s.diverged);
        assert!(s.note.is_some());
    }
}
