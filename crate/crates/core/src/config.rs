//! Experiment configuration: a flat key=value text format with preset
//! inheritance, canonicalized so that the config hash identifies a run.

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Assembly, ComponentNorms};
use crate::norm::NormKind;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Byol,
    Simclr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Standard,
    /// Capture BN statistics with one forward pass, remove BN, re-init affines.
    BnCaptureReinit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub objective: Objective,
    pub encoder_norm: NormKind,
    pub projector_norm: NormKind,
    pub predictor_norm: NormKind,
    pub ws: bool,
    pub init_mode: InitMode,
    pub optimizer: crate::optim::Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub trust_coeff: f64,
    pub temperature: f64,
    pub target_decay: f64,
    /// Run the EMA formula exactly as printed (decay multiplies the online
    /// weights) instead of the conventional reading.
    pub ema_literal: bool,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub groups: usize,
    pub seed: u64,
    pub dataset: String,
    pub dataset_size: usize,
    pub data_seed: u64,
    pub image_size: usize,
    pub probe_train_size: usize,
    pub probe_test_size: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub ws_eps: f64,
    pub stat_floor: f64,
    pub collapse_std_rel: f64,
    pub collapse_cosine: f64,
    pub aug_crop_pad: usize,
    pub aug_flip_p: f64,
    pub aug_brightness: f64,
    pub aug_contrast: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            objective: Objective::Byol,
            encoder_norm: NormKind::Batch,
            projector_norm: NormKind::Batch,
            predictor_norm: NormKind::Batch,
            ws: false,
            init_mode: InitMode::Standard,
            optimizer: crate::optim::Optimizer::Lars,
            lr: 0.2,
            weight_decay: 1.5e-6,
            momentum: 0.9,
            trust_coeff: 1e-3,
            temperature: 0.1,
            target_decay: 0.996,
            ema_literal: false,
            warmup_epochs: 10,
            epochs: 30,
            batch_size: 64,
            groups: 16,
            seed: 0,
            dataset: "synthetic".into(),
            dataset_size: 256,
            data_seed: 1234,
            image_size: 32,
            probe_train_size: 256,
            probe_test_size: 256,
            norm_eps: 1e-5,
            bn_momentum: 0.9,
            ws_eps: 1e-4,
            stat_floor: 1e-3,
            collapse_std_rel: 1e-3,
            collapse_cosine: 0.99,
            aug_crop_pad: 4,
            aug_flip_p: 0.5,
            aug_brightness: 0.2,
            aug_contrast: 0.2,
        }
    }
}

pub const PRESET_NAMES: &[&str] = &["vanilla-bn", "no-bn", "modified-init", "gn-ws"];

/// The four summary variants, with their published hyperparameters as defaults.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    match name {
        // BYOL with BN everywhere: lr 0.2, wd 1.5e-6, target decay 0.996
        "vanilla-bn" => {}
        "no-bn" => {
            c.encoder_norm = NormKind::None;
            c.projector_norm = NormKind::None;
            c.predictor_norm = NormKind::None;
        }
        "modified-init" => {
            // same hyperparameters as vanilla, longer warmup (10 -> 50)
            c.init_mode = InitMode::BnCaptureReinit;
            c.warmup_epochs = 50;
        }
        "gn-ws" => {
            c.encoder_norm = NormKind::Group(0);
            c.projector_norm = NormKind::Group(0);
            c.predictor_norm = NormKind::Group(0);
            c.ws = true;
            c.lr = 0.24;
            c.weight_decay = 3e-8;
            c.target_decay = 0.999;
            c.groups = 16;
        }
        other => return Err(Error::Config(format!("unknown preset '{}'", other))),
    }
    Ok(c)
}

fn parse_norm(v: &str) -> Result<NormKind> {
    Ok(match v {
        "bn" => NormKind::Batch,
        "ln" => NormKind::Layer,
        "gn" => NormKind::Group(0),
        "in" => NormKind::Instance,
        "none" => NormKind::None,
        other => return Err(Error::Config(format!("unknown norm '{}'", other))),
    })
}

fn norm_str(k: NormKind) -> &'static str {
    match k {
        NormKind::Batch => "bn",
        NormKind::Layer => "ln",
        NormKind::Group(_) => "gn",
        NormKind::Instance => "in",
        NormKind::None => "none",
    }
}

fn parse_f64(k: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{}: bad float '{}'", k, v)))
}

fn parse_usize(k: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{}: bad integer '{}'", k, v)))
}

fn parse_bool(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{}: bad bool '{}'", k, v))),
    }
}

impl ExperimentConfig {
    /// Apply a single `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "objective" => {
                self.objective = match value {
                    "byol" => Objective::Byol,
                    "simclr" => Objective::Simclr,
                    _ => return Err(Error::Config(format!("unknown objective '{}'", value))),
                }
            }
            "encoder_norm" => self.encoder_norm = parse_norm(value)?,
            "projector_norm" => self.projector_norm = parse_norm(value)?,
            "predictor_norm" => self.predictor_norm = parse_norm(value)?,
            "ws" => self.ws = parse_bool(key, value)?,
            "init_mode" => {
                self.init_mode = match value {
                    "standard" => InitMode::Standard,
                    "bn-capture-reinit" => InitMode::BnCaptureReinit,
                    _ => return Err(Error::Config(format!("unknown init_mode '{}'", value))),
                }
            }
            "optimizer" => {
                self.optimizer = match value {
                    "lars" => crate::optim::Optimizer::Lars,
                    "sgd" => crate::optim::Optimizer::Sgd,
                    _ => return Err(Error::Config(format!("unknown optimizer '{}'", value))),
                }
            }
            "lr" => self.lr = parse_f64(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "momentum" => self.momentum = parse_f64(key, value)?,
            "trust_coeff" => self.trust_coeff = parse_f64(key, value)?,
            "temperature" => self.temperature = parse_f64(key, value)?,
            "target_decay" => self.target_decay = parse_f64(key, value)?,
            "ema_literal" => self.ema_literal = parse_bool(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_usize(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "groups" => self.groups = parse_usize(key, value)?,
            "seed" => self.seed = value.parse().map_err(|_| Error::Config(format!("bad seed '{}'", value)))?,
            "dataset" => self.dataset = value.to_string(),
            "dataset_size" => self.dataset_size = parse_usize(key, value)?,
            "data_seed" => self.data_seed = value.parse().map_err(|_| Error::Config(format!("bad data_seed '{}'", value)))?,
            "image_size" => self.image_size = parse_usize(key, value)?,
            "probe_train_size" => self.probe_train_size = parse_usize(key, value)?,
            "probe_test_size" => self.probe_test_size = parse_usize(key, value)?,
            "norm_eps" => self.norm_eps = parse_f64(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_f64(key, value)?,
            "ws_eps" => self.ws_eps = parse_f64(key, value)?,
            "stat_floor" => self.stat_floor = parse_f64(key, value)?,
            "collapse_std_rel" => self.collapse_std_rel = parse_f64(key, value)?,
            "collapse_cosine" => self.collapse_cosine = parse_f64(key, value)?,
            "aug_crop_pad" => self.aug_crop_pad = parse_usize(key, value)?,
            "aug_flip_p" => self.aug_flip_p = parse_f64(key, value)?,
            "aug_brightness" => self.aug_brightness = parse_f64(key, value)?,
            "aug_contrast" => self.aug_contrast = parse_f64(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{}'", other))),
        }
        Ok(())
    }

    /// Parse the flat text format. A `preset=NAME` line (anywhere) selects the
    /// base; every other line overrides it in file order.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut base = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if base.is_some() {
                    return Err(Error::Config("multiple preset lines".into()));
                }
                base = Some(preset(v)?);
            } else {
                pairs.push((k.to_string(), v.to_string()));
            }
        }
        let mut cfg = base.unwrap_or_default();
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Canonical text form: resolved fields only, sorted keys, one per line.
    pub fn to_canonical_string(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("aug_brightness", self.aug_brightness.to_string()),
            ("aug_contrast", self.aug_contrast.to_string()),
            ("aug_crop_pad", self.aug_crop_pad.to_string()),
            ("aug_flip_p", self.aug_flip_p.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("collapse_cosine", self.collapse_cosine.to_string()),
            ("collapse_std_rel", self.collapse_std_rel.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("dataset", self.dataset.clone()),
            ("dataset_size", self.dataset_size.to_string()),
            ("ema_literal", self.ema_literal.to_string()),
            ("encoder_norm", norm_str(self.encoder_norm).to_string()),
            ("epochs", self.epochs.to_string()),
            ("groups", self.groups.to_string()),
            ("image_size", self.image_size.to_string()),
            (
                "init_mode",
                match self.init_mode {
                    InitMode::Standard => "standard".into(),
                    InitMode::BnCaptureReinit => "bn-capture-reinit".into(),
                },
            ),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
            (
                "objective",
                match self.objective {
                    Objective::Byol => "byol".into(),
                    Objective::Simclr => "simclr".into(),
                },
            ),
            (
                "optimizer",
                match self.optimizer {
                    crate::optim::Optimizer::Lars => "lars".into(),
                    crate::optim::Optimizer::Sgd => "sgd".into(),
                },
            ),
            ("predictor_norm", norm_str(self.predictor_norm).to_string()),
            ("probe_test_size", self.probe_test_size.to_string()),
            ("probe_train_size", self.probe_train_size.to_string()),
            ("projector_norm", norm_str(self.projector_norm).to_string()),
            ("seed", self.seed.to_string()),
            ("stat_floor", self.stat_floor.to_string()),
            ("target_decay", self.target_decay.to_string()),
            ("temperature", self.temperature.to_string()),
            ("trust_coeff", self.trust_coeff.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("ws", self.ws.to_string()),
            ("ws_eps", self.ws_eps.to_string()),
        ];
        kv.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Hash of the canonical form; identifies a run.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_canonical_string().as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn norms(&self) -> ComponentNorms {
        ComponentNorms {
            encoder: self.encoder_norm,
            projector: self.projector_norm,
            predictor: self.predictor_norm,
        }
    }

    pub fn has_predictor(&self) -> bool {
        self.objective == Objective::Byol
    }

    /// Build the assembly this config describes (pre-init-protocol: the
    /// bn-capture-reinit transform is applied by the trainer before training).
    pub fn build_assembly(&self) -> Result<Assembly> {
        let arch = ArchConfig { image_size: self.image_size, ..ArchConfig::default() };
        Assembly::build(
            arch,
            self.norms(),
            self.ws,
            self.has_predictor(),
            self.groups.max(1),
            self.norm_eps,
            self.bn_momentum,
            self.ws_eps,
            self.seed,
        )
    }
}
