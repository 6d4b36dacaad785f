//! Network assembly: small residual encoder, MLP projector, MLP predictor,
//! each with its own normalization scheme, optionally weight-standardized.
//!
//! Parameters live in a [`ParamStore`] keyed by stable names; a forward pass
//! binds them onto a graph once so that gradients from multiple views
//! accumulate on the same leaves.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norm::{self, NormKind};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Ordered, name-indexed parameter set. Iteration order is definition order
/// and is the canonical order for init draws, optimizer traversal, EMA and
/// checkpointing.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, tensor: Tensor, kind: ParamKind, trainable: bool) {
        assert!(!self.index.contains_key(name), "duplicate param {}", name);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, kind, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::Invalid(format!("unknown parameter {}", name))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Hash of all trainable parameter values; used to assert that evaluation
    /// never mutates a frozen network.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            if !e.trainable {
                continue;
            }
            h.update(e.name.as_bytes());
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Projector,
    Predictor,
}

/// Per-component normalization choice, mirroring the ablation grid axes.
#[derive(Debug, Clone, Copy)]
pub struct ComponentNorms {
    pub encoder: NormKind,
    pub projector: NormKind,
    pub predictor: NormKind,
}

#[derive(Debug, Clone)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub proj_hidden: usize,
    pub d_proj: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            image_size: 32,
            stem_channels: 16,
            stem_stride: 2,
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![1, 2, 2],
            blocks_per_stage: 2,
            proj_hidden: 128,
            d_proj: 64,
        }
    }
}

impl ArchConfig {
    pub fn d_repr(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }
}

/// One normalization site. `kind` is mutable state: the init protocol
/// rewrites BatchNorm sites into affine-only (`None`) sites.
#[derive(Debug, Clone)]
pub struct NormSite {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
    pub final_in_block: bool,
    pub component: Component,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Side effects of a forward pass: batch-stat updates to fold into running
/// stats, and optional per-site activation records for the init protocol and
/// its oracle tests.
#[derive(Debug, Default)]
pub struct FwdEffects {
    /// (site name, batch mean, batch var) for every BN site hit in train mode.
    pub stat_updates: Vec<(String, Tensor, Tensor)>,
    pub site_inputs: Option<Vec<(String, Tensor)>>,
    pub site_outputs: Option<Vec<(String, Tensor)>>,
}

impl FwdEffects {
    pub fn recording() -> Self {
        FwdEffects { stat_updates: Vec::new(), site_inputs: Some(Vec::new()), site_outputs: Some(Vec::new()) }
    }
}

pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {} not bound", name)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub y: Var,
    pub z: Var,
    pub q: Option<Var>,
}

/// Encoder + projector (+ predictor for BYOL) with per-component norms.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub arch: ArchConfig,
    pub norms: ComponentNorms,
    pub ws: bool,
    pub ws_eps: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub has_predictor: bool,
    pub sites: Vec<NormSite>,
    pub params: ParamStore,
}

struct Builder {
    params: ParamStore,
    sites: Vec<NormSite>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, cout: usize, kh: usize, kw: usize, cin: usize) {
        let fan_in = (kh * kw * cin) as f64;
        let t = Tensor::randn(&[cout, kh, kw, cin], (2.0 / fan_in).sqrt(), &mut self.rng);
        self.params.insert(name, t, ParamKind::Weight, true);
    }

    fn linear(&mut self, name: &str, dout: usize, din: usize) {
        let t = Tensor::randn(&[dout, din], (2.0 / din as f64).sqrt(), &mut self.rng);
        self.params.insert(name, t, ParamKind::Weight, true);
    }

    fn bias(&mut self, name: &str, d: usize) {
        self.params.insert(name, Tensor::zeros(&[d]), ParamKind::Bias, true);
    }

    fn norm_site(&mut self, name: &str, channels: usize, kind: NormKind, final_in_block: bool, component: Component) {
        self.params.insert(&format!("{}.gamma", name), Tensor::ones(&[channels]), ParamKind::Gamma, true);
        self.params.insert(&format!("{}.beta", name), Tensor::zeros(&[channels]), ParamKind::Beta, true);
        if kind == NormKind::Batch {
            self.params.insert(&format!("{}.rmean", name), Tensor::zeros(&[channels]), ParamKind::Buffer, false);
            self.params.insert(&format!("{}.rvar", name), Tensor::ones(&[channels]), ParamKind::Buffer, false);
            self.params.insert(&format!("{}.rcount", name), Tensor::zeros(&[1]), ParamKind::Buffer, false);
        }
        self.sites.push(NormSite {
            name: name.to_string(),
            channels,
            kind,
            final_in_block,
            component,
        });
    }
}

impl Assembly {
    /// Build an assembly from architecture, norm choices and a seed.
    /// Equal inputs give bit-identical initial parameters.
    pub fn build(
        arch: ArchConfig,
        norms: ComponentNorms,
        ws: bool,
        has_predictor: bool,
        groups: usize,
        norm_eps: f64,
        bn_momentum: f64,
        ws_eps: f64,
        seed: u64,
    ) -> Result<Self> {
        let resolve = |kind: NormKind, channels: usize| -> Result<NormKind> {
            Ok(match kind {
                NormKind::Group(_) => NormKind::Group(norm::effective_groups(groups, channels)?),
                other => other,
            })
        };
        let mut b = Builder {
            params: ParamStore::default(),
            sites: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        // encoder
        b.conv("enc.stem.conv", arch.stem_channels, 3, 3, arch.in_channels);
        b.norm_site("enc.stem.norm", arch.stem_channels, resolve(norms.encoder, arch.stem_channels)?, false, Component::Encoder);
        let mut cin = arch.stem_channels;
        for (si, (&cout, &stride)) in arch.stage_channels.iter().zip(&arch.stage_strides).enumerate() {
            for bi in 0..arch.blocks_per_stage {
                let p = format!("enc.s{}.b{}", si, bi);
                let s = if bi == 0 { stride } else { 1 };
                b.conv(&format!("{}.conv1", p), cout, 3, 3, cin);
                b.norm_site(&format!("{}.norm1", p), cout, resolve(norms.encoder, cout)?, false, Component::Encoder);
                b.conv(&format!("{}.conv2", p), cout, 3, 3, cout);
                b.norm_site(&format!("{}.norm2", p), cout, resolve(norms.encoder, cout)?, true, Component::Encoder);
                if s != 1 || cin != cout {
                    b.conv(&format!("{}.down", p), cout, 1, 1, cin);
                    b.norm_site(&format!("{}.down_norm", p), cout, resolve(norms.encoder, cout)?, false, Component::Encoder);
                }
                cin = cout;
            }
        }
        // projector
        let d_repr = arch.d_repr();
        b.linear("proj.fc1", arch.proj_hidden, d_repr);
        b.norm_site("proj.norm", arch.proj_hidden, resolve(norms.projector, arch.proj_hidden)?, false, Component::Projector);
        b.linear("proj.fc2", arch.d_proj, arch.proj_hidden);
        b.bias("proj.fc2.b", arch.d_proj);
        // predictor
        if has_predictor {
            b.linear("pred.fc1", arch.proj_hidden, arch.d_proj);
            b.norm_site("pred.norm", arch.proj_hidden, resolve(norms.predictor, arch.proj_hidden)?, false, Component::Predictor);
            b.linear("pred.fc2", arch.d_proj, arch.proj_hidden);
            b.bias("pred.fc2.b", arch.d_proj);
        }
        Ok(Assembly {
            arch,
            norms,
            ws,
            ws_eps,
            norm_eps,
            bn_momentum,
            has_predictor,
            sites: b.sites,
            params: b.params,
        })
    }

    pub fn site(&self, name: &str) -> Result<&NormSite> {
        self.sites
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown norm site {}", name)))
    }

    pub fn site_mut(&mut self, name: &str) -> Result<&mut NormSite> {
        self.sites
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown norm site {}", name)))
    }

    /// True if any forward path computes statistics across batch elements.
    pub fn uses_batch_statistics(&self) -> bool {
        self.sites.iter().any(|s| s.kind.uses_batch_statistics())
    }

    /// Bind all trainable parameters onto the graph as leaves.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<Bound> {
        let mut vars = HashMap::new();
        for e in self.params.iter() {
            if e.trainable {
                vars.insert(e.name.clone(), g.leaf(&e.tensor, requires_grad)?);
            }
        }
        Ok(Bound { vars })
    }

    fn weight(&self, g: &mut Graph, b: &Bound, name: &str) -> Result<Var> {
        let w = b.var(name)?;
        if self.ws {
            norm::weight_standardize(g, w, self.ws_eps)
        } else {
            Ok(w)
        }
    }

    fn conv(&self, g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.weight(g, b, name)?;
        g.conv2d(x, w, stride, pad)
    }

    fn linear(&self, g: &mut Graph, b: &Bound, name: &str, bias: Option<&str>, x: Var) -> Result<Var> {
        let w = self.weight(g, b, name)?;
        let wt = g.transpose2d(w)?;
        let out = g.matmul(x, wt)?;
        match bias {
            Some(bn) => g.add(out, b.var(bn)?),
            None => Ok(out),
        }
    }

    fn apply_norm(
        &self,
        g: &mut Graph,
        b: &Bound,
        site_name: &str,
        x: Var,
        mode: Mode,
        fx: &mut FwdEffects,
    ) -> Result<Var> {
        let site = self.site(site_name)?;
        let gamma = b.var(&format!("{}.gamma", site.name))?;
        let beta = b.var(&format!("{}.beta", site.name))?;
        if let Some(rec) = fx.site_inputs.as_mut() {
            rec.push((site.name.clone(), g.value(x)));
        }
        let out = match site.kind {
            NormKind::Batch => match mode {
                Mode::Train => {
                    let (out, bm, bv) = norm::batch_norm_train(g, x, gamma, beta, self.norm_eps)?;
                    fx.stat_updates.push((site.name.clone(), bm, bv));
                    out
                }
                Mode::Eval => {
                    let count = self.params.tensor(&format!("{}.rcount", site.name))?.data()[0];
                    if count < 1.0 {
                        return Err(Error::Invalid(format!(
                            "eval-mode batch norm at {} has unpopulated running stats",
                            site.name
                        )));
                    }
                    let rm = self.params.tensor(&format!("{}.rmean", site.name))?.clone();
                    let rv = self.params.tensor(&format!("{}.rvar", site.name))?.clone();
                    norm::batch_norm_eval(g, x, gamma, beta, &rm, &rv, self.norm_eps)?
                }
            },
            NormKind::Layer => norm::layer_norm(g, x, gamma, beta, self.norm_eps)?,
            NormKind::Group(gr) => norm::group_norm(g, x, gamma, beta, gr, self.norm_eps)?,
            NormKind::Instance => norm::instance_norm(g, x, gamma, beta, self.norm_eps)?,
            NormKind::None => norm::affine(g, x, gamma, beta)?,
        };
        if let Some(rec) = fx.site_outputs.as_mut() {
            rec.push((site.name.clone(), g.value(out)));
        }
        Ok(out)
    }

    /// Encoder forward: (N,H,W,C) image batch to (N, D_repr) representation.
    pub fn forward_encoder(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        mode: Mode,
        fx: &mut FwdEffects,
    ) -> Result<Var> {
        let mut h = self.conv(g, b, "enc.stem.conv", x, self.arch.stem_stride, 1)?;
        h = self.apply_norm(g, b, "enc.stem.norm", h, mode, fx)?;
        h = g.relu(h)?;
        let mut cin = self.arch.stem_channels;
        for (si, (&cout, &stride)) in self.arch.stage_channels.iter().zip(&self.arch.stage_strides).enumerate() {
            for bi in 0..self.arch.blocks_per_stage {
                let p = format!("enc.s{}.b{}", si, bi);
                let s = if bi == 0 { stride } else { 1 };
                let mut r = self.conv(g, b, &format!("{}.conv1", p), h, s, 1)?;
                r = self.apply_norm(g, b, &format!("{}.norm1", p), r, mode, fx)?;
                r = g.relu(r)?;
                r = self.conv(g, b, &format!("{}.conv2", p), r, 1, 1)?;
                r = self.apply_norm(g, b, &format!("{}.norm2", p), r, mode, fx)?;
                let skip = if s != 1 || cin != cout {
                    let d = self.conv(g, b, &format!("{}.down", p), h, s, 0)?;
                    self.apply_norm(g, b, &format!("{}.down_norm", p), d, mode, fx)?
                } else {
                    h
                };
                let sum = g.add(r, skip)?;
                h = g.relu(sum)?;
                cin = cout;
            }
        }
        // global average pool over H and W
        let pooled = g.mean_axes(h, &[1, 2])?;
        let n = g.shape_of(pooled)[0];
        g.reshape(pooled, &[n, self.arch.d_repr()])
    }

    fn forward_head(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        x: Var,
        mode: Mode,
        fx: &mut FwdEffects,
    ) -> Result<Var> {
        let mut h = self.linear(g, b, &format!("{}.fc1", prefix), None, x)?;
        h = self.apply_norm(g, b, &format!("{}.norm", prefix), h, mode, fx)?;
        h = g.relu(h)?;
        self.linear(g, b, &format!("{}.fc2", prefix), Some(&format!("{}.fc2.b", prefix)), h)
    }

    pub fn forward_projector(&self, g: &mut Graph, b: &Bound, y: Var, mode: Mode, fx: &mut FwdEffects) -> Result<Var> {
        self.forward_head(g, b, "proj", y, mode, fx)
    }

    pub fn forward_predictor(&self, g: &mut Graph, b: &Bound, z: Var, mode: Mode, fx: &mut FwdEffects) -> Result<Var> {
        if !self.has_predictor {
            return Err(Error::Invalid("assembly has no predictor".into()));
        }
        self.forward_head(g, b, "pred", z, mode, fx)
    }

    /// Full forward for one view.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        mode: Mode,
        fx: &mut FwdEffects,
    ) -> Result<ForwardOut> {
        let y = self.forward_encoder(g, b, x, mode, fx)?;
        let z = self.forward_projector(g, b, y, mode, fx)?;
        let q = if self.has_predictor { Some(self.forward_predictor(g, b, z, mode, fx)?) } else { None };
        Ok(ForwardOut { y, z, q })
    }

    /// Forward both views through one binding of this assembly.
    /// Returns (z, z', q(z), q(z')).
    pub fn forward_views(
        &self,
        g: &mut Graph,
        b: &Bound,
        v: &Tensor,
        v_prime: &Tensor,
        mode: Mode,
        fx: &mut FwdEffects,
    ) -> Result<(ForwardOut, ForwardOut)> {
        if v.shape() != v_prime.shape() {
            return Err(Error::ShapeMismatch("views must have identical shapes".into()));
        }
        let xv = g.leaf(v, false)?;
        let xp = g.leaf(v_prime, false)?;
        let o1 = self.forward(g, b, xv, mode, fx)?;
        let o2 = self.forward(g, b, xp, mode, fx)?;
        Ok((o1, o2))
    }

    /// Fold batch-stat updates from a train-mode forward into the running
    /// statistics of the matching BN sites.
    pub fn apply_stat_updates(&mut self, updates: &[(String, Tensor, Tensor)]) -> Result<()> {
        let momentum = self.bn_momentum;
        for (name, bm, bv) in updates {
            let rm = self.params.get_mut(&format!("{}.rmean", name))?;
            for (r, b) in rm.tensor.data_mut().iter_mut().zip(bm.data()) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            let rv = self.params.get_mut(&format!("{}.rvar", name))?;
            for (r, b) in rv.tensor.data_mut().iter_mut().zip(bv.data()) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            let rc = self.params.get_mut(&format!("{}.rcount", name))?;
            rc.tensor.data_mut()[0] += 1.0;
        }
        Ok(())
    }
}
