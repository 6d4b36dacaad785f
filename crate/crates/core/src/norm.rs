//! The normalization family: batch, layer, group, instance, and weight
//! standardization.
//!
//! All of them are composed from graph primitives, so gradients come from the
//! tape and are covered by the same finite-difference checks as everything
//! else. Activations are (N, ..., C) with channels last; gamma/beta are
//! per-channel vectors of length C.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
    Group(usize),
    Instance,
    /// No normalization; the trainable per-channel affine is still applied.
    None,
}

impl NormKind {
    pub fn uses_batch_statistics(&self) -> bool {
        matches!(self, NormKind::Batch)
    }

    pub fn label(&self) -> String {
        match self {
            NormKind::Batch => "bn".into(),
            NormKind::Layer => "ln".into(),
            NormKind::Group(g) => format!("gn{}", g),
            NormKind::Instance => "in".into(),
            NormKind::None => "none".into(),
        }
    }
}

/// One normalization site's configuration.
#[derive(Debug, Clone, Copy)]
pub struct NormScheme {
    pub kind: NormKind,
    pub eps: f64,
    /// Running-stat momentum; meaningful for BatchNorm only.
    pub momentum: f64,
}

/// G must divide C; G larger than C is clamped (the toy widths never go
/// below 16, so this only fires on deliberately tiny configs).
pub fn effective_groups(groups: usize, channels: usize) -> Result<usize> {
    if groups == 0 {
        return Err(Error::Invalid("group count must be positive".into()));
    }
    let g = if groups > channels {
        eprintln!("warn: clamping GN groups {} to channel count {}", groups, channels);
        channels
    } else {
        groups
    };
    if channels % g != 0 {
        return Err(Error::Invalid(format!("groups {} does not divide channels {}", g, channels)));
    }
    Ok(g)
}

fn check_affine(g: &Graph, x: Var, gamma: Var, beta: Var) -> Result<usize> {
    let c = *g.shape_of(x).last().ok_or_else(|| Error::ShapeMismatch("rank-0 activation".into()))?;
    if g.shape_of(gamma) != [c] || g.shape_of(beta) != [c] {
        return Err(Error::ShapeMismatch(format!(
            "affine params must be [{}], got gamma {:?} beta {:?}",
            c,
            g.shape_of(gamma),
            g.shape_of(beta)
        )));
    }
    Ok(c)
}

/// gamma * x + beta, broadcasting over the channel axis.
pub fn affine(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    check_affine(g, x, gamma, beta)?;
    let scaled = g.mul(x, gamma)?;
    g.add(scaled, beta)
}

/// Train-mode batch norm: per-channel statistics over all leading axes.
/// Returns the output together with the detached batch mean/var (length C),
/// which the caller folds into running statistics.
pub fn batch_norm_train(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Tensor, Tensor)> {
    let c = check_affine(g, x, gamma, beta)?;
    let shape = g.shape_of(x).to_vec();
    if shape[0] < 2 {
        return Err(Error::Invalid("batch norm in train mode requires batch size >= 2".into()));
    }
    let axes: Vec<usize> = (0..shape.len() - 1).collect();
    let mean = g.mean_axes(x, &axes)?;
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered)?;
    let var = g.mean_axes(sq, &axes)?;
    let var_eps = g.add_scalar(var, eps)?;
    let std = g.sqrt(var_eps)?;
    let xhat = g.div(centered, std)?;
    let out = affine(g, xhat, gamma, beta)?;
    let bm = g.value(mean).reshaped(&[c])?;
    let bv = g.value(var).reshaped(&[c])?;
    Ok((out, bm, bv))
}

/// Eval-mode batch norm using frozen running statistics.
pub fn batch_norm_eval(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Var> {
    let c = check_affine(g, x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch("running stats length != channels".into()));
    }
    let denom = running_var.map(|v| (v + eps).sqrt());
    let rm = g.leaf(running_mean, false)?;
    let rs = g.leaf(&denom, false)?;
    let centered = g.sub(x, rm)?;
    let xhat = g.div(centered, rs)?;
    affine(g, xhat, gamma, beta)
}

/// Group norm over (spatial, C/G) slices, independently per sample and group.
/// Handles rank-2 (N,C) and rank-4 (N,H,W,C) activations.
pub fn group_norm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: f64,
) -> Result<Var> {
    let c = check_affine(g, x, gamma, beta)?;
    let shape = g.shape_of(x).to_vec();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Invalid(format!("groups {} must divide channels {}", groups, c)));
    }
    let cg = c / groups;
    let (grouped_shape, axes): (Vec<usize>, Vec<usize>) = match shape.len() {
        2 => (vec![shape[0], groups, cg], vec![2]),
        4 => (vec![shape[0], shape[1], shape[2], groups, cg], vec![1, 2, 4]),
        r => return Err(Error::ShapeMismatch(format!("group norm on rank {}", r))),
    };
    let xg = g.reshape(x, &grouped_shape)?;
    let mean = g.mean_axes(xg, &axes)?;
    let centered = g.sub(xg, mean)?;
    let sq = g.square(centered)?;
    let var = g.mean_axes(sq, &axes)?;
    let var_eps = g.add_scalar(var, eps)?;
    let std = g.sqrt(var_eps)?;
    let xhat = g.div(centered, std)?;
    let back = g.reshape(xhat, &shape)?;
    affine(g, back, gamma, beta)
}

/// Layer norm is group norm with a single group.
pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    group_norm(g, x, gamma, beta, 1, eps)
}

/// Instance norm is group norm with one group per channel.
pub fn instance_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let c = *g.shape_of(x).last().unwrap_or(&0);
    group_norm(g, x, gamma, beta, c, eps)
}

/// Standardize each output row of a weight tensor to zero mean and unit
/// variance (sigma = sqrt(eps + var)). Works for conv weights
/// (Cout,Kh,Kw,Cin) and linear weights (Dout,Din): row = first axis,
/// everything else is the input dimension. Gradients flow to the raw weight.
pub fn weight_standardize(g: &mut Graph, w: Var, eps: f64) -> Result<Var> {
    let shape = g.shape_of(w).to_vec();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch("weight standardization needs rank >= 2".into()));
    }
    let axes: Vec<usize> = (1..shape.len()).collect();
    let mean = g.mean_axes(w, &axes)?;
    let centered = g.sub(w, mean)?;
    let sq = g.square(centered)?;
    let var = g.mean_axes(sq, &axes)?;
    let var_eps = g.add_scalar(var, eps)?;
    let sigma = g.sqrt(var_eps)?;
    g.div(centered, sigma)
}
