//! Central finite-difference verification of analytic gradients.
//!
//! The oracle here is independent of the backward pass: it only ever calls
//! forward evaluations. Coordinates where the left and right one-sided
//! secants disagree (a kink, e.g. relu evaluated at exactly 0) are excluded
//! and reported rather than counted as failures.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Check the analytic gradient of a scalar-valued tensor function at `x`.
///
/// `f` must be deterministic; two forward passes that disagree bitwise are a
/// hard error.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false)?;
        let out = f(&mut g, v)?;
        if g.data_of(out).len() != 1 {
            return Err(Error::NonScalarLoss(g.shape_of(out).to_vec()));
        }
        Ok(g.data_of(out)[0])
    };

    let f0 = eval(x)?;
    if eval(x)?.to_bits() != f0.to_bits() {
        return Err(Error::NonDeterministic);
    }

    // analytic gradient
    let mut g = Graph::new();
    let v = g.leaf(x, true)?;
    let out = f(&mut g, v)?;
    if g.data_of(out).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape_of(out).to_vec()));
    }
    g.backward(out)?;
    let analytic = g.grad(v).expect("leaf requires grad");

    let mut max_rel = 0.0f64;
    let mut excluded = Vec::new();
    let mut checked = 0usize;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let central = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let err = rel_err(a, central);
        if err > tol {
            // distinguish a wrong gradient from a genuine nondifferentiable point
            let left = (f0 - fm) / step;
            let right = (fp - f0) / step;
            if rel_err(left, right) > 1e-2 {
                excluded.push(i);
                continue;
            }
        }
        checked += 1;
        max_rel = max_rel.max(err);
    }

    Ok(GradCheckReport { max_rel_err: max_rel, checked, excluded, tol, passed: max_rel < tol })
}
