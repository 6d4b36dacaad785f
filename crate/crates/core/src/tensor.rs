//! Plain dense tensors: the value type that flows in and out of [`crate::Graph`].
//!
//! Layout is canonical row-major; activations use the (N, H, W, C) convention.
//! All data is f64. A `Tensor` here is just data + shape; gradient tracking
//! lives on the graph, not on the value.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Like `new`, but rejects NaN/Inf entries.
    pub fn checked(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Gaussian init with the given std, drawn in canonical element order.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller; two uniform draws per sample keeps the stream simple.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            data.push(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// The single broadcasting rule: shapes are right-aligned; each pair of
/// extents must be equal or one of them 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Strides for reading an input of shape `from` at indices of the broadcast
/// output shape `to` (stride 0 along broadcast axes).
pub fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let fs = strides(from);
    let offset = to.len() - from.len();
    let mut out = vec![0usize; to.len()];
    for i in 0..to.len() {
        if i >= offset && from[i - offset] != 1 {
            out[i] = fs[i - offset];
        }
    }
    out
}

/// Iterate linear offsets of a (possibly broadcast) operand aligned with the
/// row-major traversal of `out_shape`.
pub struct BroadcastIter<'a> {
    out_shape: &'a [usize],
    strides: Vec<usize>,
    idx: Vec<usize>,
    offset: usize,
    remaining: usize,
}

impl<'a> BroadcastIter<'a> {
    pub fn new(from: &[usize], out_shape: &'a [usize]) -> Self {
        BroadcastIter {
            out_shape,
            strides: broadcast_strides(from, out_shape),
            idx: vec![0; out_shape.len()],
            offset: 0,
            remaining: out_shape.iter().product(),
        }
    }
}

impl Iterator for BroadcastIter<'_> {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let cur = self.offset;
        self.remaining -= 1;
        // advance mixed-radix counter from the last axis
        for ax in (0..self.out_shape.len()).rev() {
            self.idx[ax] += 1;
            self.offset += self.strides[ax];
            if self.idx[ax] < self.out_shape[ax] {
                break;
            }
            self.offset -= self.strides[ax] * self.out_shape[ax];
            self.idx[ax] = 0;
        }
        Some(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_invariant() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn checked_rejects_nonfinite() {
        assert!(Tensor::checked(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::checked(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn broadcast_rule() {
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 3]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shapes(&[5], &[2, 5]).unwrap(), vec![2, 5]);
        assert!(broadcast_shapes(&[2], &[3]).is_err());
    }

    #[test]
    fn broadcast_iter_matches_tiling() {
        // [2,1] against [2,3]: rows repeat along the last axis
        let offs: Vec<usize> = BroadcastIter::new(&[2, 1], &[2, 3]).collect();
        assert_eq!(offs, vec![0, 0, 0, 1, 1, 1]);
        // [3] against [2,3]
        let offs: Vec<usize> = BroadcastIter::new(&[3], &[2, 3]).collect();
        assert_eq!(offs, vec![0, 1, 2, 0, 1, 2]);
    }
}
