//! Training losses: the BYOL prediction loss and InfoNCE, plus the cosine
//! primitives they share.
//!
//! InfoNCE negative-set membership: for anchor z_i the negatives are all
//! projections of the other view {z'_1..z'_B} (the positive z'_i included)
//! plus the same-view projections {z_1..z_B} minus z_i itself. This exact
//! membership is pinned by a brute-force oracle in the tests.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;
const MASK: f64 = -1e9;

/// L2-normalize each row of a (B, D) tensor, flooring norms at 1e-12.
pub fn row_normalize(g: &mut Graph, a: Var) -> Result<Var> {
    if g.shape_of(a).len() != 2 {
        return Err(Error::ShapeMismatch("row_normalize expects (B, D)".into()));
    }
    let sq = g.square(a)?;
    let ss = g.sum_axes(sq, &[1])?;
    let n = g.sqrt(ss)?;
    if g.data_of(n).iter().any(|&v| v < NORM_FLOOR) {
        eprintln!("warn: zero-norm vector in cosine; flooring at {}", NORM_FLOOR);
    }
    let nf = g.max_scalar(n, NORM_FLOOR)?;
    g.div(a, nf)
}

/// Per-sample cosine similarity of two (B, D) batches; output (B,).
pub fn cosine_similarity(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let sa = g.shape_of(a).to_vec();
    if sa != g.shape_of(b) {
        return Err(Error::ShapeMismatch("cosine on mismatched batches".into()));
    }
    let ah = row_normalize(g, a)?;
    let bh = row_normalize(g, b)?;
    let prod = g.mul(ah, bh)?;
    let s = g.sum_axes(prod, &[1])?;
    g.reshape(s, &[sa[0]])
}

#[derive(Debug, Clone, Copy)]
pub struct ByolLoss {
    pub loss: Var,
    /// Mean cosine alignment between predictions and targets.
    pub alignment: f64,
}

/// Mean negative cosine between predictions and detached targets. The target
/// enters as a plain tensor, so no gradient can reach it by construction;
/// symmetrization over the two view orderings happens in the trainer.
pub fn byol_loss(g: &mut Graph, q_out: Var, target_z: &Tensor) -> Result<ByolLoss> {
    let t = g.leaf(target_z, false)?;
    let cos = cosine_similarity(g, q_out, t)?;
    let mean = g.mean_all(cos)?;
    let loss = g.scale(mean, -1.0)?;
    let alignment = g.data_of(mean)[0];
    Ok(ByolLoss { loss, alignment })
}

#[derive(Debug, Clone, Copy)]
pub struct InfoNceLoss {
    pub loss: Var,
    /// Mean positive (alignment) term; total = positive + negative exactly.
    pub positive: f64,
    /// Mean log-sum-exp (repulsion) term.
    pub negative: f64,
}

/// Extract the main diagonal of a square matrix as a (B,) vector.
fn diag(g: &mut Graph, m: Var) -> Result<Var> {
    let b = g.shape_of(m)[0];
    let mut eye = Tensor::zeros(&[b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = 1.0;
    }
    let e = g.leaf(&eye, false)?;
    let masked = g.mul(m, e)?;
    let s = g.sum_axes(masked, &[1])?;
    g.reshape(s, &[b])
}

/// One direction of InfoNCE: anchors `a_hat`, positives `p_hat` (both row
/// normalized), same-view similarities with the diagonal masked out.
fn infonce_direction(g: &mut Graph, a_hat: Var, p_hat: Var, tau: f64) -> Result<(Var, Var)> {
    let b = g.shape_of(a_hat)[0];
    let pt = g.transpose2d(p_hat)?;
    let cross = g.matmul(a_hat, pt)?; // cos(a_i, p_j)
    let at = g.transpose2d(a_hat)?;
    let selfsim = g.matmul(a_hat, at)?; // cos(a_i, a_j)
    let mut maskt = Tensor::zeros(&[b, b]);
    for i in 0..b {
        maskt.data_mut()[i * b + i] = MASK;
    }
    let mask = g.leaf(&maskt, false)?;
    let self_masked = g.add(selfsim, mask)?;
    let cross_s = g.scale(cross, 1.0 / tau)?;
    let self_s = g.scale(self_masked, 1.0 / tau)?;
    let logits = g.concat(&[cross_s, self_s], 1)?; // (B, 2B)
    let lse = g.logsumexp(logits)?; // (B,)
    let neg = g.mean_all(lse)?;
    let d = diag(g, cross_s)?;
    let pos = g.mean_all(d)?; // mean cos(a_i, p_i)/tau, positive sign
    Ok((pos, neg))
}

/// Symmetrized InfoNCE over two batches of projections.
pub fn infonce_loss(g: &mut Graph, z: Var, z_prime: Var, tau: f64) -> Result<InfoNceLoss> {
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {}", tau)));
    }
    let sz = g.shape_of(z).to_vec();
    if sz.len() != 2 || sz != g.shape_of(z_prime) {
        return Err(Error::ShapeMismatch("infonce expects matching (B, D) batches".into()));
    }
    let zh = row_normalize(g, z)?;
    let zph = row_normalize(g, z_prime)?;
    let (pos1, neg1) = infonce_direction(g, zh, zph, tau)?;
    let (pos2, neg2) = infonce_direction(g, zph, zh, tau)?;
    let negsum = g.add(neg1, neg2)?;
    let neg = g.scale(negsum, 0.5)?;
    let possum = g.add(pos1, pos2)?;
    let pos = g.scale(possum, -0.5)?;
    let loss = g.add(neg, pos)?;
    Ok(InfoNceLoss { loss, positive: g.data_of(pos)[0], negative: g.data_of(neg)[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(&Tensor::new(shape, data.to_vec()).unwrap(), false).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[3, 2], &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let b = leaf(&mut g, &[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let c = cosine_similarity(&mut g, a, b).unwrap();
        let d = g.data_of(c);
        assert!((d[0] - 1.0).abs() < 1e-12); // identical unit vectors
        assert!(d[1].abs() < 1e-12); // orthogonal
        assert!((d[2] - 1.0).abs() < 1e-12); // positive scale invariance
    }

    #[test]
    fn byol_perfect_prediction() {
        let mut g = Graph::new();
        let q = leaf(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let t = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = byol_loss(&mut g, q, &t).unwrap();
        assert!((g.data_of(l.loss)[0] + 1.0).abs() < 1e-12);
        assert!((l.alignment - 1.0).abs() < 1e-12);
    }

    #[test]
    fn byol_orthogonal_pairs() {
        let mut g = Graph::new();
        let q = leaf(&mut g, &[1, 2], &[1.0, 0.0]);
        let t = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let l = byol_loss(&mut g, q, &t).unwrap();
        assert!(g.data_of(l.loss)[0].abs() < 1e-12);
    }

    #[test]
    fn byol_scale_invariance() {
        let q_data = [0.3, -1.0, 0.9, 2.0];
        let t_data = [1.1, 0.4, -0.2, 0.8];
        let eval = |alpha: f64, beta: f64| {
            let mut g = Graph::new();
            let q = leaf(&mut g, &[2, 2], &q_data.map(|v| v * alpha));
            let t = Tensor::new(&[2, 2], t_data.iter().map(|v| v * beta).collect()).unwrap();
            let l = byol_loss(&mut g, q, &t).unwrap();
            g.data_of(l.loss)[0]
        };
        assert!((eval(1.0, 1.0) - eval(3.0, 0.25)).abs() < 1e-10);
    }

    #[test]
    fn byol_no_gradient_to_target() {
        // bind the target as a requires-grad leaf upstream; detachment through
        // the tensor boundary must leave its grad zero
        let mut g = Graph::new();
        let xi = g
            .leaf(&Tensor::new(&[2, 2], vec![0.5, -0.3, 0.8, 0.1]).unwrap(), true)
            .unwrap();
        let target = g.value(xi); // detached copy
        let q = g
            .leaf(&Tensor::new(&[2, 2], vec![1.0, 0.2, -0.4, 0.9]).unwrap(), true)
            .unwrap();
        let l = byol_loss(&mut g, q, &target).unwrap();
        g.backward(l.loss).unwrap();
        let grad = g.grad(xi).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infonce_single_pair_hand_value() {
        // B=1, z = z' = [1,0], tau = 1: loss = -1 + ln(e^1) = 0
        let mut g = Graph::new();
        let z = leaf(&mut g, &[1, 2], &[1.0, 0.0]);
        let zp = leaf(&mut g, &[1, 2], &[1.0, 0.0]);
        let l = infonce_loss(&mut g, z, zp, 1.0).unwrap();
        assert!(g.data_of(l.loss)[0].abs() < 1e-9, "{}", g.data_of(l.loss)[0]);
    }

    #[test]
    fn infonce_rejects_nonpositive_tau() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[1, 2], &[1.0, 0.0]);
        let zp = leaf(&mut g, &[1, 2], &[1.0, 0.0]);
        assert!(infonce_loss(&mut g, z, zp, 0.0).is_err());
    }

    #[test]
    fn infonce_global_rescale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zd: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zpd: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |s: f64| {
            let mut g = Graph::new();
            let z = g
                .leaf(&Tensor::new(&[4, 2], zd.iter().map(|v| v * s).collect()).unwrap(), false)
                .unwrap();
            let zp = g
                .leaf(&Tensor::new(&[4, 2], zpd.iter().map(|v| v * s).collect()).unwrap(), false)
                .unwrap();
            let l = infonce_loss(&mut g, z, zp, 0.3).unwrap();
            g.data_of(l.loss)[0]
        };
        assert!((eval(1.0) - eval(17.0)).abs() < 1e-9);
    }

    /// Brute-force oracle: enumerate the negative set explicitly with plain
    /// scalar math, independent of the graph implementation.
    fn infonce_reference(z: &[Vec<f64>], zp: &[Vec<f64>], tau: f64) -> f64 {
        fn cos(a: &[f64], b: &[f64]) -> f64 {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        }
        let b = z.len();
        let direction = |anchors: &[Vec<f64>], others: &[Vec<f64>]| -> f64 {
            let mut total = 0.0;
            for i in 0..b {
                // negatives: all of the other view, plus same view minus self
                let mut terms: Vec<f64> = Vec::new();
                for o in others.iter() {
                    terms.push(cos(&anchors[i], o) / tau);
                }
                for (j, a) in anchors.iter().enumerate() {
                    if j != i {
                        terms.push(cos(&anchors[i], a) / tau);
                    }
                }
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
                total += -cos(&anchors[i], &others[i]) / tau + lse;
            }
            total / b as f64
        };
        0.5 * (direction(z, zp) + direction(zp, z))
    }

    #[test]
    fn infonce_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &b in &[1usize, 2, 3, 4] {
            for trial in 0..5 {
                let d = 3 + trial % 3;
                let z: Vec<Vec<f64>> =
                    (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let zp: Vec<Vec<f64>> =
                    (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let expected = infonce_reference(&z, &zp, 0.2);
                let mut g = Graph::new();
                let zv = g
                    .leaf(&Tensor::new(&[b, d], z.concat()).unwrap(), false)
                    .unwrap();
                let zpv = g
                    .leaf(&Tensor::new(&[b, d], zp.concat()).unwrap(), false)
                    .unwrap();
                let l = infonce_loss(&mut g, zv, zpv, 0.2).unwrap();
                let got = g.data_of(l.loss)[0];
                assert!((got - expected).abs() < 1e-8, "B={} got {} expected {}", b, got, expected);
                // diagnostics reassemble exactly
                assert!((l.positive + l.negative - got).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn infonce_decreases_as_positive_aligns() {
        let zp_from = |angle: f64| vec![vec![angle.cos(), angle.sin()], vec![0.0, 1.0]];
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let eval = |angle: f64| {
            let mut g = Graph::new();
            let zv = g.leaf(&Tensor::new(&[2, 2], z.concat()).unwrap(), false).unwrap();
            let zpv = g
                .leaf(&Tensor::new(&[2, 2], zp_from(angle).concat()).unwrap(), false)
                .unwrap();
            let l = infonce_loss(&mut g, zv, zpv, 0.5).unwrap();
            g.data_of(l.loss)[0]
        };
        assert!(eval(0.1) < eval(0.8), "rotating the positive toward the anchor must lower the loss");
    }
}
