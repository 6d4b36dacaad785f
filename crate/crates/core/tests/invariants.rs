//! Property-based invariants over randomly generated shapes and values:
//! broadcasting agrees with explicit tiling, reductions agree with their
//! broadcast adjoints, and per-sample norms never couple batch elements.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sslab_core::graph::Graph;
use sslab_core::norm::{group_norm, instance_norm, layer_norm};
use sslab_core::tensor::Tensor;

fn small_vals(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0..10.0f64, len)
}

/// Tile a (1, ..., C)-style reduced tensor back to `shape` by hand.
fn tile_to(reduced: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let rshape = reduced.shape();
    let n: usize = shape.iter().product();
    let strides: Vec<usize> = {
        let mut s = vec![1; shape.len()];
        for i in (0..shape.len() - 1).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    };
    let rstrides: Vec<usize> = {
        let mut s = vec![1; rshape.len()];
        for i in (0..rshape.len() - 1).rev() {
            s[i] = s[i + 1] * rshape[i + 1];
        }
        s
    };
    for flat in 0..n {
        let mut rflat = 0;
        for d in 0..shape.len() {
            let idx = (flat / strides[d]) % shape[d];
            rflat += (idx % rshape[d]) * rstrides[d];
        }
        out.data_mut()[flat] = reduced.data()[rflat];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// broadcast_to(x, shape) must equal tiling x by hand, and multiplying a
    /// tensor by a broadcast operand must equal multiplying by the tile.
    #[test]
    fn broadcast_matches_explicit_tiling(
        n in 1usize..4, h in 1usize..4, c in 1usize..5,
        seed in 0u64..1000,
    ) {
        let shape = [n, h, c];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&shape, 1.0, &mut rng);
        let per_c = Tensor::randn(&[1, 1, c], 1.0, &mut rng);

        let mut g = Graph::new();
        let xv = g.leaf(&x, false).unwrap();
        let cv = g.leaf(&per_c, false).unwrap();
        let cb = g.broadcast_to(cv, &shape).unwrap();
        let prod = g.mul(xv, cb).unwrap();

        let tiled = tile_to(&per_c, &shape);
        let broadcast = g.value(cb);
        prop_assert_eq!(broadcast.data(), tiled.data());
        let mut expected = x.clone();
        for (a, b) in expected.data_mut().iter_mut().zip(tiled.data()) {
            *a *= b;
        }
        prop_assert!(g.value(prod).max_abs_diff(&expected) == 0.0);
    }

    /// sum over axes followed by broadcast equals the hand-tiled sums; this is
    /// exactly the adjoint pair the backward passes rely on.
    #[test]
    fn reduce_then_broadcast_matches_tiled_sums(
        n in 2usize..5, c in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, c], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(&x, false).unwrap();
        let s = g.sum_axes(xv, &[0]).unwrap(); // (1, c)
        let back = g.broadcast_to(s, &[n, c]).unwrap();

        let mut sums = Tensor::zeros(&[1, c]);
        for i in 0..n {
            for j in 0..c {
                sums.data_mut()[j] += x.data()[i * c + j];
            }
        }
        let tiled = tile_to(&sums, &[n, c]);
        prop_assert!(g.value(back).max_abs_diff(&tiled) < 1e-12);
    }

    /// Replacing every other sample in the batch must not move sample 0's
    /// output under any per-sample normalizer.
    #[test]
    fn per_sample_norms_ignore_the_rest_of_the_batch(
        vals_a in small_vals(3 * 2 * 2 * 4),
        vals_b in small_vals(3 * 2 * 2 * 4),
        which in 0usize..3,
    ) {
        let shape = [3usize, 2, 2, 4];
        let a = Tensor::new(&shape, vals_a.clone()).unwrap();
        // same sample 0, different rest-of-batch
        let mut mixed = vals_b;
        mixed[..2 * 2 * 4].copy_from_slice(&vals_a[..2 * 2 * 4]);
        let b = Tensor::new(&shape, mixed).unwrap();

        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(t, false).unwrap();
            let gamma = g.leaf(&Tensor::ones(&[4]), false).unwrap();
            let beta = g.leaf(&Tensor::zeros(&[4]), false).unwrap();
            let y = match which {
                0 => layer_norm(&mut g, xv, gamma, beta, 1e-5).unwrap(),
                1 => instance_norm(&mut g, xv, gamma, beta, 1e-5).unwrap(),
                _ => group_norm(&mut g, xv, gamma, beta, 2, 1e-5).unwrap(),
            };
            g.value(y)
        };
        let ya = run(&a);
        let yb = run(&b);
        prop_assert_eq!(&ya.data()[..2 * 2 * 4], &yb.data()[..2 * 2 * 4]);
    }
}
