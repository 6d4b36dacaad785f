//! Hot-path kernel benchmarks: convolution forward/backward, group norm,
//! and the contrastive loss. Shapes match the training configuration
//! (batch 64-ish activations, 3x3 kernels, NHWC).

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sslab_bench::fixture;
use sslab_core::graph::Graph;
use sslab_core::norm::group_norm;
use sslab_core::objectives::infonce_loss;
use sslab_core::tensor::Tensor;

fn bench_conv2d(c: &mut Criterion) {
    let x = fixture(&[8, 16, 16, 16], 1);
    let w = fixture(&[3, 3, 16, 32], 2);

    c.bench_function("conv2d_forward_8x16x16x16_k3", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(black_box(&x), false).unwrap();
            let wv = g.leaf(black_box(&w), false).unwrap();
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            black_box(g.value(y))
        })
    });

    c.bench_function("conv2d_backward_8x16x16x16_k3", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(black_box(&x), true).unwrap();
            let wv = g.leaf(black_box(&w), true).unwrap();
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let loss = g.sum_all(y).unwrap();
            g.backward(loss).unwrap();
            black_box((g.grad(xv), g.grad(wv)))
        })
    });
}

fn bench_group_norm(c: &mut Criterion) {
    let x = fixture(&[8, 16, 16, 32], 3);
    let gamma = Tensor::ones(&[32]);
    let beta = Tensor::zeros(&[32]);

    c.bench_function("group_norm_8x16x16x32_g16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(black_box(&x), false).unwrap();
            let gv = g.leaf(&gamma, false).unwrap();
            let bv = g.leaf(&beta, false).unwrap();
            let y = group_norm(&mut g, xv, gv, bv, 16, 1e-5).unwrap();
            black_box(g.value(y))
        })
    });
}

fn bench_infonce(c: &mut Criterion) {
    let z = fixture(&[64, 64], 4);
    let zp = fixture(&[64, 64], 5);

    c.bench_function("infonce_fwd_bwd_b64_d64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let zv = g.leaf(black_box(&z), true).unwrap();
            let zpv = g.leaf(black_box(&zp), true).unwrap();
            let out = infonce_loss(&mut g, zv, zpv, 0.1).unwrap();
            g.backward(out.loss).unwrap();
            black_box((g.grad(zv), g.grad(zpv)))
        })
    });
}

criterion_group!(benches, bench_conv2d, bench_group_norm, bench_infonce);
criterion_main!(benches);
