//! Datasets: a deterministic procedural shapes/colors dataset (the hermetic
//! default) and a loader for the CIFAR-style binary format so a real
//! small-image dataset can be substituted.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

pub const NUM_SHAPE_CLASSES: usize = 10;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Images as (H, W, C) tensors with values in [0, 1].
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack a set of images into an (N, H, W, C) batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let shape = self.images[indices[0]].shape();
        let mut out = Vec::with_capacity(indices.len() * self.images[indices[0]].numel());
        for &i in indices {
            out.extend_from_slice(self.images[i].data());
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(shape);
        Tensor::new(&full, out)
    }
}

/// Procedurally generated shapes on colored backgrounds; label = shape class.
/// Deterministic for a given (n, seed, size).
pub fn synthetic_shapes(n: usize, seed: u64, size: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_SHAPE_CLASSES; // balanced classes
        let bg: [f64; 3] = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
        let fg: [f64; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
        let s = size as f64;
        let cx = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
        let cy = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
        let r = rng.gen_range(s / 5.0..s / 3.2);
        let mut data = vec![0.0; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let inside = shape_predicate(class, dx, dy, r);
                let px = if inside { &fg } else { &bg };
                let off = (y * size + x) * 3;
                data[off..off + 3].copy_from_slice(px);
            }
        }
        images.push(Tensor::new(&[size, size, 3], data).expect("image shape"));
        labels.push(class);
    }
    Dataset { images, labels, classes: NUM_SHAPE_CLASSES }
}

fn shape_predicate(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let ax = dx.abs();
    let ay = dy.abs();
    let d2 = dx * dx + dy * dy;
    match class {
        0 => d2 < r * r,                                       // filled circle
        1 => ax.max(ay) < r && ax.max(ay) > r * 0.6,           // square outline
        2 => ax.max(ay) < r * 0.85,                            // filled square
        3 => dy < r * 0.6 && dy > -r && ax < (dy + r) * 0.6,   // triangle
        4 => (ax < r * 0.28 && ay < r) || (ay < r * 0.28 && ax < r), // plus
        5 => (ax - ay).abs() < r * 0.35 && ax.max(ay) < r,     // X
        6 => ay < r && (dy / (r * 0.34)).rem_euclid(2.0) < 1.0 && ax < r, // h-stripes
        7 => ax < r && (dx / (r * 0.34)).rem_euclid(2.0) < 1.0 && ay < r, // v-stripes
        8 => d2 < r * r && d2 > (r * 0.55) * (r * 0.55),       // ring
        9 => ax + ay < r,                                      // diamond
        _ => unreachable!(),
    }
}

/// CIFAR-10 style binary: records of 1 label byte + C*H*W pixel bytes in
/// planar (C, H, W) order; converted to (H, W, C) floats in [0, 1].
pub fn load_cifar_bin(path: &Path, size: usize, channels: usize, classes: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let record = 1 + channels * size * size;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Invalid(format!(
            "{}: length {} is not a multiple of record size {}",
            path.display(),
            bytes.len(),
            record
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(record) {
        let label = rec[0] as usize;
        if label >= classes {
            return Err(Error::Invalid(format!("label {} out of range", label)));
        }
        let mut data = vec![0.0; size * size * channels];
        for c in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let v = rec[1 + c * size * size + y * size + x] as f64 / 255.0;
                    data[(y * size + x) * channels + c] = v;
                }
            }
        }
        images.push(Tensor::new(&[size, size, channels], data)?);
        labels.push(label);
    }
    Ok(Dataset { images, labels, classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_shapes(40, 7, 32);
        let b = synthetic_shapes(40, 7, 32);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        let mut counts = [0usize; NUM_SHAPE_CLASSES];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn images_are_in_unit_range() {
        let d = synthetic_shapes(20, 3, 32);
        for img in &d.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cifar_bin_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // two 2x2x3 records
        let mut bytes = Vec::new();
        for label in [3u8, 7u8] {
            bytes.push(label);
            bytes.extend((0..12).map(|i| (i * 20 + label) as u8));
        }
        std::fs::write(&path, &bytes).unwrap();
        let d = load_cifar_bin(&path, 2, 3, 10).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 7]);
        // planar -> interleaved: pixel (0,0) channel 1 of record 0 is byte 1+4
        let expect = (4 * 20 + 3) as f64 / 255.0;
        assert!((d.images[0].data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn cifar_bin_rejects_bad_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [0u8; 10]).unwrap();
        assert!(load_cifar_bin(&path, 2, 3, 10).is_err());
    }
}
