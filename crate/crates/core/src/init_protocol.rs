//! Batch-statistics capture and affine re-initialization.
//!
//! The transform removes every batch-normalization site from a freshly built
//! network while preserving its behaviour on one reference batch:
//!
//! 1. set each BN scale to its target value g0 (0 at the final site of a
//!    residual block, 1 elsewhere);
//! 2. run a single train-mode forward and record, per site, the batch mean mu
//!    and sigma = max(sqrt(var + eps), floor) of the site input;
//! 3. replace each BN site with a plain per-channel affine whose parameters
//!    reproduce the normalization of that batch:
//!    gamma = g0 / sigma, beta = -mu * gamma.
//!
//! On the capture batch itself the rewritten network matches the original
//! (up to the sigma floor), and it no longer depends on batch composition.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Assembly, FwdEffects, Mode};
use crate::norm::NormKind;
use crate::tensor::Tensor;

pub const DEFAULT_STAT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SiteStats {
    pub name: String,
    /// Per-channel batch mean of the site input.
    pub mean: Tensor,
    /// Per-channel floored standard deviation, sqrt(var + eps) at least floor.
    pub sigma: Tensor,
    /// Target scale for the site: 0 if final in its residual block, else 1.
    pub gamma0: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CapturedStats {
    pub sites: Vec<SiteStats>,
    /// How many channels hit the sigma floor (constant channels).
    pub floor_hits: usize,
}

/// Target scale for each BN site under the protocol.
pub fn target_gamma(final_in_block: bool) -> f64 {
    if final_in_block {
        0.0
    } else {
        1.0
    }
}

/// Overwrite the scale of every BN site with its target value (step 1).
pub fn set_capture_gammas(asm: &mut Assembly) -> Result<()> {
    let targets: Vec<(String, f64)> = asm
        .sites
        .iter()
        .filter(|s| s.kind == NormKind::Batch)
        .map(|s| (s.name.clone(), target_gamma(s.final_in_block)))
        .collect();
    for (name, g0) in targets {
        let gamma = asm.params.get_mut(&format!("{}.gamma", name))?;
        for v in gamma.tensor.data_mut() {
            *v = g0;
        }
        let beta = asm.params.get_mut(&format!("{}.beta", name))?;
        for v in beta.tensor.data_mut() {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Steps 1–2: set target scales, run one train-mode forward on `batch`, and
/// record per-site input statistics. The assembly keeps its BN sites; only
/// the scale/shift parameters are overwritten.
pub fn capture_stats(asm: &mut Assembly, batch: &Tensor, floor: f64) -> Result<CapturedStats> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[0] < 2 {
        return Err(Error::Invalid(
            "statistics capture needs an (N, H, W, C) batch with N >= 2".into(),
        ));
    }
    if floor <= 0.0 {
        return Err(Error::Invalid("sigma floor must be positive".into()));
    }
    set_capture_gammas(asm)?;
    let mut g = Graph::new();
    let bound = asm.bind(&mut g, false)?;
    let x = g.leaf(batch, false)?;
    let mut fx = FwdEffects::default();
    let y = asm.forward_encoder(&mut g, &bound, x, Mode::Train, &mut fx)?;
    let z = asm.forward_projector(&mut g, &bound, y, Mode::Train, &mut fx)?;
    if asm.has_predictor {
        asm.forward_predictor(&mut g, &bound, z, Mode::Train, &mut fx)?;
    }

    let mut by_name = std::collections::HashMap::new();
    for (name, bm, bv) in &fx.stat_updates {
        by_name.insert(name.clone(), (bm.clone(), bv.clone()));
    }
    let mut out = CapturedStats::default();
    for site in asm.sites.iter().filter(|s| s.kind == NormKind::Batch) {
        let (bm, bv) = by_name
            .remove(&site.name)
            .ok_or_else(|| Error::Invalid(format!("no batch stats recorded for {}", site.name)))?;
        let sigma_vals: Vec<f64> = bv
            .data()
            .iter()
            .map(|v| {
                let s = (v + asm.norm_eps).sqrt();
                if s < floor {
                    out.floor_hits += 1;
                    floor
                } else {
                    s
                }
            })
            .collect();
        out.sites.push(SiteStats {
            name: site.name.clone(),
            mean: bm,
            sigma: Tensor::new(&[site.channels], sigma_vals)?,
            gamma0: target_gamma(site.final_in_block),
        });
    }
    Ok(out)
}

/// Step 3: rewrite every captured BN site into an affine-only site with
/// gamma = g0 / sigma, beta = -mu * gamma. Scale and shift stay trainable.
pub fn reinit_affine(asm: &mut Assembly, stats: &CapturedStats) -> Result<()> {
    for s in &stats.sites {
        {
            let site = asm.site_mut(&s.name)?;
            if site.kind != NormKind::Batch {
                return Err(Error::Invalid(format!("{} is not a batch-norm site", s.name)));
            }
            site.kind = NormKind::None;
        }
        let gamma = asm.params.get_mut(&format!("{}.gamma", s.name))?;
        let gvals: Vec<f64> =
            s.sigma.data().iter().map(|sig| s.gamma0 / sig).collect();
        gamma.tensor = Tensor::new(&[s.mean.data().len()], gvals.clone())?;
        let beta = asm.params.get_mut(&format!("{}.beta", s.name))?;
        let bvals: Vec<f64> =
            s.mean.data().iter().zip(&gvals).map(|(m, gv)| -m * gv).collect();
        beta.tensor = Tensor::new(&[s.mean.data().len()], bvals)?;
    }
    Ok(())
}

/// The full protocol on one reference batch.
pub fn capture_and_reinit(asm: &mut Assembly, batch: &Tensor, floor: f64) -> Result<CapturedStats> {
    let stats = capture_stats(asm, batch, floor)?;
    reinit_affine(asm, &stats)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, ComponentNorms, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_bn_assembly(seed: u64) -> Assembly {
        let arch = ArchConfig {
            in_channels: 3,
            image_size: 8,
            stem_channels: 4,
            stem_stride: 1,
            stage_channels: vec![4, 8],
            stage_strides: vec![1, 2],
            blocks_per_stage: 1,
            proj_hidden: 8,
            d_proj: 4,
        };
        let norms = ComponentNorms {
            encoder: NormKind::Batch,
            projector: NormKind::Batch,
            predictor: NormKind::Batch,
        };
        Assembly::build(arch, norms, false, true, 2, 1e-5, 0.9, 1e-4, seed).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[n, 8, 8, 3], 1.0, &mut rng);
        for v in t.data_mut() {
            *v = (*v).clamp(-3.0, 3.0) * 0.15 + 0.5;
        }
        t
    }

    #[test]
    fn captured_stats_match_direct_recomputation() {
        let mut asm = small_bn_assembly(11);
        let x = batch(4, 2);
        let stats = capture_stats(&mut asm, &x, 1e-3).unwrap();

        // independent recomputation from the recorded site inputs
        let mut g = Graph::new();
        let bound = asm.bind(&mut g, false).unwrap();
        let xv = g.leaf(&x, false).unwrap();
        let mut fx = FwdEffects::recording();
        let y = asm.forward_encoder(&mut g, &bound, xv, Mode::Train, &mut fx).unwrap();
        let z = asm.forward_projector(&mut g, &bound, y, Mode::Train, &mut fx).unwrap();
        asm.forward_predictor(&mut g, &bound, z, Mode::Train, &mut fx).unwrap();
        let inputs: std::collections::HashMap<_, _> =
            fx.site_inputs.unwrap().into_iter().collect();

        for s in &stats.sites {
            let inp = &inputs[&s.name];
            let c = *inp.shape().last().unwrap();
            let rows = inp.data().len() / c;
            for ch in 0..c {
                let vals: Vec<f64> =
                    (0..rows).map(|r| inp.data()[r * c + ch]).collect();
                let mu = vals.iter().sum::<f64>() / rows as f64;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows as f64;
                let sigma = ((var + asm.norm_eps).sqrt()).max(1e-3);
                assert!((s.mean.data()[ch] - mu).abs() < 1e-10, "{} mean", s.name);
                assert!((s.sigma.data()[ch] - sigma).abs() < 1e-10, "{} sigma", s.name);
            }
        }
    }

    #[test]
    fn rewritten_network_matches_original_on_capture_batch() {
        let x = batch(4, 5);
        // reference: BN network with target scales, train-mode forward
        let mut reference = small_bn_assembly(11);
        set_capture_gammas(&mut reference).unwrap();
        let mut g = Graph::new();
        let b = reference.bind(&mut g, false).unwrap();
        let xv = g.leaf(&x, false).unwrap();
        let mut fx_ref = FwdEffects::recording();
        let ry = reference.forward_encoder(&mut g, &b, xv, Mode::Train, &mut fx_ref).unwrap();
        let rz = reference.forward_projector(&mut g, &b, ry, Mode::Train, &mut fx_ref).unwrap();
        let rq = reference.forward_predictor(&mut g, &b, rz, Mode::Train, &mut fx_ref).unwrap();
        let (ry, rq) = (g.value(ry), g.value(rq));
        let ref_outputs: std::collections::HashMap<_, _> =
            fx_ref.site_outputs.unwrap().into_iter().collect();

        let mut rewritten = small_bn_assembly(11);
        capture_and_reinit(&mut rewritten, &x, 1e-3).unwrap();
        let mut g2 = Graph::new();
        let b2 = rewritten.bind(&mut g2, false).unwrap();
        let xv2 = g2.leaf(&x, false).unwrap();
        let mut fx_new = FwdEffects::recording();
        let ny = rewritten.forward_encoder(&mut g2, &b2, xv2, Mode::Train, &mut fx_new).unwrap();
        let nz = rewritten.forward_projector(&mut g2, &b2, ny, Mode::Train, &mut fx_new).unwrap();
        let nq = rewritten.forward_predictor(&mut g2, &b2, nz, Mode::Train, &mut fx_new).unwrap();
        let (ny, nq) = (g2.value(ny), g2.value(nq));
        let new_outputs: std::collections::HashMap<_, _> =
            fx_new.site_outputs.unwrap().into_iter().collect();

        // first rewritten site agrees tightly; downstream drift stays small
        let first = rewritten.sites[0].name.clone();
        let d_first = ref_outputs[&first].max_abs_diff(&new_outputs[&first]);
        assert!(d_first < 1e-10, "first-site mismatch {}", d_first);
        let dy = ry.max_abs_diff(&ny);
        let dq = rq.max_abs_diff(&nq);
        assert!(dy < 1e-4, "encoder output mismatch {}", dy);
        assert!(dq < 1e-4, "head output mismatch {}", dq);
    }

    #[test]
    fn rewritten_network_accepts_a_single_sample() {
        let mut asm = small_bn_assembly(3);
        capture_and_reinit(&mut asm, &batch(4, 9), 1e-3).unwrap();
        let one = batch(1, 13);
        let mut g = Graph::new();
        let b = asm.bind(&mut g, false).unwrap();
        let xv = g.leaf(&one, false).unwrap();
        let mut fx = FwdEffects::default();
        let y = asm.forward_encoder(&mut g, &b, xv, Mode::Train, &mut fx).unwrap();
        assert_eq!(g.shape_of(y), &[1, 8]);
    }

    #[test]
    fn every_bn_site_becomes_a_trainable_affine() {
        let mut asm = small_bn_assembly(3);
        let n_bn = asm.sites.iter().filter(|s| s.kind == NormKind::Batch).count();
        assert!(n_bn > 0);
        let stats = capture_and_reinit(&mut asm, &batch(4, 9), 1e-3).unwrap();
        assert_eq!(stats.sites.len(), n_bn);
        assert!(asm.sites.iter().all(|s| s.kind == NormKind::None));
        for s in &stats.sites {
            let gamma = asm.params.get(&format!("{}.gamma", s.name)).unwrap();
            let beta = asm.params.get(&format!("{}.beta", s.name)).unwrap();
            assert!(gamma.trainable && beta.trainable);
            if s.gamma0 == 0.0 {
                assert!(gamma.tensor.data().iter().all(|v| *v == 0.0));
            }
        }
        assert!(!asm.uses_batch_statistics());
    }

    #[test]
    fn constant_channels_hit_the_sigma_floor() {
        let mut asm = small_bn_assembly(3);
        let x = Tensor::full(&[2, 8, 8, 3], 0.5);
        // a constant batch gives var 0, i.e. sigma = sqrt(eps) ~ 3.2e-3;
        // a floor above that must clamp every constant channel exactly
        let floor = 0.01;
        let stats = capture_stats(&mut asm, &x, floor).unwrap();
        assert!(stats.floor_hits > 0);
        // floored channels sit exactly at the floor; nothing falls below it
        let min_sigma = stats
            .sites
            .iter()
            .flat_map(|s| s.sigma.data().iter().copied())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min_sigma, floor);
    }

    #[test]
    fn capture_rejects_single_sample_batches() {
        let mut asm = small_bn_assembly(3);
        assert!(capture_stats(&mut asm, &batch(1, 0), 1e-3).is_err());
    }
}
