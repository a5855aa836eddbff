//! The four generator training losses (least-squares adversarial, cycle,
//! perceptual, makeup) and their weighted combination with the distillation
//! feature loss.
//!
//! The makeup loss regresses each generated face region toward its
//! histogram-matched target: per region and channel, a 256-bin quantile
//! mapping remaps the generated intensity distribution onto the reference's,
//! and the matched image is treated as a constant (no gradient flows through
//! the matching).

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::FeatureExtractor;
use crate::ops;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Weights α (adversarial), β (cycle), γ (perceptual), σ (makeup) of the
/// total objective. Defaults are the published BeautyGAN settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub sigma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 10.0, gamma: 0.005, sigma: 1.0 }
    }
}

/// Raw loss components plus their weighted total:
/// `total = feat + α·adv + β·cyc + γ·per + σ·makeup`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub adv: f32,
    pub cyc: f32,
    pub per: f32,
    pub makeup: f32,
    pub feat: f32,
    pub total: f32,
}

/// Fill a [`LossBreakdown`] from raw components (feat carries weight 1).
pub fn total_loss(adv: f32, cyc: f32, per: f32, makeup: f32, feat: f32, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        adv,
        cyc,
        per,
        makeup,
        feat,
        total: feat + w.alpha * adv + w.beta * cyc + w.gamma * per + w.sigma * makeup,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty region mask: {0}")]
    EmptyRegion(String),
    #[error("shape mismatch between generated and reference")]
    ShapeMismatch,
}

// ---------------------------------------------------------------------------
// Adversarial (least-squares GAN)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanSide {
    Generator,
    Discriminator,
}

/// LSGAN objective over one or more discriminators' patch outputs.
///
/// Discriminator side: mean over discriminators of
/// `mean((D(real)−1)²) + mean(D(fake)²)`. Generator side: mean over
/// discriminators of `mean((D(fake)−1)²)`; `real` is ignored.
pub fn adversarial_loss(real: &[&Tensor], fake: &[&Tensor], side: GanSide) -> Result<f32, LossError> {
    if fake.is_empty() || fake.iter().any(|t| t.is_empty()) {
        return Err(LossError::EmptyBatch);
    }
    match side {
        GanSide::Generator => {
            let sum: f32 = fake.iter().map(|f| ops::mean_sq_scalar(f, 1.0)).sum();
            Ok(sum / fake.len() as f32)
        }
        GanSide::Discriminator => {
            if real.len() != fake.len() || real.iter().any(|t| t.is_empty()) {
                return Err(LossError::EmptyBatch);
            }
            let sum: f32 = real
                .iter()
                .zip(fake)
                .map(|(r, f)| ops::mean_sq_scalar(r, 1.0) + ops::mean_sq_scalar(f, 0.0))
                .sum();
            Ok(sum / fake.len() as f32)
        }
    }
}

pub fn adversarial_generator_tape(tape: &mut Tape, d_fake_outs: &[VarId]) -> VarId {
    let terms: Vec<VarId> = d_fake_outs.iter().map(|&v| tape.mean_sq_scalar(v, 1.0)).collect();
    let sum = tape.sum_all(&terms);
    tape.scale(sum, 1.0 / d_fake_outs.len() as f32)
}

pub fn adversarial_discriminator_tape(tape: &mut Tape, real: &[VarId], fake: &[VarId]) -> VarId {
    let mut terms = Vec::new();
    for (&r, &f) in real.iter().zip(fake) {
        terms.push(tape.mean_sq_scalar(r, 1.0));
        terms.push(tape.mean_sq_scalar(f, 0.0));
    }
    let sum = tape.sum_all(&terms);
    tape.scale(sum, 1.0 / real.len() as f32)
}

// ---------------------------------------------------------------------------
// Cycle consistency
// ---------------------------------------------------------------------------

/// Mean absolute error summed over both reconstruction directions.
pub fn cycle_loss(rec_src: &Tensor, src: &Tensor, rec_ref: &Tensor, reference: &Tensor) -> f32 {
    ops::mae(rec_src, src) + ops::mae(rec_ref, reference)
}

pub fn cycle_loss_tape(
    tape: &mut Tape,
    rec_src: VarId,
    src: &Tensor,
    rec_ref: VarId,
    reference: &Tensor,
) -> VarId {
    let a = tape.mae_const(rec_src, src.clone());
    let b = tape.mae_const(rec_ref, reference.clone());
    tape.sum_all(&[a, b])
}

// ---------------------------------------------------------------------------
// Perceptual (identity preservation)
// ---------------------------------------------------------------------------

/// MSE between extractor features of the generated and source images.
pub fn perceptual_loss(generated: &Tensor, source: &Tensor, ext: &dyn FeatureExtractor) -> f32 {
    ops::mse(&ext.extract_raw(generated), &ext.extract_raw(source))
}

/// Tape form; the source's features are a constant target.
pub fn perceptual_loss_tape(
    tape: &mut Tape,
    generated: VarId,
    source: &Tensor,
    ext: &dyn FeatureExtractor,
) -> VarId {
    let gen_feat = ext.extract_tape(tape, generated);
    let src_feat = ext.extract_raw(source);
    tape.mse_const(gen_feat, src_feat)
}

// ---------------------------------------------------------------------------
// Makeup loss (histogram matching)
// ---------------------------------------------------------------------------

/// One face region, described by {0,1} masks of shape (1,1,H,W) on the
/// generated image and on the reference image.
pub struct Region<'a> {
    pub label: &'a str,
    pub gen_mask: &'a Tensor,
    pub ref_mask: &'a Tensor,
}

const HIST_BINS: usize = 256;

#[inline]
fn bin_of(v: f32) -> usize {
    let b = ((v + 1.0) * 0.5 * HIST_BINS as f32) as i32;
    b.clamp(0, HIST_BINS as i32 - 1) as usize
}

/// 256-bin quantile mapping of `gen` values onto the distribution of
/// `reference` values. Each reference bin is represented by the mean of the
/// actual values that fell into it, so matching a constant region reproduces
/// the constant exactly.
pub fn histogram_match_channel(gen: &[f32], reference: &[f32]) -> Result<Vec<f32>, LossError> {
    if gen.is_empty() || reference.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut gen_hist = [0u64; HIST_BINS];
    for &v in gen {
        gen_hist[bin_of(v)] += 1;
    }
    let mut ref_hist = [0u64; HIST_BINS];
    let mut ref_sum = [0.0f64; HIST_BINS];
    for &v in reference {
        let b = bin_of(v);
        ref_hist[b] += 1;
        ref_sum[b] += v as f64;
    }
    // occupied reference bins: (cumulative count, bin mean)
    let mut ref_levels: Vec<(u64, f32)> = Vec::new();
    let mut cum = 0u64;
    for b in 0..HIST_BINS {
        if ref_hist[b] > 0 {
            cum += ref_hist[b];
            ref_levels.push((cum, (ref_sum[b] / ref_hist[b] as f64) as f32));
        }
    }
    let n_gen = gen.len() as u64;
    let n_ref = reference.len() as u64;
    // per-bin matched value for the generated image
    let mut matched_of_bin = [0.0f32; HIST_BINS];
    let mut gen_cum = 0u64;
    let mut level = 0usize;
    for b in 0..HIST_BINS {
        if gen_hist[b] == 0 {
            continue;
        }
        gen_cum += gen_hist[b];
        // first reference level whose quantile >= this bin's quantile
        while level + 1 < ref_levels.len() && ref_levels[level].0 * n_gen < gen_cum * n_ref {
            level += 1;
        }
        matched_of_bin[b] = ref_levels[level].1;
    }
    Ok(gen.iter().map(|&v| matched_of_bin[bin_of(v)]).collect())
}

fn masked_positions(mask: &Tensor) -> Vec<usize> {
    mask.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect()
}

/// Histogram-matched target for one region of a single (1,3,H,W) image pair;
/// zero outside the mask.
pub fn matched_region_target(
    generated: &Tensor,
    reference: &Tensor,
    region: &Region<'_>,
) -> Result<Tensor, LossError> {
    let [n, c, h, w] = generated.shape();
    debug_assert_eq!(n, 1);
    if reference.shape()[1] != c {
        return Err(LossError::ShapeMismatch);
    }
    let gen_pos = masked_positions(region.gen_mask);
    let ref_pos = masked_positions(region.ref_mask);
    if gen_pos.is_empty() || ref_pos.is_empty() {
        return Err(LossError::EmptyRegion(String::from(region.label)));
    }
    let mut target = Tensor::zeros(1, c, h, w);
    let rh = reference.shape()[2];
    let rw = reference.shape()[3];
    for ch in 0..c {
        let gen_vals: Vec<f32> = gen_pos.iter().map(|&p| generated.data()[ch * h * w + p]).collect();
        let ref_vals: Vec<f32> = ref_pos.iter().map(|&p| reference.data()[ch * rh * rw + p]).collect();
        let matched = histogram_match_channel(&gen_vals, &ref_vals)?;
        for (&p, &m) in gen_pos.iter().zip(&matched) {
            target.data_mut()[ch * h * w + p] = m;
        }
    }
    Ok(target)
}

/// Makeup loss of one generated/reference image pair: per region, MSE between
/// the generated pixels and their (constant) histogram-matched targets,
/// summed over regions with equal weight.
pub fn makeup_loss(
    generated: &Tensor,
    reference: &Tensor,
    regions: &[Region<'_>],
) -> Result<f32, LossError> {
    let mut total = 0.0f32;
    for region in regions {
        let target = matched_region_target(generated, reference, region)?;
        let (value, _) = ops::masked_mse(generated, &target, region.gen_mask);
        total += value;
    }
    Ok(total)
}

/// Tape form over a batch: `targets` pairs one precomputed matched target and
/// pixel mask per region, stacked (N,3,H,W)/(N,1,H,W). The targets are
/// constants; gradient reaches only the generated image.
pub fn makeup_loss_tape(tape: &mut Tape, generated: VarId, targets: Vec<(Tensor, Tensor)>) -> VarId {
    let terms: Vec<VarId> = targets
        .into_iter()
        .map(|(target, mask)| tape.masked_mse_const(generated, target, mask))
        .collect();
    tape.sum_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::IdentityExtractor;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adversarial_identities() {
        let ones = Tensor::filled(2, 1, 3, 3, 1.0);
        let zeros = Tensor::zeros(2, 1, 3, 3);
        assert_eq!(adversarial_loss(&[], &[&ones], GanSide::Generator).unwrap(), 0.0);
        assert_eq!(adversarial_loss(&[], &[&zeros], GanSide::Generator).unwrap(), 1.0);
        assert_eq!(
            adversarial_loss(&[&ones], &[&zeros], GanSide::Discriminator).unwrap(),
            0.0
        );
        assert!(matches!(
            adversarial_loss(&[], &[], GanSide::Generator),
            Err(LossError::EmptyBatch)
        ));
    }

    #[test]
    fn cycle_identities_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(1, 3, 4, 4, 0.5, &mut rng);
        let y = Tensor::randn(1, 3, 4, 4, 0.5, &mut rng);
        assert_eq!(cycle_loss(&x, &x, &y, &y), 0.0);
        let x1 = x.map(|v| v + 1.0);
        let y1 = y.map(|v| v + 1.0);
        assert!((cycle_loss(&x1, &x, &y1, &y) - 2.0).abs() < 1e-5);

        // joint pixel permutation of each (reconstruction, target) pair
        let mut perm: Vec<usize> = (0..x.len()).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor| {
            let data: Vec<f32> = perm.iter().map(|&i| t.data()[i]).collect();
            Tensor::from_vec(1, 3, 4, 4, data)
        };
        let base = cycle_loss(&x1, &x, &y1, &y);
        let shuffled = cycle_loss(&permute(&x1), &permute(&x), &permute(&y1), &permute(&y));
        assert!((base - shuffled).abs() < 1e-6);
    }

    #[test]
    fn perceptual_with_identity_stub_is_image_mse() {
        let gen = Tensor::from_vec(1, 1, 2, 2, vec![0.0, 1.0, 0.5, -0.5]);
        let src = Tensor::from_vec(1, 1, 2, 2, vec![0.5, 0.0, 0.5, 0.5]);
        let got = perceptual_loss(&gen, &src, &IdentityExtractor);
        // hand: (0.25 + 1 + 0 + 1)/4 = 0.5625
        assert!((got - 0.5625).abs() < 1e-6);
        assert_eq!(perceptual_loss(&src, &src, &IdentityExtractor), 0.0);

        // doubling the residual quadruples the loss
        let gen2 = Tensor::from_vec(
            1,
            1,
            2,
            2,
            gen.data().iter().zip(src.data()).map(|(&g, &s)| s + 2.0 * (g - s)).collect::<Vec<_>>(),
        );
        let quadrupled = perceptual_loss(&gen2, &src, &IdentityExtractor);
        assert!((quadrupled - 4.0 * got).abs() < 1e-5);
    }

    fn full_mask(h: usize, w: usize) -> Tensor {
        Tensor::filled(1, 1, h, w, 1.0)
    }

    #[test]
    fn makeup_constant_regions_level_shift() {
        let gen = Tensor::filled(1, 3, 4, 4, 0.2);
        let reference = Tensor::filled(1, 3, 4, 4, 0.8);
        let mask = full_mask(4, 4);
        let region = Region { label: "face", gen_mask: &mask, ref_mask: &mask };
        let target = matched_region_target(&gen, &reference, &region).unwrap();
        assert!(target.data().iter().all(|&v| (v - 0.8).abs() < 1e-6));
        let loss = makeup_loss(&gen, &reference, &[region]).unwrap();
        assert!((loss - 0.36).abs() < 1e-6, "{}", loss);
    }

    #[test]
    fn makeup_zero_when_already_matched() {
        // distinct bin-center values, identical distributions: matching is a no-op
        let vals: Vec<f32> = (0..16).map(|i| -1.0 + (i as f32 * 16.0 + 0.5) / 128.0).collect();
        let gen = Tensor::from_vec(1, 3, 4, 4, [vals.clone(), vals.clone(), vals.clone()].concat());
        let mask = full_mask(4, 4);
        let region = Region { label: "face", gen_mask: &mask, ref_mask: &mask };
        let loss = makeup_loss(&gen, &gen.clone(), &[region]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn makeup_empty_mask_is_error() {
        let gen = Tensor::filled(1, 3, 4, 4, 0.2);
        let empty = Tensor::zeros(1, 1, 4, 4);
        let full = full_mask(4, 4);
        let region = Region { label: "lips", gen_mask: &empty, ref_mask: &full };
        assert!(matches!(
            makeup_loss(&gen, &gen.clone(), &[region]),
            Err(LossError::EmptyRegion(_))
        ));
    }

    #[test]
    fn histogram_matching_equals_sort_oracle() {
        // equal-count regions of distinct bin-center values: the 256-bin
        // quantile map must coincide with exact rank matching
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let mut bins: Vec<usize> = (0..256).collect();
            bins.shuffle(&mut rng);
            let center = |b: usize| -1.0 + (b as f32 + 0.5) / 128.0;
            let gen: Vec<f32> = bins[..64].iter().map(|&b| center(b)).collect();
            bins.shuffle(&mut rng);
            let reference: Vec<f32> = bins[..64].iter().map(|&b| center(b)).collect();

            let got = histogram_match_channel(&gen, &reference).unwrap();

            // oracle: sort-based quantile mapping by rank
            let mut order: Vec<usize> = (0..gen.len()).collect();
            order.sort_by(|&a, &b| gen[a].partial_cmp(&gen[b]).unwrap());
            let mut ref_sorted = reference.clone();
            ref_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want = vec![0.0f32; gen.len()];
            for (rank, &i) in order.iter().enumerate() {
                want[i] = ref_sorted[rank];
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn makeup_region_permutation_invariance() {
        // histogram matching is order-free: permuting pixels jointly inside a
        // region leaves the loss unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let gen = Tensor::randn(1, 3, 4, 4, 0.3, &mut rng);
        let reference = Tensor::randn(1, 3, 4, 4, 0.3, &mut rng);
        let mask = full_mask(4, 4);
        let region = Region { label: "face", gen_mask: &mask, ref_mask: &mask };
        let base = makeup_loss(&gen, &reference, &[region]).unwrap();

        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor, c: usize| {
            let mut out = t.clone();
            for ch in 0..c {
                for (dst, &src) in perm.iter().enumerate() {
                    out.data_mut()[ch * 16 + dst] = t.data()[ch * 16 + src];
                }
            }
            out
        };
        let mask2 = full_mask(4, 4);
        let region2 = Region { label: "face", gen_mask: &mask2, ref_mask: &mask2 };
        let shuffled = makeup_loss(&permute(&gen, 3), &permute(&reference, 3), &[region2]).unwrap();
        assert!((base - shuffled).abs() < 1e-6);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let unit = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &w);
        assert!((unit.total - 13.005).abs() < 1e-6);
        let zero = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w);
        assert_eq!(zero.total, 0.0);
        let phase1 = total_loss(1.0, 1.0, 1.0, 1.0, 0.0, &w);
        assert!((phase1.total - 12.005).abs() < 1e-6);
    }

    #[test]
    fn total_loss_is_linear_in_each_component() {
        let w = LossWeights { alpha: 0.5, beta: 2.0, gamma: 0.25, sigma: 3.0 };
        let base = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &w).total;
        for (idx, weight) in [w.alpha, w.beta, w.gamma, w.sigma, 1.0].iter().enumerate() {
            let mut c = [1.0f32; 5];
            c[idx] += 1.0;
            let bumped = total_loss(c[0], c[1], c[2], c[3], c[4], &w).total;
            assert!((bumped - base - weight).abs() < 1e-6, "component {}", idx);
        }
    }
}
