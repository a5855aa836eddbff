//! Two-phase training: phase 1 trains the student from scratch under the
//! four generator losses; phase 2 adds the collaborative-distillation feature
//! loss against a frozen teacher. Per batch, both discriminators step first,
//! then the generator (plus adapters in phase 2).
//!
//! All randomness is keyed by the config seed: weight init, per-epoch
//! shuffles and flip augmentation each draw from independently derived
//! streams, so a (config, seed) pair reproduces bit-identical trajectories
//! and checkpoints resume exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{derive_seed, Dataset, RegionMasks, Sample};
use crate::distill::{self, AdapterSet, Branch, DistillError, TapPoint};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::mathf;
use crate::model::{FeatureExtractor, Generator, ModelError, PatchDiscriminator};
use crate::netspec::GeneratorSpec;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

// seed streams
const STREAM_GEN_INIT: u64 = 100;
const STREAM_DISC_NON: u64 = 101;
const STREAM_DISC_MAKEUP: u64 = 102;
const STREAM_ADAPTERS: u64 = 103;
const STREAM_BENCH: u64 = 104;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("config.{field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("epoch {epoch} out of range for a {phase_epochs}-epoch phase")]
    EpochOutOfRange { epoch: u32, phase_epochs: u32 },
    #[error("loss became non-finite at phase {phase} epoch {epoch} step {step} ({term})")]
    NanLoss { phase: u8, epoch: u32, step: usize, term: &'static str },
    #[error("checkpoint is not a phase-{expected} checkpoint (found phase {found})")]
    WrongPhase { expected: u8, found: u8 },
    #[error("checkpoint config digest mismatch; refusing to resume")]
    DigestMismatch,
    #[error("teacher weights changed during distillation")]
    TeacherMutated,
    #[error("tap-point mismatch between checkpoints: {0}")]
    TapMismatch(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss error: {0}")]
    Loss(#[from] losses::LossError),
}

/// Schedule and optimization settings for one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub phase1_epochs: u32,
    pub phase2_epochs: u32,
    pub lr0: f32,
    /// Epoch index after which the rate decays linearly to zero, applied
    /// independently within each phase.
    pub decay_start: u32,
    pub weights: LossWeights,
    pub n_decom: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub resolution: usize,
    /// Fresh optimizer state at the start of phase 2 (the default) or carry
    /// phase-1 moments forward.
    pub reset_optimizer_phase2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // the published schedule: 80+60 epochs, lr 2e-4 decaying after 30
        Self {
            phase1_epochs: 80,
            phase2_epochs: 60,
            lr0: 2e-4,
            decay_start: 30,
            weights: LossWeights::default(),
            n_decom: 9,
            batch_size: 4,
            seed: 0,
            resolution: 256,
            reset_optimizer_phase2: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |field: &'static str, reason: &str| {
            Err(EngineError::InvalidConfig { field, reason: String::from(reason) })
        };
        if self.lr0 <= 0.0 {
            return bad("lr0", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.resolution % 4 != 0 || self.resolution < 16 {
            return bad("resolution", "must be >= 16 and divisible by 4");
        }
        if self.n_decom < 1 {
            return bad("n_decom", "must be >= 1");
        }
        Ok(())
    }

    fn validate_phase(&self, phase: u8) -> Result<(), EngineError> {
        self.validate()?;
        let epochs = if phase == 1 { self.phase1_epochs } else { self.phase2_epochs };
        if epochs == 0 {
            return Err(EngineError::InvalidConfig {
                field: if phase == 1 { "phase1_epochs" } else { "phase2_epochs" },
                reason: String::from("must be positive"),
            });
        }
        if self.decay_start > epochs {
            return Err(EngineError::InvalidConfig {
                field: "decay_start",
                reason: format!("must be <= phase epochs ({})", epochs),
            });
        }
        Ok(())
    }

    fn validate_dataset(&self, data: &Dataset) -> Result<(), EngineError> {
        let (non, makeup) = data.domain_indices();
        let pairs = non.len().min(makeup.len());
        if self.batch_size > pairs {
            return Err(EngineError::InvalidConfig {
                field: "batch_size",
                reason: format!("{} exceeds the {} available image pairs", self.batch_size, pairs),
            });
        }
        if let Some(s) = data.samples.first() {
            let [_, _, h, w] = s.image.shape();
            if h != self.resolution || w != self.resolution {
                return Err(EngineError::InvalidConfig {
                    field: "resolution",
                    reason: format!("dataset images are {}x{}, config says {}", h, w, self.resolution),
                });
            }
        }
        Ok(())
    }

    /// Canonical content digest; embedded in checkpoints.
    pub fn digest(&self) -> String {
        let w = &self.weights;
        let text = format!(
            "p1={};p2={};lr0={:e};decay={};a={:e};b={:e};g={:e};s={:e};nd={};bs={};seed={};res={};reset={}",
            self.phase1_epochs,
            self.phase2_epochs,
            self.lr0,
            self.decay_start,
            w.alpha,
            w.beta,
            w.gamma,
            w.sigma,
            self.n_decom,
            self.batch_size,
            self.seed,
            self.resolution,
            self.reset_optimizer_phase2,
        );
        hex32(Sha256::digest(text.as_bytes()).into())
    }
}

fn hex32(bytes: [u8; 32]) -> String {
    let mut s = String::with_capacity(64);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

/// Constant `lr0` until `decay_start`, then linear interpolation to zero at
/// `phase_epochs`.
pub fn lr_schedule(epoch: u32, phase_epochs: u32, lr0: f32, decay_start: u32) -> Result<f32, EngineError> {
    if epoch >= phase_epochs {
        return Err(EngineError::EpochOutOfRange { epoch, phase_epochs });
    }
    if epoch <= decay_start {
        return Ok(lr0);
    }
    Ok(lr0 * (phase_epochs - epoch) as f32 / (phase_epochs - decay_start) as f32)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam moments; one entry per parameter tensor, in model visit order.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub t: u64,
    pub b1_pow: f32,
    pub b2_pow: f32,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    fn fresh() -> Self {
        Self { t: 0, b1_pow: 1.0, b2_pow: 1.0, m: Vec::new(), v: Vec::new() }
    }
}

struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    state: AdamState,
}

impl Adam {
    fn new(state: AdamState) -> Self {
        // GAN-convention momenta
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8, state }
    }

    fn begin_step(&mut self) {
        self.state.t += 1;
        self.state.b1_pow *= self.beta1;
        self.state.b2_pow *= self.beta2;
    }

    fn update(&mut self, index: usize, param: &mut Tensor, grad: &Tensor, lr: f32) {
        while self.state.m.len() <= index {
            let shape = param.shape();
            self.state.m.push(Tensor::zeros(shape[0], shape[1], shape[2], shape[3]));
            self.state.v.push(Tensor::zeros(shape[0], shape[1], shape[2], shape[3]));
        }
        let m = &mut self.state.m[index];
        let v = &mut self.state.v[index];
        let (b1, b2) = (self.beta1, self.beta2);
        let mc = 1.0 / (1.0 - self.state.b1_pow);
        let vc = 1.0 / (1.0 - self.state.b2_pow);
        for ((p, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *p -= lr * (*mi * mc) / (mathf::sqrt(*vi * vc) + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Full training state at an epoch boundary. Reloading one reproduces the
/// subsequent loss trajectory exactly (given the same config and data).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Checkpoint {
    pub phase: u8,
    /// Completed epochs within `phase`.
    pub epoch: u32,
    pub spec: GeneratorSpec,
    pub generator: Vec<Tensor>,
    pub disc_nonmakeup: Vec<Tensor>,
    pub disc_makeup: Vec<Tensor>,
    pub adapter_taps: Option<Vec<TapPoint>>,
    pub adapters: Option<Vec<Tensor>>,
    pub opt_g: AdamState,
    pub opt_d_nonmakeup: AdamState,
    pub opt_d_makeup: AdamState,
    pub config_digest: String,
    pub seed: u64,
}

impl Checkpoint {
    pub fn generator(&self) -> Result<Generator, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gen = Generator::init(&self.spec, &mut rng);
        gen.import_params(&self.generator)?;
        Ok(gen)
    }
}

/// Seed-initialized checkpoint for a spec: the starting point of from-scratch
/// training, and the teacher-provenance path when no trained teacher exists.
pub fn init_checkpoint(spec: &GeneratorSpec, config: &TrainConfig) -> Checkpoint {
    let mut g_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_GEN_INIT));
    let gen = Generator::init(spec, &mut g_rng);
    let mut dn_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_DISC_NON));
    let d_non = PatchDiscriminator::init(&mut dn_rng);
    let mut dm_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_DISC_MAKEUP));
    let d_makeup = PatchDiscriminator::init(&mut dm_rng);
    Checkpoint {
        phase: 0,
        epoch: 0,
        spec: spec.clone(),
        generator: gen.export_params(),
        disc_nonmakeup: d_non.export_params(),
        disc_makeup: d_makeup.export_params(),
        adapter_taps: None,
        adapters: None,
        opt_g: AdamState::fresh(),
        opt_d_nonmakeup: AdamState::fresh(),
        opt_d_makeup: AdamState::fresh(),
        config_digest: config.digest(),
        seed: config.seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: u32,
    pub phase: u8,
    pub losses: LossBreakdown,
    pub lr: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct Trainer<'a> {
    config: &'a TrainConfig,
    gen: Generator,
    d_non: PatchDiscriminator,
    d_makeup: PatchDiscriminator,
    adam_g: Adam,
    adam_dn: Adam,
    adam_dm: Adam,
    adapters: Option<AdapterSet>,
    teacher: Option<Generator>,
    ext: &'a dyn FeatureExtractor,
    par: bool,
}

struct BatchData {
    x: Tensor,
    y: Tensor,
    x_masks: Vec<Option<RegionMasks>>,
    y_masks: Vec<Option<RegionMasks>>,
}

fn flip_h(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros(n, c, h, w);
    for i in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(i * h + y) * w + x] = t.data()[(i * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

fn flip_masks(m: &RegionMasks) -> RegionMasks {
    RegionMasks { lips: flip_h(&m.lips), eyes: flip_h(&m.eyes), skin: flip_h(&m.skin) }
}

fn assemble_batch(samples: &[(&Sample, bool)]) -> (Tensor, Vec<Option<RegionMasks>>) {
    let imgs: Vec<Tensor> =
        samples.iter().map(|(s, flip)| if *flip { flip_h(&s.image) } else { s.image.clone() }).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let masks = samples
        .iter()
        .map(|(s, flip)| {
            s.masks.as_ref().map(|m| if *flip { flip_masks(m) } else { m.clone() })
        })
        .collect();
    (Tensor::stack(&refs), masks)
}

impl<'a> Trainer<'a> {
    /// Histogram-matched targets for every usable region, stacked over the
    /// batch; targets are constants for the gradient.
    fn makeup_targets(
        &self,
        generated: &Tensor,
        batch: &BatchData,
    ) -> Result<Vec<(Tensor, Tensor)>, EngineError> {
        let [n, _, h, w] = generated.shape();
        let all_masked = batch.x_masks.iter().all(|m| m.is_some())
            && batch.y_masks.iter().all(|m| m.is_some());
        let kinds: &[&str] = if all_masked { &["lips", "eyes", "skin"] } else { &["face"] };
        let mut out = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let mut target = Tensor::zeros(n, 3, h, w);
            let mut mask = Tensor::zeros(n, 1, h, w);
            for i in 0..n {
                let gen_i = generated.slice_item(i);
                let ref_i = batch.y.slice_item(i);
                let full = Tensor::filled(1, 1, h, w, 1.0);
                let pick = |masks: &Option<RegionMasks>| -> Tensor {
                    match (kind, masks) {
                        ("lips", Some(m)) => m.lips.clone(),
                        ("eyes", Some(m)) => m.eyes.clone(),
                        ("skin", Some(m)) => m.skin.clone(),
                        _ => full.clone(),
                    }
                };
                let gm = pick(&batch.x_masks[i]);
                let rm = pick(&batch.y_masks[i]);
                let region = losses::Region { label: kind, gen_mask: &gm, ref_mask: &rm };
                let t = losses::matched_region_target(&gen_i, &ref_i, &region)?;
                target.item_mut(i).copy_from_slice(t.data());
                mask.item_mut(i).copy_from_slice(gm.data());
            }
            out.push((target, mask));
        }
        Ok(out)
    }

    fn discriminator_step(
        d: &mut PatchDiscriminator,
        adam: &mut Adam,
        real: &Tensor,
        fake: &Tensor,
        lr: f32,
        par: bool,
    ) {
        let mut tape = Tape::new(par);
        let vars = d.register(&mut tape, true);
        let r_in = tape.constant(real.clone());
        let f_in = tape.constant(fake.clone());
        let r_out = d.forward(&mut tape, &vars, r_in);
        let f_out = d.forward(&mut tape, &vars, f_in);
        let loss = losses::adversarial_discriminator_tape(&mut tape, &[r_out], &[f_out]);
        tape.backward(loss);
        adam.begin_step();
        let mut idx = 0usize;
        d.visit_params_mut(&mut |p| {
            if let Some(g) = tape.grad(vars.0[idx]) {
                adam.update(idx, p, g, lr);
            }
            idx += 1;
        });
    }

    fn train_step(
        &mut self,
        batch: &BatchData,
        lr: f32,
        phase: u8,
        epoch: u32,
        step: usize,
    ) -> Result<LossBreakdown, EngineError> {
        let mut tape = Tape::new(self.par);
        let src_in = tape.constant(batch.x.clone());
        let ref_in = tape.constant(batch.y.clone());
        let g_vars = self.gen.register(&mut tape, true);
        let pass1 = self.gen.forward(&mut tape, &g_vars, src_in, ref_in);

        // discriminators first, on detached fakes
        let fake_makeup = tape.value(pass1.makeup).clone();
        let fake_demakeup = tape.value(pass1.demakeup).clone();
        Self::discriminator_step(&mut self.d_makeup, &mut self.adam_dm, &batch.y, &fake_makeup, lr, self.par);
        Self::discriminator_step(&mut self.d_non, &mut self.adam_dn, &batch.x, &fake_demakeup, lr, self.par);

        // generator objective against the updated discriminators
        let dm_vars = self.d_makeup.register(&mut tape, false);
        let dm_out = self.d_makeup.forward(&mut tape, &dm_vars, pass1.makeup);
        let dn_vars = self.d_non.register(&mut tape, false);
        let dn_out = self.d_non.forward(&mut tape, &dn_vars, pass1.demakeup);
        let adv = losses::adversarial_generator_tape(&mut tape, &[dm_out, dn_out]);

        // cycle pass: feeding both outputs back recovers both inputs
        let pass2 = self.gen.forward(&mut tape, &g_vars, pass1.demakeup, pass1.makeup);
        let cyc = losses::cycle_loss_tape(&mut tape, pass2.demakeup, &batch.x, pass2.makeup, &batch.y);

        let per_makeup = losses::perceptual_loss_tape(&mut tape, pass1.makeup, &batch.x, self.ext);
        let per_demakeup = losses::perceptual_loss_tape(&mut tape, pass1.demakeup, &batch.y, self.ext);
        let per = tape.sum_all(&[per_makeup, per_demakeup]);

        let targets = self.makeup_targets(&fake_makeup, batch)?;
        let makeup = losses::makeup_loss_tape(&mut tape, pass1.makeup, targets);

        let feat = if phase == 2 {
            let teacher = self.teacher.as_ref().expect("phase 2 has a teacher");
            let adapters = self.adapters.as_ref().expect("phase 2 has adapters");
            let (t_src, t_ref) = teacher.encoder_features(&batch.x, &batch.y, self.par);
            let student: Vec<VarId> = adapters
                .taps
                .iter()
                .map(|t| match t.branch {
                    Branch::Src => pass1.src_feats[t.layer_index],
                    Branch::Ref => pass1.ref_feats[t.layer_index],
                })
                .collect();
            let teacher_feats: Vec<Tensor> = adapters
                .taps
                .iter()
                .map(|t| match t.branch {
                    Branch::Src => t_src[t.layer_index].clone(),
                    Branch::Ref => t_ref[t.layer_index].clone(),
                })
                .collect();
            Some(distill::feature_loss_tape(&mut tape, &student, adapters, &teacher_feats, true)?)
        } else {
            None
        };

        let w = self.config.weights;
        let mut terms = vec![
            tape.scale(adv, w.alpha),
            tape.scale(cyc, w.beta),
            tape.scale(per, w.gamma),
            tape.scale(makeup, w.sigma),
        ];
        if let Some(f) = feat {
            terms.push(f);
        }
        let total = tape.sum_all(&terms);

        let breakdown = LossBreakdown {
            adv: tape.scalar_value(adv),
            cyc: tape.scalar_value(cyc),
            per: tape.scalar_value(per),
            makeup: tape.scalar_value(makeup),
            feat: feat.map_or(0.0, |f| tape.scalar_value(f)),
            total: tape.scalar_value(total),
        };
        if !breakdown.total.is_finite() {
            return Err(EngineError::NanLoss { phase, epoch, step, term: "total" });
        }

        tape.backward(total);

        self.adam_g.begin_step();
        let adam_g = &mut self.adam_g;
        let mut idx = 0usize;
        self.gen.visit_params_mut(&mut |p| {
            if let Some(g) = tape.grad(g_vars.0[idx]) {
                adam_g.update(idx, p, g, lr);
            }
            idx += 1;
        });
        if phase == 2 {
            // adapter leaves were registered after the generator's
            let adapter_ids: Vec<VarId> =
                tape.registered_params()[g_vars.0.len()..].to_vec();
            let adapters = self.adapters.as_mut().expect("phase 2 has adapters");
            let mut a = 0usize;
            for adapter in &mut adapters.adapters {
                if let Some(g) = tape.grad(adapter_ids[a]) {
                    adam_g.update(idx, adapter.weight_mut(), g, lr);
                }
                idx += 1;
                a += 1;
            }
        }
        Ok(breakdown)
    }

    fn run_phase(
        &mut self,
        phase: u8,
        epochs: u32,
        start_epoch: u32,
        data: &Dataset,
    ) -> Result<Vec<EpochRecord>, EngineError> {
        let (non_idx, makeup_idx) = data.domain_indices();
        let pairs = non_idx.len().min(makeup_idx.len());
        let bs = self.config.batch_size;
        let steps = pairs / bs;
        let mut history = Vec::new();
        for epoch in start_epoch..epochs {
            let lr = lr_schedule(epoch, epochs, self.config.lr0, self.config.decay_start)?;
            let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.config.seed,
                (phase as u64) << 32 | epoch as u64,
            ));
            let mut non = non_idx.clone();
            non.shuffle(&mut erng);
            let mut makeup = makeup_idx.clone();
            makeup.shuffle(&mut erng);

            let mut sum = LossBreakdown::default();
            for step in 0..steps {
                let mut xs: Vec<(&Sample, bool)> = Vec::with_capacity(bs);
                let mut ys: Vec<(&Sample, bool)> = Vec::with_capacity(bs);
                for k in 0..bs {
                    let flip_x = erng.random::<f32>() < 0.5;
                    let flip_y = erng.random::<f32>() < 0.5;
                    xs.push((&data.samples[non[step * bs + k]], flip_x));
                    ys.push((&data.samples[makeup[step * bs + k]], flip_y));
                }
                let (x, x_masks) = assemble_batch(&xs);
                let (y, y_masks) = assemble_batch(&ys);
                let batch = BatchData { x, y, x_masks, y_masks };
                let bd = self.train_step(&batch, lr, phase, epoch, step)?;
                sum.adv += bd.adv;
                sum.cyc += bd.cyc;
                sum.per += bd.per;
                sum.makeup += bd.makeup;
                sum.feat += bd.feat;
                sum.total += bd.total;
            }
            let inv = 1.0 / steps as f32;
            let losses = LossBreakdown {
                adv: sum.adv * inv,
                cyc: sum.cyc * inv,
                per: sum.per * inv,
                makeup: sum.makeup * inv,
                feat: sum.feat * inv,
                total: sum.total * inv,
            };
            log::info!(
                "phase {} epoch {:>3}: total {:.4} (adv {:.4} cyc {:.4} per {:.4} makeup {:.4} feat {:.4}) lr {:.2e}",
                phase,
                epoch,
                losses.total,
                losses.adv,
                losses.cyc,
                losses.per,
                losses.makeup,
                losses.feat,
                lr
            );
            history.push(EpochRecord { epoch, phase, losses, lr });
        }
        Ok(history)
    }

    fn to_checkpoint(&self, phase: u8, epoch: u32) -> Checkpoint {
        Checkpoint {
            phase,
            epoch,
            spec: self.gen.spec.clone(),
            generator: self.gen.export_params(),
            disc_nonmakeup: self.d_non.export_params(),
            disc_makeup: self.d_makeup.export_params(),
            adapter_taps: self.adapters.as_ref().map(|a| a.taps.clone()),
            adapters: self.adapters.as_ref().map(|a| a.export_params()),
            opt_g: self.adam_g.state.clone(),
            opt_d_nonmakeup: self.adam_dn.state.clone(),
            opt_d_makeup: self.adam_dm.state.clone(),
            config_digest: self.config.digest(),
            seed: self.config.seed,
        }
    }
}

fn parallel_default() -> bool {
    cfg!(feature = "parallel")
}

fn trainer_from_checkpoint<'a>(
    config: &'a TrainConfig,
    ckpt: &Checkpoint,
    ext: &'a dyn FeatureExtractor,
) -> Result<Trainer<'a>, EngineError> {
    let gen = ckpt.generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut d_non = PatchDiscriminator::init(&mut rng);
    d_non.import_params(&ckpt.disc_nonmakeup)?;
    let mut d_makeup = PatchDiscriminator::init(&mut rng);
    d_makeup.import_params(&ckpt.disc_makeup)?;
    Ok(Trainer {
        config,
        gen,
        d_non,
        d_makeup,
        adam_g: Adam::new(ckpt.opt_g.clone()),
        adam_dn: Adam::new(ckpt.opt_d_nonmakeup.clone()),
        adam_dm: Adam::new(ckpt.opt_d_makeup.clone()),
        adapters: None,
        teacher: None,
        ext,
        par: parallel_default(),
    })
}

/// Phase 1: train from scratch (or resume a phase-1 checkpoint) under the
/// four losses; the feature term is zero.
pub fn train_phase1(
    config: &TrainConfig,
    spec: &GeneratorSpec,
    data: &Dataset,
    resume: Option<&Checkpoint>,
    ext: &dyn FeatureExtractor,
) -> Result<TrainOutcome, EngineError> {
    config.validate_phase(1)?;
    config.validate_dataset(data)?;
    let (start_ckpt, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.phase != 1 && ckpt.phase != 0 {
                return Err(EngineError::WrongPhase { expected: 1, found: ckpt.phase });
            }
            if ckpt.config_digest != config.digest() {
                return Err(EngineError::DigestMismatch);
            }
            (ckpt.clone(), if ckpt.phase == 1 { ckpt.epoch } else { 0 })
        }
        None => (init_checkpoint(spec, config), 0),
    };
    let mut trainer = trainer_from_checkpoint(config, &start_ckpt, ext)?;
    let history = trainer.run_phase(1, config.phase1_epochs, start_epoch, data)?;
    Ok(TrainOutcome { checkpoint: trainer.to_checkpoint(1, config.phase1_epochs), history })
}

/// Phase 2: add the collaborative-distillation feature loss against a frozen
/// teacher. Adapters are freshly initialized (or resumed from a phase-2
/// checkpoint); teacher weights are digest-verified unchanged.
pub fn train_phase2(
    config: &TrainConfig,
    student: &Checkpoint,
    teacher: &Checkpoint,
    data: &Dataset,
    ext: &dyn FeatureExtractor,
) -> Result<TrainOutcome, EngineError> {
    config.validate_phase(2)?;
    config.validate_dataset(data)?;
    let teacher_gen = teacher.generator()?;
    let teacher_digest = teacher_gen.weights_digest();

    let taps = distill::tap_points_for(&teacher.spec, &student.spec)?;
    let mut trainer = trainer_from_checkpoint(config, student, ext)?;
    let start_epoch = if student.phase == 2 { student.epoch } else { 0 };
    trainer.adapters = match (&student.adapters, &student.adapter_taps, student.phase) {
        (Some(weights), Some(saved_taps), 2) => {
            let adapters = weights.iter().cloned().map(distill::Adapter::from_weight).collect();
            Some(AdapterSet { taps: saved_taps.clone(), adapters })
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_ADAPTERS));
            Some(AdapterSet::init(taps, &mut rng))
        }
    };
    if config.reset_optimizer_phase2 && student.phase != 2 {
        trainer.adam_g = Adam::new(AdamState::fresh());
        trainer.adam_dn = Adam::new(AdamState::fresh());
        trainer.adam_dm = Adam::new(AdamState::fresh());
    }
    trainer.teacher = Some(teacher_gen);

    let history = trainer.run_phase(2, config.phase2_epochs, start_epoch, data)?;

    if trainer.teacher.as_ref().expect("teacher set").weights_digest() != teacher_digest {
        return Err(EngineError::TeacherMutated);
    }
    Ok(TrainOutcome { checkpoint: trainer.to_checkpoint(2, config.phase2_epochs), history })
}

/// Deterministic forward pass of a checkpointed generator; adapters never
/// participate. Outputs lie in [-1,1].
pub fn infer(ckpt: &Checkpoint, src: &Tensor, reference: &Tensor) -> Result<(Tensor, Tensor), EngineError> {
    let gen = ckpt.generator()?;
    Ok(gen.infer(src, reference, parallel_default()))
}

/// Deterministic input images for benchmarking, derived from a fixed stream.
pub fn bench_inputs(resolution: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BENCH));
    let src = Tensor::randn(1, 3, resolution, resolution, 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0));
    let reference =
        Tensor::randn(1, 3, resolution, resolution, 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0));
    (src, reference)
}
