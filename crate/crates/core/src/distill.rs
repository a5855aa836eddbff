//! Collaborative knowledge distillation of the encoder branches: learnable
//! 1×1 adapters bridge the narrow student features onto the teacher's
//! feature space, and the feature loss sums the per-tap Frobenius norms of
//! the adapted-student-minus-teacher residuals.
//!
//! Adapters exist only inside the feature loss; they are not part of the
//! student's inference graph and are dropped from exported models.

use alloc::vec::Vec;

use rand::Rng;

use crate::netspec::GeneratorSpec;
use crate::ops::ConvCfg;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Branch {
    Src,
    Ref,
}

/// A pair of homologous encoder layers to distill between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TapPoint {
    pub branch: Branch,
    pub layer_index: usize,
    pub teacher_channels: usize,
    pub student_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DistillError {
    #[error("tap expects student channels < teacher channels, got {student} vs {teacher}")]
    NotCompressing { student: usize, teacher: usize },
    #[error("feature list length {found} does not match adapter count {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("tap {tap}: feature shape mismatch")]
    ShapeMismatch { tap: usize },
    #[error("adapter rows {rows} do not match student feature channels {channels}")]
    AdapterShape { rows: usize, channels: usize },
}

/// The four standard taps: both branches' first conv (64 vs 16 channels) and
/// second conv (128 vs 32 channels).
pub fn default_tap_points() -> Vec<TapPoint> {
    alloc::vec![
        TapPoint { branch: Branch::Src, layer_index: 0, teacher_channels: 64, student_channels: 16 },
        TapPoint { branch: Branch::Ref, layer_index: 0, teacher_channels: 64, student_channels: 16 },
        TapPoint { branch: Branch::Src, layer_index: 1, teacher_channels: 128, student_channels: 32 },
        TapPoint { branch: Branch::Ref, layer_index: 1, teacher_channels: 128, student_channels: 32 },
    ]
}

/// Tap points for an arbitrary teacher/student spec pair, one per shared
/// branch conv layer whose widths differ (student strictly narrower).
pub fn tap_points_for(teacher: &GeneratorSpec, student: &GeneratorSpec) -> Result<Vec<TapPoint>, DistillError> {
    let mut taps = Vec::new();
    for (branch, t_layers, s_layers) in [
        (Branch::Src, &teacher.branch_src, &student.branch_src),
        (Branch::Ref, &teacher.branch_ref, &student.branch_ref),
    ] {
        for (i, (t, s)) in t_layers.iter().zip(s_layers.iter()).enumerate() {
            if t.stride != s.stride || t.kernel != s.kernel {
                continue;
            }
            if s.out_channels >= t.out_channels {
                return Err(DistillError::NotCompressing {
                    student: s.out_channels,
                    teacher: t.out_channels,
                });
            }
            taps.push(TapPoint {
                branch,
                layer_index: i,
                teacher_channels: t.out_channels,
                student_channels: s.out_channels,
            });
        }
    }
    // order taps shallow-to-deep across branches: (src,0),(ref,0),(src,1),...
    taps.sort_by_key(|t| (t.layer_index, matches!(t.branch, Branch::Ref) as usize));
    Ok(taps)
}

/// One learnable Q matrix of shape (student_channels × teacher_channels),
/// stored in 1×1-conv layout (teacher, student, 1, 1) so applying it is a
/// bias-free linear 1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Adapter {
    weight: Tensor,
}

impl Adapter {
    pub fn init<R: Rng>(student_channels: usize, teacher_channels: usize, rng: &mut R) -> Self {
        Self { weight: Tensor::randn(teacher_channels, student_channels, 1, 1, 0.02, rng) }
    }

    /// Build from Q given as `student_channels` rows of `teacher_channels`
    /// values each.
    pub fn from_matrix(q_rows: &[&[f32]]) -> Self {
        let student = q_rows.len();
        let teacher = q_rows[0].len();
        let mut weight = Tensor::zeros(teacher, student, 1, 1);
        for (s, row) in q_rows.iter().enumerate() {
            assert_eq!(row.len(), teacher);
            for (t, &v) in row.iter().enumerate() {
                weight.data_mut()[t * student + s] = v;
            }
        }
        Self { weight }
    }

    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros(channels, channels, 1, 1);
        for c in 0..channels {
            weight.data_mut()[c * channels + c] = 1.0;
        }
        Self { weight }
    }

    pub fn student_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn teacher_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Q[s][t] in matrix orientation.
    pub fn q(&self, s: usize, t: usize) -> f32 {
        self.weight.data()[t * self.student_channels() + s]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn from_weight(weight: Tensor) -> Self {
        Self { weight }
    }
}

/// The learnable adapter stack, one matrix per tap point.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdapterSet {
    pub taps: Vec<TapPoint>,
    pub adapters: Vec<Adapter>,
}

impl AdapterSet {
    pub fn init<R: Rng>(taps: Vec<TapPoint>, rng: &mut R) -> Self {
        let adapters =
            taps.iter().map(|t| Adapter::init(t.student_channels, t.teacher_channels, rng)).collect();
        Self { taps, adapters }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn export_params(&self) -> Vec<Tensor> {
        self.adapters.iter().map(|a| a.weight.clone()).collect()
    }
}

/// Project student features onto teacher width: per spatial position,
/// `out = Qᵀ · input` — a bias-free linear 1×1 convolution.
pub fn apply_adapter(f_student: &Tensor, adapter: &Adapter) -> Result<Tensor, DistillError> {
    if f_student.c() != adapter.student_channels() {
        return Err(DistillError::AdapterShape {
            rows: adapter.student_channels(),
            channels: f_student.c(),
        });
    }
    Ok(crate::ops::conv2d(f_student, &adapter.weight, None, ConvCfg::new(1, 0), false))
}

/// Tape form of [`apply_adapter`]; the adapter weight is registered as a
/// parameter when `trainable`.
pub fn apply_adapter_tape(tape: &mut Tape, f_student: VarId, adapter: &Adapter, trainable: bool) -> VarId {
    let w = if trainable {
        tape.param(adapter.weight.clone())
    } else {
        tape.constant(adapter.weight.clone())
    };
    tape.conv2d(f_student, w, None, ConvCfg::new(1, 0))
}

fn check_aligned(
    n_student: usize,
    n_teacher: usize,
    adapters: &AdapterSet,
) -> Result<(), DistillError> {
    if n_student != adapters.len() || n_teacher != adapters.len() {
        return Err(DistillError::LengthMismatch {
            expected: adapters.len(),
            found: if n_student != adapters.len() { n_student } else { n_teacher },
        });
    }
    Ok(())
}

/// Σ_i ‖F'_i × Q_i − F_i‖₂ — the summed Frobenius norms of the per-tap
/// residuals, averaged over the batch dimension.
pub fn feature_loss(
    student_feats: &[Tensor],
    adapters: &AdapterSet,
    teacher_feats: &[Tensor],
) -> Result<f32, DistillError> {
    check_aligned(student_feats.len(), teacher_feats.len(), adapters)?;
    let mut total = 0.0f32;
    for (i, ((f_s, adapter), f_t)) in
        student_feats.iter().zip(&adapters.adapters).zip(teacher_feats).enumerate()
    {
        let projected = apply_adapter(f_s, adapter)?;
        if projected.shape() != f_t.shape() {
            return Err(DistillError::ShapeMismatch { tap: i });
        }
        let mut residual = projected;
        for (d, &t) in residual.data_mut().iter_mut().zip(f_t.data()) {
            *d -= t;
        }
        let (norm_mean, _) = crate::ops::frob_norm_mean(&residual);
        total += norm_mean;
    }
    Ok(total)
}

/// Tape form of [`feature_loss`]. Teacher features enter as constants: the
/// teacher is frozen and receives no gradient. Returns the scalar loss var.
pub fn feature_loss_tape(
    tape: &mut Tape,
    student_feats: &[VarId],
    adapters: &AdapterSet,
    teacher_feats: &[Tensor],
    train_adapters: bool,
) -> Result<VarId, DistillError> {
    check_aligned(student_feats.len(), teacher_feats.len(), adapters)?;
    let mut terms = Vec::with_capacity(adapters.len());
    for (i, ((&f_s, adapter), f_t)) in
        student_feats.iter().zip(&adapters.adapters).zip(teacher_feats).enumerate()
    {
        let projected = apply_adapter_tape(tape, f_s, adapter, train_adapters);
        if tape.value(projected).shape() != f_t.shape() {
            return Err(DistillError::ShapeMismatch { tap: i });
        }
        let neg_teacher = tape.constant(f_t.map(|v| -v));
        let residual = tape.add(projected, neg_teacher);
        terms.push(tape.frob_norm_mean(residual));
    }
    Ok(tape.sum_all(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_taps_match_table_widths() {
        let taps = default_tap_points();
        assert_eq!(taps.len(), 4);
        let shapes: Vec<(usize, usize)> =
            taps.iter().map(|t| (t.student_channels, t.teacher_channels)).collect();
        assert_eq!(shapes, [(16, 64), (16, 64), (32, 128), (32, 128)]);
    }

    #[test]
    fn derived_taps_equal_default_for_published_specs() {
        let teacher = crate::netspec::teacher_generator_spec();
        let student = crate::netspec::student_generator_spec(9).unwrap();
        let taps = tap_points_for(&teacher, &student).unwrap();
        assert_eq!(taps, default_tap_points());
        // a non-compressing pairing is rejected
        assert!(matches!(
            tap_points_for(&teacher, &teacher),
            Err(DistillError::NotCompressing { .. })
        ));
    }

    #[test]
    fn identity_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(1, 5, 3, 3, 1.0, &mut rng);
        let out = apply_adapter(&f, &Adapter::identity(5)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn adapter_hand_example() {
        // C'=1, C=2, q=[[1, 0.5]], input value 2 → output channels (2.0, 1.0)
        let adapter = Adapter::from_matrix(&[&[1.0, 0.5]]);
        let f = Tensor::from_vec(1, 1, 1, 1, alloc::vec![2.0]);
        let out = apply_adapter(&f, &adapter).unwrap();
        assert_eq!(out.shape(), [1, 2, 1, 1]);
        assert_eq!(out.data(), &[2.0, 1.0]);
    }

    #[test]
    fn adapter_equals_direct_1x1_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::randn(1, 3, 4, 4, 1.0, &mut rng);
        let adapter = Adapter::init(3, 6, &mut rng);
        let got = apply_adapter(&f, &adapter).unwrap();
        // direct per-position projection oracle
        for t in 0..6 {
            for s in 0..16 {
                let mut acc = 0.0f32;
                for c in 0..3 {
                    acc += adapter.q(c, t) * f.data()[c * 16 + s];
                }
                assert!((got.data()[t * 16 + s] - acc).abs() < 1e-5);
            }
        }
        // channel mismatch is an error
        assert!(apply_adapter(&Tensor::zeros(1, 4, 4, 4), &adapter).is_err());
    }

    #[test]
    fn feature_loss_zero_when_projection_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let taps = alloc::vec![TapPoint {
            branch: Branch::Src,
            layer_index: 0,
            teacher_channels: 6,
            student_channels: 3,
        }];
        let adapters = AdapterSet::init(taps, &mut rng);
        let f_s = Tensor::randn(1, 3, 4, 4, 1.0, &mut rng);
        let f_t = apply_adapter(&f_s, &adapters.adapters[0]).unwrap();
        let loss = feature_loss(&[f_s], &adapters, &[f_t]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn feature_loss_hand_example() {
        // one tap, F'×Q = (2,1), F = (3,1): ‖(−1,0)‖ = 1.0
        let adapter = Adapter::from_matrix(&[&[2.0, 1.0]]);
        let adapters = AdapterSet {
            taps: alloc::vec![TapPoint {
                branch: Branch::Src,
                layer_index: 0,
                teacher_channels: 2,
                student_channels: 1,
            }],
            adapters: alloc::vec![adapter],
        };
        let f_s = Tensor::from_vec(1, 1, 1, 1, alloc::vec![1.0]);
        let f_t = Tensor::from_vec(1, 2, 1, 1, alloc::vec![3.0, 1.0]);
        let loss = feature_loss(&[f_s], &adapters, &[f_t]).unwrap();
        assert!((loss - 1.0).abs() < 1e-6);
    }

    #[test]
    fn per_tap_norm_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let taps = alloc::vec![TapPoint {
            branch: Branch::Src,
            layer_index: 0,
            teacher_channels: 4,
            student_channels: 2,
        }];
        let adapters = AdapterSet::init(taps, &mut rng);
        let f_s = Tensor::randn(1, 2, 3, 3, 1.0, &mut rng);
        let f_t = Tensor::randn(1, 4, 3, 3, 1.0, &mut rng);
        let base = feature_loss(&[f_s.clone()], &adapters, &[f_t.clone()]).unwrap();
        // doubling the residual doubles the loss: scale both F'Q and F by 2
        let f_s2 = f_s.map(|v| 2.0 * v);
        let f_t2 = f_t.map(|v| 2.0 * v);
        let doubled = feature_loss(&[f_s2], &adapters, &[f_t2]).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-4 * base.max(1.0));
    }

    #[test]
    fn mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let adapters = AdapterSet::init(default_tap_points(), &mut rng);
        let f = Tensor::zeros(1, 16, 4, 4);
        assert!(matches!(
            feature_loss(&[f.clone()], &adapters, &[f.clone()]),
            Err(DistillError::LengthMismatch { .. })
        ));
    }
}
