//! Analytic parameter and MAC accounting for generator specs.
//!
//! Counting conventions:
//! * 1 MAC = one multiply + one accumulate; a K×K conv over C_i→C_o channels
//!   costs K²·C_i·C_o MACs per output pixel.
//! * Transposed convs are priced at their *output* spatial size, the
//!   gradient-of-convolution view of the kernel.
//! * Normalization and bias parameters are counted; their arithmetic is not.
//! * Model size is 4 bytes per parameter (32-bit weights).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::netspec::{GeneratorSpec, LayerKind, LayerSpec, NetspecError, Norm, ShapeTrace};
use crate::tensor::TensorShape;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub index: usize,
    pub label: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer and total parameter/MAC accounting for one generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub model_size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("layer expects {expected} input channels, shape has {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Netspec(#[from] NetspecError),
}

/// Weight count of a single layer, including bias and affine-norm terms.
pub fn layer_params(layer: &LayerSpec) -> u64 {
    let k2 = (layer.kernel * layer.kernel) as u64;
    let (ci, co) = (layer.in_channels as u64, layer.out_channels as u64);
    let bias = if layer.has_bias { co } else { 0 };
    let norm = match layer.norm {
        Norm::Instance => 2 * co,
        Norm::None => 0,
    };
    match layer.kind {
        LayerKind::Conv | LayerKind::Deconv => k2 * ci * co + bias + norm,
        // two convs, each followed by a norm
        LayerKind::ResBlock => 2 * (k2 * ci * co + bias + norm),
        // two depthwise+pointwise units, norm after the pointwise conv
        LayerKind::SeparatedResBlock => 2 * (k2 * ci + ci * co + bias + norm),
    }
}

/// MAC count of a single layer applied to `in_shape`.
pub fn layer_macs(layer: &LayerSpec, in_shape: TensorShape) -> Result<u64, CostError> {
    if in_shape.channels != layer.in_channels {
        return Err(CostError::ShapeMismatch {
            expected: layer.in_channels,
            found: in_shape.channels,
        });
    }
    let k2 = (layer.kernel * layer.kernel) as u64;
    let (ci, co) = (layer.in_channels as u64, layer.out_channels as u64);
    let (h, w) = (in_shape.height as u64, in_shape.width as u64);
    Ok(match layer.kind {
        LayerKind::Conv => {
            let (ho, wo) = if layer.stride == 1 { (h, w) } else { (h / 2, w / 2) };
            k2 * ci * co * ho * wo
        }
        // counted at output spatial size
        LayerKind::Deconv => k2 * ci * co * (2 * h) * (2 * w),
        LayerKind::ResBlock => 2 * k2 * ci * co * h * w,
        // each unit: depthwise K²·C_i plus pointwise C_i·C_o per pixel
        LayerKind::SeparatedResBlock => 2 * (k2 * ci + ci * co) * h * w,
    })
}

fn section_costs(
    out: &mut Vec<LayerCost>,
    name: &str,
    layers: &[LayerSpec],
    first_input: TensorShape,
    shapes: &[TensorShape],
) -> Result<(), CostError> {
    let mut input = first_input;
    for (i, layer) in layers.iter().enumerate() {
        let macs = layer_macs(layer, input)?;
        out.push(LayerCost {
            index: out.len(),
            label: format!("{}.{}.{}", name, i, layer.protocol()),
            kind: layer.kind.token(),
            params: layer_params(layer),
            macs,
        });
        input = shapes[i];
    }
    Ok(())
}

/// Aggregate [`layer_params`]/[`layer_macs`] over both branches, the trunk and
/// both heads of a generator.
pub fn network_cost(spec: &GeneratorSpec, input: TensorShape) -> Result<CostReport, CostError> {
    let trace: ShapeTrace = crate::netspec::infer_shapes(spec, input)?;
    let mut per_layer = Vec::new();
    section_costs(&mut per_layer, "branch_src", &spec.branch_src, trace.input, &trace.branch_src)?;
    section_costs(&mut per_layer, "branch_ref", &spec.branch_ref, trace.input, &trace.branch_ref)?;
    section_costs(&mut per_layer, "trunk", &spec.trunk, trace.merged, &trace.trunk)?;
    let trunk_out = *trace.trunk.last().expect("non-empty trunk");
    section_costs(&mut per_layer, "head_makeup", &spec.head_makeup, trunk_out, &trace.head_makeup)?;
    section_costs(&mut per_layer, "head_demakeup", &spec.head_demakeup, trunk_out, &trace.head_demakeup)?;
    let total_params: u64 = per_layer.iter().map(|l| l.params).sum();
    let total_macs: u64 = per_layer.iter().map(|l| l.macs).sum();
    Ok(CostReport { per_layer, total_params, total_macs, model_size_bytes: total_params * 4 })
}

/// Inputs of the closed-form decomposition reduction ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReductionInputs {
    pub kernel: usize,
    pub out_channels: usize,
    pub n_stand: usize,
    pub n_decom: usize,
}

/// Computation of `n_decom` decomposed blocks relative to `n_stand` standard
/// ones: `(N_decom/N_stand) · (1/K² + 1/C_o)`.
pub fn decomposition_reduction(r: ReductionInputs) -> f64 {
    debug_assert!(r.kernel >= 1 && r.out_channels >= 1 && r.n_stand >= 1 && r.n_decom >= 1);
    let k2 = (r.kernel * r.kernel) as f64;
    (r.n_decom as f64 / r.n_stand as f64) * (1.0 / k2 + 1.0 / r.out_channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{student_generator_spec, teacher_generator_spec};

    fn plain_conv(k: usize, ci: usize, co: usize, stride: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel: k,
            in_channels: ci,
            out_channels: co,
            stride,
            has_bias: false,
            norm: Norm::None,
            activation: crate::netspec::Activation::None,
        }
    }

    #[test]
    fn single_weight_conv() {
        let layer = plain_conv(1, 1, 1, 1);
        assert_eq!(layer_params(&layer), 1);
        assert_eq!(layer_macs(&layer, TensorShape::new(1, 1, 1)).unwrap(), 1);
    }

    #[test]
    fn residual_block_weight_counts() {
        let spec = teacher_generator_spec();
        let res = spec.trunk[1];
        // 2·(9·256·256) conv weights plus two affine norms
        assert_eq!(layer_params(&res), 1_179_648 + 2 * 2 * 256);
        let sep = student_generator_spec(9).unwrap().trunk[1];
        // 2·(depthwise 3·3·256 + pointwise 256·256) plus two affine norms
        assert_eq!(layer_params(&sep), 135_680 + 2 * 2 * 256);
    }

    #[test]
    fn mac_formula_instances() {
        let conv = plain_conv(3, 256, 256, 1);
        assert_eq!(layer_macs(&conv, TensorShape::new(256, 64, 64)).unwrap(), 2_415_919_104);
        let sep = student_generator_spec(9).unwrap().trunk[1];
        // one block is two units of (9·256 + 256·256)·4096 / 2
        assert_eq!(
            layer_macs(&sep, TensorShape::new(256, 64, 64)).unwrap(),
            2 * ((9 * 256 + 256 * 256) * 4096) as u64
        );
        assert_eq!(((9 * 256 + 256 * 256) * 4096) as u64, 277_872_640);
    }

    #[test]
    fn mac_shape_mismatch() {
        let conv = plain_conv(3, 256, 256, 1);
        assert!(matches!(
            layer_macs(&conv, TensorShape::new(128, 64, 64)),
            Err(CostError::ShapeMismatch { expected: 256, found: 128 })
        ));
    }

    #[test]
    fn table_costs_at_256() {
        let input = TensorShape::new(3, 256, 256);
        let teacher = network_cost(&teacher_generator_spec(), input).unwrap();
        let student = network_cost(&student_generator_spec(9).unwrap(), input).unwrap();
        // published totals: 9.23M / 3.13M params, 66.891G / 38.269G MACs
        let rel = |got: u64, want: f64| (got as f64 - want).abs() / want;
        assert!(rel(teacher.total_params, 9.23e6) < 0.03, "{}", teacher.total_params);
        assert!(rel(student.total_params, 3.13e6) < 0.03, "{}", student.total_params);
        assert!(rel(teacher.total_macs, 66.891e9) < 0.05, "{}", teacher.total_macs);
        assert!(rel(student.total_macs, 38.269e9) < 0.05, "{}", student.total_macs);
        let ratio = student.total_macs as f64 / teacher.total_macs as f64;
        assert!((ratio - 0.572).abs() < 0.03, "mac ratio {}", ratio);
        assert_eq!(teacher.model_size_bytes, teacher.total_params * 4);
        // totals recompute from per-layer entries
        assert_eq!(teacher.total_macs, teacher.per_layer.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(teacher.total_params, teacher.per_layer.iter().map(|l| l.params).sum::<u64>());
    }

    #[test]
    fn reduction_golden_values() {
        let paper = decomposition_reduction(ReductionInputs {
            kernel: 3,
            out_channels: 256,
            n_stand: 6,
            n_decom: 9,
        });
        assert!((paper - 0.1725).abs() < 0.0005, "{}", paper);
        let degenerate = decomposition_reduction(ReductionInputs {
            kernel: 1,
            out_channels: 1,
            n_stand: 1,
            n_decom: 1,
        });
        assert!((degenerate - 2.0).abs() < 1e-12);
        let equal_blocks = decomposition_reduction(ReductionInputs {
            kernel: 3,
            out_channels: 256,
            n_stand: 6,
            n_decom: 6,
        });
        assert!((equal_blocks - 0.11501736111111112).abs() < 1e-12, "{}", equal_blocks);
    }

    #[test]
    fn separated_to_standard_ratio_is_exact() {
        // MAC(separated)/MAC(standard) == 1/K² + 1/C_o as exact rationals,
        // checked by cross-multiplication over a grid of kernel/width choices.
        let shape = |c| TensorShape::new(c, 5, 7);
        for k in [1usize, 3, 5, 7] {
            for c in (1..=512).step_by(7).chain([256, 512]) {
                let std_block = LayerSpec { kind: LayerKind::ResBlock, ..plain_conv(k, c, c, 1) };
                let sep_block =
                    LayerSpec { kind: LayerKind::SeparatedResBlock, ..plain_conv(k, c, c, 1) };
                let a = layer_macs(&sep_block, shape(c)).unwrap() as u128;
                let b = layer_macs(&std_block, shape(c)).unwrap() as u128;
                let k2 = (k * k) as u128;
                // a/b == (k² + c)/(k²·c)
                assert_eq!(a * k2 * c as u128, b * (k2 + c as u128), "k={} c={}", k, c);
            }
        }
    }

    #[test]
    fn reduction_matches_block_mac_ratio_with_equal_counts() {
        let std_block = LayerSpec { kind: LayerKind::ResBlock, ..plain_conv(3, 256, 256, 1) };
        let sep_block = LayerSpec { kind: LayerKind::SeparatedResBlock, ..plain_conv(3, 256, 256, 1) };
        let shape = TensorShape::new(256, 64, 64);
        let ratio = layer_macs(&sep_block, shape).unwrap() as f64
            / layer_macs(&std_block, shape).unwrap() as f64;
        let reduction = decomposition_reduction(ReductionInputs {
            kernel: 3,
            out_channels: 256,
            n_stand: 4,
            n_decom: 4,
        });
        assert!((ratio - reduction).abs() < 1e-12);
    }

    #[test]
    fn cost_monotone_in_width_and_depth() {
        let input = TensorShape::new(3, 64, 64);
        let base = network_cost(&student_generator_spec(6).unwrap(), input).unwrap();
        let deeper = network_cost(&student_generator_spec(7).unwrap(), input).unwrap();
        assert!(deeper.total_params > base.total_params);
        assert!(deeper.total_macs > base.total_macs);

        // widen every channel width ×2 (keeping the 3-channel input/output)
        let mut wide = teacher_generator_spec();
        let widen = |l: &mut LayerSpec| {
            if l.in_channels > 3 {
                l.in_channels *= 2;
            }
            if l.out_channels > 3 {
                l.out_channels *= 2;
            }
        };
        wide.branch_src.iter_mut().for_each(widen);
        wide.branch_ref.iter_mut().for_each(widen);
        wide.trunk.iter_mut().for_each(widen);
        wide.head_makeup.iter_mut().for_each(widen);
        wide.head_demakeup.iter_mut().for_each(widen);
        let narrow = network_cost(&teacher_generator_spec(), input).unwrap();
        let wide_cost = network_cost(&wide, input).unwrap();
        assert!(wide_cost.total_params > narrow.total_params);
        assert!(wide_cost.total_macs > narrow.total_macs);
    }
}
