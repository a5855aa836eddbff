//! Declarative architecture descriptions for the two-branch makeup-transfer
//! generators, plus shape inference and a plain-text spec format.
//!
//! A generator is two encoder branches (non-makeup and reference) merged by
//! channel concatenation into a trunk (merge conv, residual blocks, two
//! transposed convs) that fans out into two heads (makeup and remove-makeup).
//! The teacher is the original BeautyGAN layout; the student narrows the
//! branches, adds a 1×1 expansion conv, and replaces the standard residual
//! blocks with depthwise/pointwise-separated ones.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::TensorShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LayerKind {
    Conv,
    Deconv,
    ResBlock,
    SeparatedResBlock,
}

impl LayerKind {
    pub fn token(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::ResBlock => "res",
            LayerKind::SeparatedResBlock => "separated_res",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

/// One row of the architecture table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub has_bias: bool,
    pub norm: Norm,
    pub activation: Activation,
}

impl LayerSpec {
    /// `conv7-3-64(1)`-style protocol string.
    pub fn protocol(&self) -> String {
        format!(
            "{}{}-{}-{}({})",
            self.kind.token(),
            self.kernel,
            self.in_channels,
            self.out_channels,
            self.stride
        )
    }

    /// Zero/reflection padding implied by the layer geometry: stride-1 layers
    /// keep their spatial size (reflection for the 7×7 stem), stride-2 layers
    /// halve (conv) or double (deconv) exactly.
    pub fn padding(&self) -> (usize, bool) {
        match self.kind {
            LayerKind::Conv if self.stride == 1 => ((self.kernel - 1) / 2, self.kernel == 7),
            LayerKind::Conv => ((self.kernel - 2) / 2, false),
            LayerKind::Deconv => ((self.kernel - 2) / 2, false),
            LayerKind::ResBlock | LayerKind::SeparatedResBlock => ((self.kernel - 1) / 2, false),
        }
    }

    fn validate(&self, at: &str) -> Result<(), NetspecError> {
        if self.kernel == 0 || self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(NetspecError::InvalidLayer { at: at.to_string(), reason: "zero field".to_string() });
        }
        match self.kind {
            LayerKind::ResBlock | LayerKind::SeparatedResBlock => {
                if self.in_channels != self.out_channels || self.stride != 1 {
                    return Err(NetspecError::InvalidLayer {
                        at: at.to_string(),
                        reason: "residual blocks require in == out channels and stride 1".to_string(),
                    });
                }
                if self.kernel % 2 == 0 {
                    return Err(NetspecError::InvalidLayer {
                        at: at.to_string(),
                        reason: "residual kernels must be odd".to_string(),
                    });
                }
            }
            LayerKind::Conv if self.stride == 1 && self.kernel % 2 == 0 => {
                return Err(NetspecError::InvalidLayer {
                    at: at.to_string(),
                    reason: "stride-1 conv kernels must be odd".to_string(),
                });
            }
            _ => {}
        }
        Ok(())
    }
}

/// The full two-branch / merge / two-head generator description.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeneratorSpec {
    pub branch_src: Vec<LayerSpec>,
    pub branch_ref: Vec<LayerSpec>,
    pub trunk: Vec<LayerSpec>,
    pub head_makeup: Vec<LayerSpec>,
    pub head_demakeup: Vec<LayerSpec>,
    pub n_res: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetspecError {
    #[error("invalid layer at {at}: {reason}")]
    InvalidLayer { at: String, reason: String },
    #[error("channel mismatch at {at}: expected {expected} input channels, found {found}")]
    ChannelMismatch { at: String, expected: usize, found: usize },
    #[error("input must have 3 channels, found {0}")]
    BadInputChannels(usize),
    #[error("spatial dims {h}x{w} not divisible by {div} (two stride-2 stages)")]
    IndivisibleInput { h: usize, w: usize, div: usize },
    #[error("n_decom must be >= 1")]
    BadResCount,
    #[error("n_res = {declared} does not match {actual} residual layers in trunk")]
    ResCountMismatch { declared: usize, actual: usize },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn norm_conv(kernel: usize, cin: usize, cout: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        kernel,
        in_channels: cin,
        out_channels: cout,
        stride,
        has_bias: false,
        norm: Norm::Instance,
        activation: Activation::Relu,
    }
}

fn norm_deconv(kernel: usize, cin: usize, cout: usize, stride: usize) -> LayerSpec {
    LayerSpec { kind: LayerKind::Deconv, ..norm_conv(kernel, cin, cout, stride) }
}

fn head_conv(kernel: usize, cin: usize, cout: usize, activation: Activation) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        kernel,
        in_channels: cin,
        out_channels: cout,
        stride: 1,
        has_bias: true,
        norm: Norm::None,
        activation,
    }
}

fn res_block(kind: LayerKind, channels: usize) -> LayerSpec {
    LayerSpec {
        kind,
        kernel: 3,
        in_channels: channels,
        out_channels: channels,
        stride: 1,
        has_bias: false,
        norm: Norm::Instance,
        activation: Activation::Relu,
    }
}

fn heads() -> (Vec<LayerSpec>, Vec<LayerSpec>) {
    let head = vec![
        head_conv(3, 64, 64, Activation::Relu),
        head_conv(3, 64, 64, Activation::Relu),
        head_conv(3, 64, 3, Activation::Tanh),
    ];
    (head.clone(), head)
}

fn trunk(res_kind: LayerKind, n_res: usize) -> Vec<LayerSpec> {
    let mut t = vec![norm_conv(4, 256, 256, 2)];
    t.extend((0..n_res).map(|_| res_block(res_kind, 256)));
    t.push(norm_deconv(4, 256, 128, 2));
    t.push(norm_deconv(4, 128, 64, 2));
    t
}

/// The original BeautyGAN generator: per branch conv7-3-64(1), conv4-64-128(2);
/// merge conv4-256-256(2); six standard res3-256-256 blocks; two stride-2
/// deconvs; two three-conv heads.
pub fn teacher_generator_spec() -> GeneratorSpec {
    let branch = vec![norm_conv(7, 3, 64, 1), norm_conv(4, 64, 128, 2)];
    let (head_makeup, head_demakeup) = heads();
    GeneratorSpec {
        branch_src: branch.clone(),
        branch_ref: branch,
        trunk: trunk(LayerKind::ResBlock, 6),
        head_makeup,
        head_demakeup,
        n_res: 6,
    }
}

/// The compressed student: narrow branches (conv7-3-16, conv4-16-32) expanded
/// back to 128 channels by a 1×1 conv, and `n_decom` separated residual
/// blocks in the trunk. Deconvs and heads are identical to the teacher.
pub fn student_generator_spec(n_decom: usize) -> Result<GeneratorSpec, NetspecError> {
    if n_decom < 1 {
        return Err(NetspecError::BadResCount);
    }
    let branch = vec![norm_conv(7, 3, 16, 1), norm_conv(4, 16, 32, 2), norm_conv(1, 32, 128, 1)];
    let (head_makeup, head_demakeup) = heads();
    Ok(GeneratorSpec {
        branch_src: branch.clone(),
        branch_ref: branch,
        trunk: trunk(LayerKind::SeparatedResBlock, n_decom),
        head_makeup,
        head_demakeup,
        n_res: n_decom,
    })
}

/// Ablation variant: decomposed trunk under the original full-width encoder.
/// This is the "not distilled" model — without encoder distillation there is
/// nothing to shrink the branches against, so they stay at teacher width.
pub fn undistilled_student_spec(n_decom: usize) -> Result<GeneratorSpec, NetspecError> {
    if n_decom < 1 {
        return Err(NetspecError::BadResCount);
    }
    let branch = vec![norm_conv(7, 3, 64, 1), norm_conv(4, 64, 128, 2)];
    let (head_makeup, head_demakeup) = heads();
    Ok(GeneratorSpec {
        branch_src: branch.clone(),
        branch_ref: branch,
        trunk: trunk(LayerKind::SeparatedResBlock, n_decom),
        head_makeup,
        head_demakeup,
        n_res: n_decom,
    })
}

/// Per-section output shapes produced by [`infer_shapes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: TensorShape,
    pub branch_src: Vec<TensorShape>,
    pub branch_ref: Vec<TensorShape>,
    /// Channel-concatenated merge of the two branch outputs.
    pub merged: TensorShape,
    pub trunk: Vec<TensorShape>,
    pub head_makeup: Vec<TensorShape>,
    pub head_demakeup: Vec<TensorShape>,
}

impl ShapeTrace {
    /// All per-layer output shapes in traversal order (branches, trunk, heads).
    pub fn flatten(&self) -> Vec<TensorShape> {
        let mut all = Vec::new();
        all.extend_from_slice(&self.branch_src);
        all.extend_from_slice(&self.branch_ref);
        all.extend_from_slice(&self.trunk);
        all.extend_from_slice(&self.head_makeup);
        all.extend_from_slice(&self.head_demakeup);
        all
    }

    pub fn output(&self) -> TensorShape {
        *self.head_makeup.last().expect("head never empty")
    }
}

fn layer_out_shape(layer: &LayerSpec, input: TensorShape, at: &str) -> Result<TensorShape, NetspecError> {
    if input.channels != layer.in_channels {
        return Err(NetspecError::ChannelMismatch {
            at: at.to_string(),
            expected: layer.in_channels,
            found: input.channels,
        });
    }
    let (h, w) = (input.height, input.width);
    let out = match layer.kind {
        LayerKind::Conv if layer.stride == 1 => TensorShape::new(layer.out_channels, h, w),
        LayerKind::Conv => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(NetspecError::IndivisibleInput { h, w, div: 2 });
            }
            TensorShape::new(layer.out_channels, h / 2, w / 2)
        }
        LayerKind::Deconv => TensorShape::new(layer.out_channels, h * 2, w * 2),
        LayerKind::ResBlock | LayerKind::SeparatedResBlock => TensorShape::new(layer.out_channels, h, w),
    };
    Ok(out)
}

fn walk_section(
    name: &str,
    layers: &[LayerSpec],
    mut shape: TensorShape,
) -> Result<Vec<TensorShape>, NetspecError> {
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let at = format!("{}[{}]", name, i);
        layer.validate(&at)?;
        shape = layer_out_shape(layer, shape, &at)?;
        out.push(shape);
    }
    Ok(out)
}

/// Propagate an input shape through every layer of the generator.
///
/// Requires a 3-channel input whose spatial dims are divisible by 4 (the two
/// stride-2 encoder stages). Reports channel mismatches with the offending
/// layer's location.
pub fn infer_shapes(spec: &GeneratorSpec, input: TensorShape) -> Result<ShapeTrace, NetspecError> {
    if input.channels != 3 {
        return Err(NetspecError::BadInputChannels(input.channels));
    }
    if input.height % 4 != 0 || input.width % 4 != 0 {
        return Err(NetspecError::IndivisibleInput { h: input.height, w: input.width, div: 4 });
    }
    let actual_res = spec
        .trunk
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::ResBlock | LayerKind::SeparatedResBlock))
        .count();
    if actual_res != spec.n_res {
        return Err(NetspecError::ResCountMismatch { declared: spec.n_res, actual: actual_res });
    }

    let branch_src = walk_section("branch_src", &spec.branch_src, input)?;
    let branch_ref = walk_section("branch_ref", &spec.branch_ref, input)?;
    let (s_out, r_out) = (
        *branch_src.last().ok_or(NetspecError::InvalidLayer {
            at: "branch_src".to_string(),
            reason: "empty branch".to_string(),
        })?,
        *branch_ref.last().ok_or(NetspecError::InvalidLayer {
            at: "branch_ref".to_string(),
            reason: "empty branch".to_string(),
        })?,
    );
    if (s_out.height, s_out.width) != (r_out.height, r_out.width) {
        return Err(NetspecError::InvalidLayer {
            at: "merge".to_string(),
            reason: "branch spatial sizes differ".to_string(),
        });
    }
    let merged = TensorShape::new(s_out.channels + r_out.channels, s_out.height, s_out.width);
    let trunk = walk_section("trunk", &spec.trunk, merged)?;
    let trunk_out = *trunk.last().ok_or(NetspecError::InvalidLayer {
        at: "trunk".to_string(),
        reason: "empty trunk".to_string(),
    })?;
    let head_makeup = walk_section("head_makeup", &spec.head_makeup, trunk_out)?;
    let head_demakeup = walk_section("head_demakeup", &spec.head_demakeup, trunk_out)?;
    Ok(ShapeTrace { input, branch_src, branch_ref, merged, trunk, head_makeup, head_demakeup })
}

// ---------------------------------------------------------------------------
// Plain-text spec format
// ---------------------------------------------------------------------------

const SECTIONS: [&str; 5] = ["branch_src", "branch_ref", "trunk", "head_makeup", "head_demakeup"];

impl GeneratorSpec {
    fn section(&self, name: &str) -> &[LayerSpec] {
        match name {
            "branch_src" => &self.branch_src,
            "branch_ref" => &self.branch_ref,
            "trunk" => &self.trunk,
            "head_makeup" => &self.head_makeup,
            "head_demakeup" => &self.head_demakeup,
            _ => unreachable!(),
        }
    }

    /// Serialize to the documented key/value text format; inverse of
    /// [`GeneratorSpec::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("format = 1\n");
        out.push_str(&format!("n_res = {}\n", self.n_res));
        for name in SECTIONS {
            out.push_str(&format!("[{}]\n", name));
            for layer in self.section(name) {
                let bias = if layer.has_bias { "yes" } else { "no" };
                let norm = match layer.norm {
                    Norm::Instance => "instance",
                    Norm::None => "none",
                };
                let act = match layer.activation {
                    Activation::Relu => "relu",
                    Activation::Tanh => "tanh",
                    Activation::None => "none",
                };
                out.push_str(&format!("{} bias={} norm={} act={}\n", layer.protocol(), bias, norm, act));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NetspecError> {
        let mut n_res = None;
        let mut sections: [Vec<LayerSpec>; 5] = Default::default();
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |reason: &str| NetspecError::Parse { line: lineno + 1, reason: reason.to_string() };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = Some(
                    SECTIONS.iter().position(|s| *s == name).ok_or_else(|| err("unknown section"))?,
                );
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                if current.is_none() {
                    match key.trim() {
                        "format" => continue,
                        "n_res" => {
                            n_res = Some(value.trim().parse().map_err(|_| err("bad n_res"))?);
                            continue;
                        }
                        _ => return Err(err("unknown key")),
                    }
                }
            }
            let sec = current.ok_or_else(|| err("layer outside a section"))?;
            sections[sec].push(parse_layer_line(line, lineno + 1)?);
        }
        let [branch_src, branch_ref, trunk, head_makeup, head_demakeup] = sections;
        let spec = GeneratorSpec {
            branch_src,
            branch_ref,
            trunk,
            head_makeup,
            head_demakeup,
            n_res: n_res.ok_or(NetspecError::Parse { line: 0, reason: "missing n_res".to_string() })?,
        };
        Ok(spec)
    }
}

fn parse_layer_line(line: &str, lineno: usize) -> Result<LayerSpec, NetspecError> {
    let err = |reason: &str| NetspecError::Parse { line: lineno, reason: reason.to_string() };
    let mut tokens = line.split_whitespace();
    let proto = tokens.next().ok_or_else(|| err("empty layer line"))?;
    let split = proto.find(|c: char| c.is_ascii_digit()).ok_or_else(|| err("missing kernel size"))?;
    let (kind_tok, rest) = proto.split_at(split);
    let kind = match kind_tok {
        "conv" => LayerKind::Conv,
        "deconv" => LayerKind::Deconv,
        "res" => LayerKind::ResBlock,
        "separated_res" => LayerKind::SeparatedResBlock,
        _ => return Err(err("unknown layer kind")),
    };
    let (dims, stride) = rest
        .split_once('(')
        .and_then(|(d, s)| s.strip_suffix(')').map(|s| (d, s)))
        .ok_or_else(|| err("missing (stride)"))?;
    let mut parts = dims.split('-');
    let kernel = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad kernel"))?;
    let in_channels = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad in_channels"))?;
    let out_channels =
        parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad out_channels"))?;
    let stride = stride.parse().map_err(|_| err("bad stride"))?;

    let mut layer = LayerSpec {
        kind,
        kernel,
        in_channels,
        out_channels,
        stride,
        has_bias: false,
        norm: Norm::Instance,
        activation: Activation::Relu,
    };
    for tok in tokens {
        let (key, value) = tok.split_once('=').ok_or_else(|| err("expected key=value"))?;
        match (key, value) {
            ("bias", "yes") => layer.has_bias = true,
            ("bias", "no") => layer.has_bias = false,
            ("norm", "instance") => layer.norm = Norm::Instance,
            ("norm", "none") => layer.norm = Norm::None,
            ("act", "relu") => layer.activation = Activation::Relu,
            ("act", "tanh") => layer.activation = Activation::Tanh,
            ("act", "none") => layer.activation = Activation::None,
            _ => return Err(err("unknown attribute")),
        }
    }
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_matches_published_table() {
        let spec = teacher_generator_spec();
        assert_eq!(spec.n_res, 6);
        let stem = spec.branch_src[0];
        assert_eq!((stem.kernel, stem.in_channels, stem.out_channels, stem.stride), (7, 3, 64, 1));
        assert_eq!(spec.branch_src[1].protocol(), "conv4-64-128(2)");
        assert_eq!(spec.trunk[0].protocol(), "conv4-256-256(2)");
        // concatenation arithmetic: 128 + 128 feeds the merge conv
        assert_eq!(
            spec.trunk[0].in_channels,
            spec.branch_src.last().unwrap().out_channels + spec.branch_ref.last().unwrap().out_channels
        );
        assert_eq!(spec.trunk.iter().filter(|l| l.kind == LayerKind::ResBlock).count(), 6);
        assert_eq!(spec.head_makeup.last().unwrap().protocol(), "conv3-64-3(1)");
        assert_eq!(spec.head_makeup.last().unwrap().activation, Activation::Tanh);
    }

    #[test]
    fn student_matches_published_table() {
        let spec = student_generator_spec(9).unwrap();
        assert_eq!(spec.n_res, 9);
        assert_eq!(spec.branch_src[0].protocol(), "conv7-3-16(1)");
        assert_eq!(spec.branch_src[1].protocol(), "conv4-16-32(2)");
        let expand = spec.branch_src[2];
        assert_eq!((expand.kernel, expand.in_channels, expand.out_channels), (1, 32, 128));
        assert_eq!(
            spec.trunk.iter().filter(|l| l.kind == LayerKind::SeparatedResBlock).count(),
            9
        );
    }

    #[test]
    fn student_block_count_is_a_parameter() {
        let spec = student_generator_spec(6).unwrap();
        assert_eq!(spec.trunk.iter().filter(|l| l.kind == LayerKind::SeparatedResBlock).count(), 6);
        let nine = student_generator_spec(9).unwrap();
        assert_eq!(spec.branch_src, nine.branch_src);
        assert_eq!(spec.head_makeup, nine.head_makeup);
        assert!(student_generator_spec(0).is_err());
    }

    #[test]
    fn teacher_student_differ_only_where_expected() {
        let t = teacher_generator_spec();
        let s = student_generator_spec(9).unwrap();
        // trunk deconvs and heads are field-for-field identical
        assert_eq!(&t.trunk[t.trunk.len() - 2..], &s.trunk[s.trunk.len() - 2..]);
        assert_eq!(t.head_makeup, s.head_makeup);
        assert_eq!(t.head_demakeup, s.head_demakeup);
        assert_eq!(t.trunk[0], s.trunk[0]);
    }

    #[test]
    fn shape_inference_teacher() {
        let spec = teacher_generator_spec();
        let trace = infer_shapes(&spec, TensorShape::new(3, 256, 256)).unwrap();
        // residual blocks see (256, 64, 64)
        assert_eq!(trace.trunk[1], TensorShape::new(256, 64, 64));
        assert_eq!(trace.output(), TensorShape::new(3, 256, 256));
    }

    #[test]
    fn shape_inference_student_branch_expansion() {
        let spec = student_generator_spec(9).unwrap();
        let trace = infer_shapes(&spec, TensorShape::new(3, 256, 256)).unwrap();
        assert_eq!(*trace.branch_src.last().unwrap(), TensorShape::new(128, 128, 128));
        assert_eq!(trace.output(), TensorShape::new(3, 256, 256));
    }

    #[test]
    fn round_trip_shapes_at_many_resolutions() {
        for k in [8usize, 9, 16, 33, 64, 128] {
            let input = TensorShape::new(3, 4 * k, 4 * k);
            for spec in [teacher_generator_spec(), student_generator_spec(9).unwrap()] {
                let trace = infer_shapes(&spec, input).unwrap();
                assert_eq!(trace.output(), input, "k={}", k);
                assert_eq!(trace.head_demakeup.last().unwrap(), &input);
            }
        }
    }

    #[test]
    fn channel_chain_is_consistent() {
        for spec in [teacher_generator_spec(), student_generator_spec(9).unwrap()] {
            for section in [&spec.branch_src, &spec.trunk, &spec.head_makeup] {
                for pair in section.windows(2) {
                    assert_eq!(pair[0].out_channels, pair[1].in_channels);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let spec = teacher_generator_spec();
        assert!(matches!(
            infer_shapes(&spec, TensorShape::new(4, 256, 256)),
            Err(NetspecError::BadInputChannels(4))
        ));
        assert!(matches!(
            infer_shapes(&spec, TensorShape::new(3, 250, 256)),
            Err(NetspecError::IndivisibleInput { .. })
        ));
        let mut broken = teacher_generator_spec();
        broken.trunk[0].in_channels = 200;
        assert!(matches!(
            infer_shapes(&broken, TensorShape::new(3, 256, 256)),
            Err(NetspecError::ChannelMismatch { .. })
        ));
        let mut miscounted = teacher_generator_spec();
        miscounted.n_res = 5;
        assert!(matches!(
            infer_shapes(&miscounted, TensorShape::new(3, 256, 256)),
            Err(NetspecError::ResCountMismatch { declared: 5, actual: 6 })
        ));
    }

    #[test]
    fn text_format_round_trip() {
        for spec in [teacher_generator_spec(), student_generator_spec(9).unwrap()] {
            let text = spec.to_text();
            let parsed = GeneratorSpec::from_text(&text).unwrap();
            assert_eq!(parsed, spec);
        }
        assert!(GeneratorSpec::from_text("nonsense").is_err());
    }
}
