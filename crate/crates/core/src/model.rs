//! Weight-carrying networks built from [`GeneratorSpec`]s: the two-branch
//! generator, the 70×70 patch discriminator, and pluggable perceptual
//! feature extractors.
//!
//! Forward passes are written once against [`Exec`] and run either eagerly
//! (inference, frozen-teacher features) or on the autograd tape (training).
//! Parameters are registered up front and threaded through the walk so the
//! same leaves serve both the transfer pass and the cycle pass of a step.

use alloc::vec::Vec;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::blocks::{NormParams, SeparatedResBlock, StandardResBlock};
use crate::netspec::{Activation, GeneratorSpec, LayerKind, LayerSpec, Norm};
use crate::ops::{ConvCfg, Exec, RawExec};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("parameter list length mismatch: expected {expected}, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("parameter {index} shape mismatch")]
    ParamShape { index: usize },
}

/// One conv/deconv layer with its optional bias and norm parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvLayerW {
    pub spec: LayerSpec,
    pub w: Tensor,
    pub bias: Option<Tensor>,
    pub norm: Option<NormParams>,
}

impl ConvLayerW {
    fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Self {
        let k = spec.kernel;
        let w = match spec.kind {
            LayerKind::Conv => Tensor::randn(spec.out_channels, spec.in_channels, k, k, 0.02, rng),
            LayerKind::Deconv => Tensor::randn(spec.in_channels, spec.out_channels, k, k, 0.02, rng),
            _ => unreachable!("residual layers use block types"),
        };
        let bias = spec.has_bias.then(|| Tensor::zeros(1, spec.out_channels, 1, 1));
        let norm = match spec.norm {
            Norm::Instance => Some(NormParams::identity(spec.out_channels)),
            Norm::None => None,
        };
        Self { spec, w, bias, norm }
    }
}

/// A generator layer: plain conv/deconv or one of the residual block kinds.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LayerW {
    Plain(ConvLayerW),
    Res(StandardResBlock),
    Sep(SeparatedResBlock),
}

impl LayerW {
    fn init<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Self {
        match spec.kind {
            LayerKind::Conv | LayerKind::Deconv => LayerW::Plain(ConvLayerW::init(*spec, rng)),
            LayerKind::ResBlock => {
                LayerW::Res(StandardResBlock::init(spec.in_channels, spec.kernel, spec.norm, rng))
            }
            LayerKind::SeparatedResBlock => {
                LayerW::Sep(SeparatedResBlock::init(spec.in_channels, spec.kernel, spec.norm, rng))
            }
        }
    }

    fn visit(&self, f: &mut impl FnMut(&Tensor)) {
        match self {
            LayerW::Plain(l) => {
                f(&l.w);
                if let Some(b) = &l.bias {
                    f(b);
                }
                if let Some(n) = &l.norm {
                    f(&n.gamma);
                    f(&n.beta);
                }
            }
            LayerW::Res(b) => {
                f(&b.conv1);
                if let Some(n) = &b.norm1 {
                    f(&n.gamma);
                    f(&n.beta);
                }
                f(&b.conv2);
                if let Some(n) = &b.norm2 {
                    f(&n.gamma);
                    f(&n.beta);
                }
            }
            LayerW::Sep(b) => {
                for u in [&b.unit1, &b.unit2] {
                    f(&u.depthwise);
                    f(&u.pointwise);
                    if let Some(n) = &u.norm {
                        f(&n.gamma);
                        f(&n.beta);
                    }
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        match self {
            LayerW::Plain(l) => {
                f(&mut l.w);
                if let Some(b) = &mut l.bias {
                    f(b);
                }
                if let Some(n) = &mut l.norm {
                    f(&mut n.gamma);
                    f(&mut n.beta);
                }
            }
            LayerW::Res(b) => {
                f(&mut b.conv1);
                if let Some(n) = &mut b.norm1 {
                    f(&mut n.gamma);
                    f(&mut n.beta);
                }
                f(&mut b.conv2);
                if let Some(n) = &mut b.norm2 {
                    f(&mut n.gamma);
                    f(&mut n.beta);
                }
            }
            LayerW::Sep(b) => {
                for u in [&mut b.unit1, &mut b.unit2] {
                    f(&mut u.depthwise);
                    f(&mut u.pointwise);
                    if let Some(n) = &mut u.norm {
                        f(&mut n.gamma);
                        f(&mut n.beta);
                    }
                }
            }
        }
    }

    /// Forward one layer, pulling its registered leaves off the cursor in
    /// the exact order [`LayerW::visit`] emits them.
    fn forward<E: Exec>(&self, e: &mut E, vars: &mut VarCursor<'_, E::V>, x: E::V) -> E::V {
        match self {
            LayerW::Plain(l) => {
                let (pad, reflect) = l.spec.padding();
                let w = vars.next();
                let bias = l.bias.is_some().then(|| vars.next());
                let mut y = match l.spec.kind {
                    LayerKind::Conv => {
                        let cfg = if reflect {
                            ConvCfg::reflect(l.spec.stride, pad)
                        } else {
                            ConvCfg::new(l.spec.stride, pad)
                        };
                        e.conv2d(x, w, bias, cfg)
                    }
                    LayerKind::Deconv => e.deconv2d(x, w, bias, l.spec.stride, pad),
                    _ => unreachable!(),
                };
                if l.norm.is_some() {
                    let (g, b) = (vars.next(), vars.next());
                    y = e.instance_norm(y, g, b);
                }
                match l.spec.activation {
                    Activation::Relu => e.relu(y),
                    Activation::Tanh => e.tanh(y),
                    Activation::None => y,
                }
            }
            LayerW::Res(b) => {
                let k = b.conv1.shape()[2];
                let cfg = ConvCfg::new(1, (k - 1) / 2);
                let w1 = vars.next();
                let mut y = e.conv2d(x.clone(), w1, None, cfg);
                if b.norm1.is_some() {
                    let (g, bb) = (vars.next(), vars.next());
                    y = e.instance_norm(y, g, bb);
                }
                y = e.relu(y);
                let w2 = vars.next();
                y = e.conv2d(y, w2, None, cfg);
                if b.norm2.is_some() {
                    let (g, bb) = (vars.next(), vars.next());
                    y = e.instance_norm(y, g, bb);
                }
                e.add(x, y)
            }
            LayerW::Sep(b) => {
                let inner = |e: &mut E, vars: &mut VarCursor<'_, E::V>, x: E::V, unit: &crate::blocks::SeparatedConvUnit| {
                    let dw = vars.next();
                    let pw = vars.next();
                    let mut y = e.depthwise(x, dw);
                    y = e.conv2d(y, pw, None, ConvCfg::new(1, 0));
                    if unit.norm.is_some() {
                        let (g, bb) = (vars.next(), vars.next());
                        y = e.instance_norm(y, g, bb);
                    }
                    y
                };
                let mut y = inner(e, vars, x.clone(), &b.unit1);
                y = e.relu(y);
                y = inner(e, vars, y, &b.unit2);
                e.add(x, y)
            }
        }
    }
}

/// Registered parameter leaves in visit order.
pub struct ModelVars<V>(pub Vec<V>);

struct VarCursor<'a, V: Clone> {
    vars: &'a [V],
    pos: usize,
}

impl<'a, V: Clone> VarCursor<'a, V> {
    fn next(&mut self) -> V {
        let v = self.vars[self.pos].clone();
        self.pos += 1;
        v
    }
}

/// Outputs of one generator pass.
pub struct GenForward<V> {
    pub makeup: V,
    pub demakeup: V,
    /// Per-layer outputs of the non-makeup encoder branch.
    pub src_feats: Vec<V>,
    /// Per-layer outputs of the reference encoder branch.
    pub ref_feats: Vec<V>,
}

/// A generator instance: weights laid out exactly as its [`GeneratorSpec`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Generator {
    pub spec: GeneratorSpec,
    branch_src: Vec<LayerW>,
    branch_ref: Vec<LayerW>,
    trunk: Vec<LayerW>,
    head_makeup: Vec<LayerW>,
    head_demakeup: Vec<LayerW>,
}

impl Generator {
    pub fn init<R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> Self {
        let build = |layers: &[LayerSpec], rng: &mut R| {
            layers.iter().map(|l| LayerW::init(l, rng)).collect::<Vec<_>>()
        };
        Self {
            spec: spec.clone(),
            branch_src: build(&spec.branch_src, rng),
            branch_ref: build(&spec.branch_ref, rng),
            trunk: build(&spec.trunk, rng),
            head_makeup: build(&spec.head_makeup, rng),
            head_demakeup: build(&spec.head_demakeup, rng),
        }
    }

    fn sections(&self) -> [&Vec<LayerW>; 5] {
        [&self.branch_src, &self.branch_ref, &self.trunk, &self.head_makeup, &self.head_demakeup]
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&Tensor)) {
        for section in self.sections() {
            for layer in section {
                layer.visit(f);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for section in
            [&mut self.branch_src, &mut self.branch_ref, &mut self.trunk, &mut self.head_makeup, &mut self.head_demakeup]
        {
            for layer in section {
                layer.visit_mut(f);
            }
        }
    }

    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit_params(&mut |t| total += t.len() as u64);
        total
    }

    pub fn export_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |t| out.push(t.clone()));
        out
    }

    pub fn import_params(&mut self, params: &[Tensor]) -> Result<(), ModelError> {
        let mut count = 0usize;
        self.visit_params(&mut |_| count += 1);
        if count != params.len() {
            return Err(ModelError::ParamCount { expected: count, found: params.len() });
        }
        let mut i = 0usize;
        let mut bad = None;
        self.visit_params_mut(&mut |t| {
            if t.shape() != params[i].shape() && bad.is_none() {
                bad = Some(i);
            } else {
                *t = params[i].clone();
            }
            i += 1;
        });
        match bad {
            Some(index) => Err(ModelError::ParamShape { index }),
            None => Ok(()),
        }
    }

    /// SHA-256 over all weights in visit order.
    pub fn weights_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |t| hasher.update(t.le_bytes()));
        hasher.finalize().into()
    }

    /// Register every parameter on the executor (in visit order).
    pub fn register<E: Exec>(&self, e: &mut E, trainable: bool) -> ModelVars<E::V> {
        let mut vars = Vec::new();
        self.visit_params(&mut |t| vars.push(e.leaf(t, trainable)));
        ModelVars(vars)
    }

    /// One full pass: both branches, concat merge, trunk, both heads.
    pub fn forward<E: Exec>(
        &self,
        e: &mut E,
        vars: &ModelVars<E::V>,
        src: E::V,
        reference: E::V,
    ) -> GenForward<E::V> {
        let mut cursor = VarCursor { vars: &vars.0, pos: 0 };
        let mut src_feats = Vec::with_capacity(self.branch_src.len());
        let mut x = src;
        for layer in &self.branch_src {
            x = layer.forward(e, &mut cursor, x);
            src_feats.push(x.clone());
        }
        let mut ref_feats = Vec::with_capacity(self.branch_ref.len());
        let mut r = reference;
        for layer in &self.branch_ref {
            r = layer.forward(e, &mut cursor, r);
            ref_feats.push(r.clone());
        }
        let mut t = e.concat_channels(x, r);
        for layer in &self.trunk {
            t = layer.forward(e, &mut cursor, t);
        }
        let mut makeup = t.clone();
        for layer in &self.head_makeup {
            makeup = layer.forward(e, &mut cursor, makeup);
        }
        let mut demakeup = t;
        for layer in &self.head_demakeup {
            demakeup = layer.forward(e, &mut cursor, demakeup);
        }
        debug_assert_eq!(cursor.pos, vars.0.len(), "forward consumed every registered leaf");
        GenForward { makeup, demakeup, src_feats, ref_feats }
    }

    /// Deterministic inference pass; returns (makeup, demakeup) in [-1,1].
    pub fn infer(&self, src: &Tensor, reference: &Tensor, par: bool) -> (Tensor, Tensor) {
        let (m, d, _) = self.infer_counted(src, reference, par);
        (m, d)
    }

    /// Inference plus the executed-MAC tally of the convolution kernels.
    pub fn infer_counted(&self, src: &Tensor, reference: &Tensor, par: bool) -> (Tensor, Tensor, u64) {
        let mut e = RawExec::new(par);
        let vars = self.register(&mut e, false);
        let out = self.forward(&mut e, &vars, src.clone(), reference.clone());
        (out.makeup, out.demakeup, e.macs)
    }

    /// Encoder-branch feature maps only (the distillation tap surface);
    /// runs eagerly, no gradients.
    pub fn encoder_features(&self, src: &Tensor, reference: &Tensor, par: bool) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut e = RawExec::new(par);
        let mut src_feats = Vec::new();
        let mut cursor_vars = Vec::new();
        for layer in self.branch_src.iter().chain(&self.branch_ref) {
            layer.visit(&mut |t| cursor_vars.push(t.clone()));
        }
        let mut cursor = VarCursor { vars: &cursor_vars, pos: 0 };
        let mut x = src.clone();
        for layer in &self.branch_src {
            x = layer.forward(&mut e, &mut cursor, x);
            src_feats.push(x.clone());
        }
        let mut ref_feats = Vec::new();
        let mut r = reference.clone();
        for layer in &self.branch_ref {
            r = layer.forward(&mut e, &mut cursor, r);
            ref_feats.push(r.clone());
        }
        (src_feats, ref_feats)
    }
}

// ---------------------------------------------------------------------------
// Patch discriminator
// ---------------------------------------------------------------------------

/// One 70×70 PatchGAN layer: 4×4 conv, optional instance norm, leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct DiscLayer {
    w: Tensor,
    bias: Option<Tensor>,
    norm: Option<NormParams>,
    stride: usize,
    act: bool,
}

/// Least-squares PatchGAN discriminator: C64–C128–C256–C512–C1, 4×4 kernels.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchDiscriminator {
    layers: Vec<DiscLayer>,
}

impl PatchDiscriminator {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let conv = |ci: usize, co: usize, stride: usize, norm: bool, act: bool, rng: &mut R| DiscLayer {
            w: Tensor::randn(co, ci, 4, 4, 0.02, rng),
            bias: (!norm).then(|| Tensor::zeros(1, co, 1, 1)),
            norm: norm.then(|| NormParams::identity(co)),
            stride,
            act,
        };
        Self {
            layers: alloc::vec![
                conv(3, 64, 2, false, true, rng),
                conv(64, 128, 2, true, true, rng),
                conv(128, 256, 2, true, true, rng),
                conv(256, 512, 1, true, true, rng),
                conv(512, 1, 1, false, false, rng),
            ],
        }
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&Tensor)) {
        for l in &self.layers {
            f(&l.w);
            if let Some(b) = &l.bias {
                f(b);
            }
            if let Some(n) = &l.norm {
                f(&n.gamma);
                f(&n.beta);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for l in &mut self.layers {
            f(&mut l.w);
            if let Some(b) = &mut l.bias {
                f(b);
            }
            if let Some(n) = &mut l.norm {
                f(&mut n.gamma);
                f(&mut n.beta);
            }
        }
    }

    pub fn export_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |t| out.push(t.clone()));
        out
    }

    pub fn import_params(&mut self, params: &[Tensor]) -> Result<(), ModelError> {
        let mut count = 0usize;
        self.visit_params(&mut |_| count += 1);
        if count != params.len() {
            return Err(ModelError::ParamCount { expected: count, found: params.len() });
        }
        let mut i = 0usize;
        self.visit_params_mut(&mut |t| {
            *t = params[i].clone();
            i += 1;
        });
        Ok(())
    }

    pub fn register<E: Exec>(&self, e: &mut E, trainable: bool) -> ModelVars<E::V> {
        let mut vars = Vec::new();
        self.visit_params(&mut |t| vars.push(e.leaf(t, trainable)));
        ModelVars(vars)
    }

    /// Patch map of realness scores (no final activation; LSGAN regresses it).
    pub fn forward<E: Exec>(&self, e: &mut E, vars: &ModelVars<E::V>, x: E::V) -> E::V {
        let mut cursor = VarCursor { vars: &vars.0, pos: 0 };
        let mut y = x;
        for l in &self.layers {
            let w = cursor.next();
            let bias = l.bias.is_some().then(|| cursor.next());
            y = e.conv2d(y, w, bias, ConvCfg::new(l.stride, 1));
            if l.norm.is_some() {
                let (g, b) = (cursor.next(), cursor.next());
                y = e.instance_norm(y, g, b);
            }
            if l.act {
                y = e.leaky_relu(y, 0.2);
            }
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Perceptual feature extractors
// ---------------------------------------------------------------------------

/// Maps an image to the feature space used by the perceptual loss and the
/// face-distance metric. Implementations must be deterministic.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn extract_raw(&self, x: &Tensor) -> Tensor;
    /// Tape version used when gradients must flow back into `x`; extractor
    /// weights are constants.
    fn extract_tape(&self, tape: &mut Tape, x: VarId) -> VarId;
}

/// Identity feature map: the perceptual loss degenerates to image MSE.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn extract_raw(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn extract_tape(&self, _tape: &mut Tape, x: VarId) -> VarId {
        x
    }
}

/// Small fixed two-conv feature stack with seeded random weights; the desk
/// default where no pretrained backbone is available.
pub struct TinyConvExtractor {
    conv1: Tensor,
    conv2: Tensor,
}

impl TinyConvExtractor {
    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self {
            conv1: Tensor::randn(8, 3, 3, 3, 0.15, &mut rng),
            conv2: Tensor::randn(16, 8, 3, 3, 0.15, &mut rng),
        }
    }

    fn run<E: Exec>(&self, e: &mut E, x: E::V) -> E::V {
        let cfg = ConvCfg::new(2, 1);
        let w1 = e.leaf(&self.conv1, false);
        let mut y = e.conv2d(x, w1, None, cfg);
        y = e.relu(y);
        let w2 = e.leaf(&self.conv2, false);
        y = e.conv2d(y, w2, None, cfg);
        y
    }
}

impl FeatureExtractor for TinyConvExtractor {
    fn name(&self) -> &str {
        "tiny-conv-seeded"
    }

    fn extract_raw(&self, x: &Tensor) -> Tensor {
        let mut e = RawExec::new(false);
        self.run(&mut e, x.clone())
    }

    fn extract_tape(&self, tape: &mut Tape, x: VarId) -> VarId {
        self.run(tape, x)
    }
}

/// VGG16 feature stack truncated at its 18th module (the conv4_1 output),
/// i.e. conv1_1..conv3_3 with 2×2 max pools, then conv4_1. Weights are
/// seeded random stand-ins; swap in pretrained tensors via `with_params`
/// when available.
pub struct VggSliceExtractor {
    convs: Vec<(Tensor, Tensor)>,
    /// Pool after these conv indices (0-based).
    pools: [usize; 3],
}

impl VggSliceExtractor {
    const PLAN: [(usize, usize); 8] =
        [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256), (256, 512)];

    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let convs = Self::PLAN
            .iter()
            .map(|&(ci, co)| (Tensor::randn(co, ci, 3, 3, 0.05, &mut rng), Tensor::zeros(1, co, 1, 1)))
            .collect();
        Self { convs, pools: [1, 3, 6] }
    }

    pub fn with_params(mut self, params: Vec<(Tensor, Tensor)>) -> Result<Self, ModelError> {
        if params.len() != self.convs.len() {
            return Err(ModelError::ParamCount { expected: self.convs.len(), found: params.len() });
        }
        for (i, ((w, b), (ew, eb))) in params.iter().zip(&self.convs).enumerate() {
            if w.shape() != ew.shape() || b.shape() != eb.shape() {
                return Err(ModelError::ParamShape { index: i });
            }
        }
        self.convs = params;
        Ok(self)
    }

    fn run<E: Exec>(&self, e: &mut E, x: E::V) -> E::V {
        let cfg = ConvCfg::new(1, 1);
        let mut y = x;
        let last = self.convs.len() - 1;
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let wv = e.leaf(w, false);
            let bv = e.leaf(b, false);
            y = e.conv2d(y, wv, Some(bv), cfg);
            if i < last {
                y = e.relu(y);
            }
            if self.pools.contains(&i) {
                y = e.max_pool2(y);
            }
        }
        y
    }
}

impl FeatureExtractor for VggSliceExtractor {
    fn name(&self) -> &str {
        "vgg16-slice18-seeded"
    }

    fn extract_raw(&self, x: &Tensor) -> Tensor {
        let mut e = RawExec::new(false);
        self.run(&mut e, x.clone())
    }

    fn extract_tape(&self, tape: &mut Tape, x: VarId) -> VarId {
        self.run(tape, x)
    }
}
