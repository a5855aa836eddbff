//! Standard and depthwise/pointwise-decomposed residual blocks, and the
//! structural transform from one to the other.

use rand::Rng;

use crate::netspec::Norm;
use crate::ops::{ConvCfg, Exec};
use crate::tensor::Tensor;

/// Affine instance-norm parameters, stored (1,C,1,1).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        Self { gamma: Tensor::filled(1, channels, 1, 1, 1.0), beta: Tensor::zeros(1, channels, 1, 1) }
    }
}

/// A depthwise K×K filter bank followed by a 1×1 channel-mixing conv — the
/// decomposed replacement for one standard convolution.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeparatedConvUnit {
    /// One K×K filter per input channel, shape (C,1,K,K).
    pub depthwise: Tensor,
    /// 1×1 mixing matrix, shape (C_o,C_i,1,1).
    pub pointwise: Tensor,
    /// Applied after the pointwise conv.
    pub norm: Option<NormParams>,
}

impl SeparatedConvUnit {
    pub fn channels_in(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn channels_out(&self) -> usize {
        self.pointwise.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.depthwise.shape()[2]
    }

    pub fn depthwise_params(&self) -> u64 {
        self.depthwise.len() as u64
    }

    pub fn pointwise_params(&self) -> u64 {
        self.pointwise.len() as u64
    }

    pub fn param_count(&self) -> u64 {
        let norm = self.norm.as_ref().map_or(0, |n| (n.gamma.len() + n.beta.len()) as u64);
        self.depthwise_params() + self.pointwise_params() + norm
    }

    /// MACs for one application on an H×W map (depthwise plus pointwise).
    pub fn mac_count(&self, h: usize, w: usize) -> u64 {
        let k2 = (self.kernel() * self.kernel()) as u64;
        let (ci, co) = (self.channels_in() as u64, self.channels_out() as u64);
        (k2 * ci + ci * co) * (h * w) as u64
    }

    pub fn forward<E: Exec>(&self, e: &mut E, x: E::V, trainable: bool) -> E::V {
        let dw = e.leaf(&self.depthwise, trainable);
        let pw = e.leaf(&self.pointwise, trainable);
        let mut y = e.depthwise(x, dw);
        y = e.conv2d(y, pw, None, ConvCfg::new(1, 0));
        if let Some(norm) = &self.norm {
            let g = e.leaf(&norm.gamma, trainable);
            let b = e.leaf(&norm.beta, trainable);
            y = e.instance_norm(y, g, b);
        }
        y
    }
}

/// Replace a K×K, C_i→C_o standard convolution by a freshly initialized
/// depthwise+pointwise pair. The pair is a re-architecture trained from
/// scratch, not a function-preserving factorization of existing weights.
pub fn decompose_conv<R: Rng>(
    kernel: usize,
    c_in: usize,
    c_out: usize,
    norm: Norm,
    rng: &mut R,
) -> SeparatedConvUnit {
    assert!(kernel >= 1 && c_in >= 1 && c_out >= 1);
    SeparatedConvUnit {
        depthwise: Tensor::randn(c_in, 1, kernel, kernel, 0.02, rng),
        pointwise: Tensor::randn(c_out, c_in, 1, 1, 0.02, rng),
        norm: match norm {
            Norm::Instance => Some(NormParams::identity(c_out)),
            Norm::None => None,
        },
    }
}

/// conv–norm–relu–conv–norm with an identity skip.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StandardResBlock {
    pub conv1: Tensor,
    pub norm1: Option<NormParams>,
    pub conv2: Tensor,
    pub norm2: Option<NormParams>,
}

impl StandardResBlock {
    pub fn init<R: Rng>(channels: usize, kernel: usize, norm: Norm, rng: &mut R) -> Self {
        let mk_norm = || match norm {
            Norm::Instance => Some(NormParams::identity(channels)),
            Norm::None => None,
        };
        Self {
            conv1: Tensor::randn(channels, channels, kernel, kernel, 0.02, rng),
            norm1: mk_norm(),
            conv2: Tensor::randn(channels, channels, kernel, kernel, 0.02, rng),
            norm2: mk_norm(),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.shape()[0]
    }
}

/// Residual block with both inner convolutions decomposed.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeparatedResBlock {
    pub unit1: SeparatedConvUnit,
    pub unit2: SeparatedConvUnit,
}

impl SeparatedResBlock {
    pub fn init<R: Rng>(channels: usize, kernel: usize, norm: Norm, rng: &mut R) -> Self {
        Self {
            unit1: decompose_conv(kernel, channels, channels, norm, rng),
            unit2: decompose_conv(kernel, channels, channels, norm, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.unit1.channels_in()
    }

    pub fn param_count(&self) -> u64 {
        self.unit1.param_count() + self.unit2.param_count()
    }
}

/// x + f(x) with f = conv–norm–relu–conv–norm.
pub fn standard_res_forward<E: Exec>(e: &mut E, x: E::V, block: &StandardResBlock, trainable: bool) -> E::V {
    let k = block.conv1.shape()[2];
    let cfg = ConvCfg::new(1, (k - 1) / 2);
    let w1 = e.leaf(&block.conv1, trainable);
    let mut y = e.conv2d(x.clone(), w1, None, cfg);
    if let Some(n) = &block.norm1 {
        let (g, b) = (e.leaf(&n.gamma, trainable), e.leaf(&n.beta, trainable));
        y = e.instance_norm(y, g, b);
    }
    y = e.relu(y);
    let w2 = e.leaf(&block.conv2, trainable);
    y = e.conv2d(y, w2, None, cfg);
    if let Some(n) = &block.norm2 {
        let (g, b) = (e.leaf(&n.gamma, trainable), e.leaf(&n.beta, trainable));
        y = e.instance_norm(y, g, b);
    }
    e.add(x, y)
}

/// x + f(x) with f = (depthwise→pointwise)–norm–relu–(depthwise→pointwise)–norm.
pub fn separated_res_forward<E: Exec>(
    e: &mut E,
    x: E::V,
    block: &SeparatedResBlock,
    trainable: bool,
) -> E::V {
    let mut y = block.unit1.forward(e, x.clone(), trainable);
    y = e.relu(y);
    y = block.unit2.forward(e, y, trainable);
    e.add(x, y)
}
