//! Compression toolkit for encoder–resnet–decoder makeup-transfer generators.
//!
//! The crate models the BeautyGAN-style two-branch generator as declarative
//! architecture data ([`netspec`]), prices any such architecture with an
//! analytic parameter/MAC cost model ([`costmodel`]), and implements the two
//! compression steps used to build the light student network:
//!
//! * encoder distillation through learnable 1×1 feature adapters ([`distill`]),
//! * depthwise/pointwise decomposition of the trunk residual blocks ([`blocks`]).
//!
//! A small reverse-mode tape ([`tape`]) over NCHW tensors backs the training
//! engine ([`engine`]), which runs the two-phase schedule (adversarial
//! training from scratch, then distillation against a frozen teacher) on the
//! CPU. [`losses`] holds the four generator losses plus the feature loss,
//! [`data`] the synthetic face corpus used for desk-scale runs, and
//! [`metrics`] the makeup/face distances, timing benchmark and ablation
//! harness.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std` feature
//! enables runtime SIMD selection in the GEMM kernel, wall-clock benchmarks
//! and `rayon`-parallel batch execution.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod blocks;
pub mod costmodel;
pub mod data;
pub mod distill;
pub mod engine;
pub mod losses;
mod mathf;
pub mod metrics;
pub mod model;
pub mod netspec;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use tensor::{Tensor, TensorShape};
