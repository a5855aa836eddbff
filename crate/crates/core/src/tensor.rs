//! Dense NCHW tensors backed by `Vec<f32>`, plus the per-layer shape triple
//! used by the architecture specs and the cost model.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

/// Channels/height/width of a single feature map (the batch dimension is
/// carried by [`Tensor`] itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        debug_assert!(channels >= 1 && height >= 1 && width >= 1);
        Self { channels, height, width }
    }

    pub fn num_elements(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl core::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A dense float tensor in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { shape: [n, c, h, w], data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { shape: [n, c, h, w], data }
    }

    /// Single scalar wrapped as a (1,1,1,1) tensor.
    pub fn scalar(v: f32) -> Self {
        Self { shape: [1, 1, 1, 1], data: vec![v] }
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng>(n: usize, c: usize, h: usize, w: usize, std: f32, rng: &mut R) -> Self {
        let data = (0..n * c * h * w)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape: [n, c, h, w], data }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f32) -> Self {
        Self { shape: [n, c, h, w], data: vec![v; n * c * h * w] }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn chw(&self) -> TensorShape {
        TensorShape::new(self.shape[1], self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size in elements of one batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Borrow batch item `i` as a flat slice.
    #[inline]
    pub fn item(&self, i: usize) -> &[f32] {
        let sz = self.item_len();
        &self.data[i * sz..(i + 1) * sz]
    }

    #[inline]
    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let sz = self.item_len();
        &mut self.data[i * sz..(i + 1) * sz]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Stack single-item tensors along the batch dimension.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let [n0, c, h, w] = items[0].shape;
        assert_eq!(n0, 1, "stack expects single-item tensors");
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            assert_eq!(t.shape, [1, c, h, w]);
            data.extend_from_slice(&t.data);
        }
        Tensor { shape: [items.len(), c, h, w], data }
    }

    /// Extract batch item `i` as a fresh (1,C,H,W) tensor.
    pub fn slice_item(&self, i: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor { shape: [1, c, h, w], data: self.item(i).to_vec() }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Raw little-endian bytes of the payload, for digests and checkpoints.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}
