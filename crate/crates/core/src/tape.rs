//! A small reverse-mode tape over NCHW tensors.
//!
//! Operations compute eagerly and record enough state to run the backward
//! pass. Leaves are either parameters (gradients collected) or constants
//! (gradient flow stops, e.g. frozen-teacher features and loss targets).

use alloc::vec::Vec;

use crate::ops::{self, ConvCfg, Exec};
use crate::tensor::Tensor;

pub type VarId = usize;

enum Node {
    Leaf,
    Conv2d { x: VarId, w: VarId, b: Option<VarId>, cfg: ConvCfg },
    Deconv2d { x: VarId, w: VarId, b: Option<VarId>, stride: usize, pad: usize },
    Depthwise { x: VarId, w: VarId },
    InstanceNorm { x: VarId, gamma: VarId, beta: VarId, mean: Tensor, rstd: Tensor },
    Relu { x: VarId },
    LeakyRelu { x: VarId, slope: f32 },
    Tanh { x: VarId },
    Add { a: VarId, b: VarId },
    ConcatC { a: VarId, b: VarId, ca: usize },
    Scale { x: VarId, k: f32 },
    SumAll { xs: Vec<VarId> },
    MeanSqScalar { x: VarId, c: f32 },
    Mse { x: VarId, target: Tensor },
    Mae { x: VarId, target: Tensor },
    MaskedMse { x: VarId, target: Tensor, mask: Tensor, denom: f32 },
    FrobNormMean { x: VarId, norms: Tensor },
    MaxPool2 { x: VarId, idx: Vec<u32> },
}

pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    params: Vec<VarId>,
    par: bool,
}

impl Tape {
    pub fn new(par: bool) -> Self {
        Self {
            nodes: Vec::new(),
            vals: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            par,
        }
    }

    fn push(&mut self, node: Node, val: Tensor, needs: bool) -> VarId {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.vals.push(val);
        self.needs_grad.push(needs);
        id
    }

    /// Trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, t: Tensor) -> VarId {
        let id = self.push(Node::Leaf, t, true);
        self.params.push(id);
        id
    }

    /// Constant leaf; gradient flow stops here.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Node::Leaf, t, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.vals[v]
    }

    pub fn scalar_value(&self, v: VarId) -> f32 {
        self.vals[v].data()[0]
    }

    pub fn grad(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }

    /// Parameters registered so far, in registration order.
    pub fn registered_params(&self) -> &[VarId] {
        &self.params
    }

    pub fn param_watermark(&self) -> usize {
        self.params.len()
    }

    fn needs(&self, v: VarId) -> bool {
        self.needs_grad[v]
    }

    // -- operations ---------------------------------------------------------

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, cfg: ConvCfg) -> VarId {
        let y = ops::conv2d(&self.vals[x], &self.vals[w], b.map(|b| &self.vals[b]), cfg, self.par);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Node::Conv2d { x, w, b, cfg }, y, needs)
    }

    pub fn deconv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, stride: usize, pad: usize) -> VarId {
        let y = ops::deconv2d(
            &self.vals[x],
            &self.vals[w],
            b.map(|b| &self.vals[b]),
            stride,
            pad,
            self.par,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Node::Deconv2d { x, w, b, stride, pad }, y, needs)
    }

    pub fn depthwise(&mut self, x: VarId, w: VarId) -> VarId {
        let y = ops::depthwise_conv2d(&self.vals[x], &self.vals[w], self.par);
        let needs = self.needs(x) || self.needs(w);
        self.push(Node::Depthwise { x, w }, y, needs)
    }

    pub fn instance_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let (y, mean, rstd) = ops::instance_norm(&self.vals[x], &self.vals[gamma], &self.vals[beta]);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Node::InstanceNorm { x, gamma, beta, mean, rstd }, y, needs)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let y = ops::relu(&self.vals[x]);
        let needs = self.needs(x);
        self.push(Node::Relu { x }, y, needs)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f32) -> VarId {
        let y = ops::leaky_relu(&self.vals[x], slope);
        let needs = self.needs(x);
        self.push(Node::LeakyRelu { x, slope }, y, needs)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let y = ops::tanh(&self.vals[x]);
        let needs = self.needs(x);
        self.push(Node::Tanh { x }, y, needs)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let y = ops::add(&self.vals[a], &self.vals[b]);
        let needs = self.needs(a) || self.needs(b);
        self.push(Node::Add { a, b }, y, needs)
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> VarId {
        let ca = self.vals[a].c();
        let y = ops::concat_channels(&self.vals[a], &self.vals[b]);
        let needs = self.needs(a) || self.needs(b);
        self.push(Node::ConcatC { a, b, ca }, y, needs)
    }

    pub fn scale(&mut self, x: VarId, k: f32) -> VarId {
        let y = self.vals[x].map(|v| v * k);
        let needs = self.needs(x);
        self.push(Node::Scale { x, k }, y, needs)
    }

    /// Elementwise sum of same-shaped vars (used to combine scalar losses).
    pub fn sum_all(&mut self, xs: &[VarId]) -> VarId {
        assert!(!xs.is_empty());
        let mut acc = self.vals[xs[0]].clone();
        for &v in &xs[1..] {
            acc = ops::add(&acc, &self.vals[v]);
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Node::SumAll { xs: xs.to_vec() }, acc, needs)
    }

    /// mean((x - c)^2) as a (1,1,1,1) scalar.
    pub fn mean_sq_scalar(&mut self, x: VarId, c: f32) -> VarId {
        let v = ops::mean_sq_scalar(&self.vals[x], c);
        let needs = self.needs(x);
        self.push(Node::MeanSqScalar { x, c }, Tensor::scalar(v), needs)
    }

    pub fn mse_const(&mut self, x: VarId, target: Tensor) -> VarId {
        let v = ops::mse(&self.vals[x], &target);
        let needs = self.needs(x);
        self.push(Node::Mse { x, target }, Tensor::scalar(v), needs)
    }

    pub fn mae_const(&mut self, x: VarId, target: Tensor) -> VarId {
        let v = ops::mae(&self.vals[x], &target);
        let needs = self.needs(x);
        self.push(Node::Mae { x, target }, Tensor::scalar(v), needs)
    }

    pub fn masked_mse_const(&mut self, x: VarId, target: Tensor, mask: Tensor) -> VarId {
        let (v, denom) = ops::masked_mse(&self.vals[x], &target, &mask);
        let needs = self.needs(x);
        self.push(Node::MaskedMse { x, target, mask, denom }, Tensor::scalar(v), needs)
    }

    pub fn frob_norm_mean(&mut self, x: VarId) -> VarId {
        let (v, norms) = ops::frob_norm_mean(&self.vals[x]);
        let needs = self.needs(x);
        self.push(Node::FrobNormMean { x, norms }, Tensor::scalar(v), needs)
    }

    pub fn max_pool2(&mut self, x: VarId) -> VarId {
        let (y, idx) = ops::max_pool2(&self.vals[x]);
        let needs = self.needs(x);
        self.push(Node::MaxPool2 { x, idx }, y, needs)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients of all trainable-reachable
    /// vars become available through [`Tape::grad`].
    pub fn backward(&mut self, root: VarId) {
        assert_eq!(self.vals[root].len(), 1, "backward expects a scalar root");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            if self.grads[id].is_none() || !self.needs_grad[id] {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            let contributions = self.step_backward(id, &g);
            self.grads[id] = Some(g);
            for (v, add) in contributions {
                self.acc(v, add);
            }
        }
    }

    fn acc(&mut self, v: VarId, add: Tensor) {
        match &mut self.grads[v] {
            Some(g) => {
                for (d, s) in g.data_mut().iter_mut().zip(add.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(add),
        }
    }

    /// Input gradients contributed by node `id` given its output gradient.
    fn step_backward(&self, id: VarId, g: &Tensor) -> Vec<(VarId, Tensor)> {
        let mut out = Vec::new();
        match &self.nodes[id] {
            Node::Leaf => {}
            Node::Conv2d { x, w, b, cfg } => {
                let grads = ops::conv2d_bwd(
                    &self.vals[*x],
                    &self.vals[*w],
                    *cfg,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                    self.par,
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Node::Deconv2d { x, w, b, stride, pad } => {
                let grads = ops::deconv2d_bwd(
                    &self.vals[*x],
                    &self.vals[*w],
                    *stride,
                    *pad,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                    self.par,
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Node::Depthwise { x, w } => {
                let (dx, dw) =
                    ops::depthwise_conv2d_bwd(&self.vals[*x], &self.vals[*w], g, self.needs(*x), self.par);
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    out.push((*w, dw));
                }
            }
            Node::InstanceNorm { x, gamma, beta, mean, rstd } => {
                let (dx, dgamma, dbeta) =
                    ops::instance_norm_bwd(&self.vals[*x], &self.vals[*gamma], mean, rstd, g);
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Node::Relu { x } => {
                if self.needs(*x) {
                    out.push((*x, ops::relu_bwd(&self.vals[id], g)));
                }
            }
            Node::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    out.push((*x, ops::leaky_relu_bwd(&self.vals[*x], *slope, g)));
                }
            }
            Node::Tanh { x } => {
                if self.needs(*x) {
                    out.push((*x, ops::tanh_bwd(&self.vals[id], g)));
                }
            }
            Node::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Node::ConcatC { a, b, ca } => {
                let (da, db) = ops::split_channels(g, *ca);
                if self.needs(*a) {
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    out.push((*b, db));
                }
            }
            Node::Scale { x, k } => {
                if self.needs(*x) {
                    out.push((*x, g.map(|v| v * *k)));
                }
            }
            Node::SumAll { xs } => {
                for &v in xs {
                    if self.needs(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Node::MeanSqScalar { x, c } => {
                if self.needs(*x) {
                    out.push((*x, ops::mean_sq_scalar_bwd(&self.vals[*x], *c, g.data()[0])));
                }
            }
            Node::Mse { x, target } => {
                if self.needs(*x) {
                    out.push((*x, ops::mse_bwd(&self.vals[*x], target, g.data()[0])));
                }
            }
            Node::Mae { x, target } => {
                if self.needs(*x) {
                    out.push((*x, ops::mae_bwd(&self.vals[*x], target, g.data()[0])));
                }
            }
            Node::MaskedMse { x, target, mask, denom } => {
                if self.needs(*x) {
                    out.push((*x, ops::masked_mse_bwd(&self.vals[*x], target, mask, *denom, g.data()[0])));
                }
            }
            Node::FrobNormMean { x, norms } => {
                if self.needs(*x) {
                    out.push((*x, ops::frob_norm_mean_bwd(&self.vals[*x], norms, g.data()[0])));
                }
            }
            Node::MaxPool2 { x, idx } => {
                if self.needs(*x) {
                    out.push((*x, ops::max_pool2_bwd(&self.vals[*x], idx, g)));
                }
            }
        }
        out
    }
}

impl Exec for Tape {
    type V = VarId;

    fn leaf(&mut self, t: &Tensor, trainable: bool) -> VarId {
        if trainable {
            self.param(t.clone())
        } else {
            self.constant(t.clone())
        }
    }

    fn conv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, cfg: ConvCfg) -> VarId {
        Tape::conv2d(self, x, w, b, cfg)
    }

    fn deconv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, stride: usize, pad: usize) -> VarId {
        Tape::deconv2d(self, x, w, b, stride, pad)
    }

    fn depthwise(&mut self, x: VarId, w: VarId) -> VarId {
        Tape::depthwise(self, x, w)
    }

    fn instance_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        Tape::instance_norm(self, x, gamma, beta)
    }

    fn relu(&mut self, x: VarId) -> VarId {
        Tape::relu(self, x)
    }

    fn leaky_relu(&mut self, x: VarId, slope: f32) -> VarId {
        Tape::leaky_relu(self, x, slope)
    }

    fn tanh(&mut self, x: VarId) -> VarId {
        Tape::tanh(self, x)
    }

    fn add(&mut self, a: VarId, b: VarId) -> VarId {
        Tape::add(self, a, b)
    }

    fn concat_channels(&mut self, a: VarId, b: VarId) -> VarId {
        Tape::concat_channels(self, a, b)
    }

    fn max_pool2(&mut self, x: VarId) -> VarId {
        Tape::max_pool2(self, x)
    }
}
