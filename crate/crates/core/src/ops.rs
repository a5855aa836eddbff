//! Convolution, normalization and reduction kernels over NCHW tensors.
//!
//! Convolutions run as im2col + GEMM; transposed convolutions as the
//! col2im adjoint of the same lowering. Every kernel is deterministic for a
//! fixed input: batch items are computed independently (optionally in
//! parallel) and cross-item reductions are summed in batch order.

use alloc::vec;
use alloc::vec::Vec;

use crate::mathf;
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const NORM_EPS: f32 = 1e-5;

/// Geometry of a standard convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad: usize,
    /// Reflection padding instead of zero padding.
    pub reflect: bool,
}

impl ConvCfg {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad, reflect: false }
    }

    pub fn reflect(stride: usize, pad: usize) -> Self {
        Self { stride, pad, reflect: true }
    }
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn deconv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Row-major C(m,n) = A(m,k) * B(k,n) + beta*C.
pub(crate) fn sgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Mirror an out-of-range coordinate back into `[0, len)` (reflection
/// padding without edge repetition; requires `pad < len`).
#[inline(always)]
fn reflect_idx(i: isize, len: usize) -> usize {
    let len = len as isize;
    let j = if i < 0 {
        -i
    } else if i >= len {
        2 * len - 2 - i
    } else {
        i
    };
    j as usize
}

/// Gather (C,H,W) into (C*K*K, Ho*Wo) patch columns.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cfg: ConvCfg, out: &mut [f32]) {
    let ho = conv_out_dim(h, k, cfg.stride, cfg.pad);
    let wo = conv_out_dim(w, k, cfg.stride, cfg.pad);
    debug_assert_eq!(out.len(), c * k * k * ho * wo);
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut out[((ci * k + kh) * k + kw) * cols..][..cols];
                for oy in 0..ho {
                    let iy = (oy * cfg.stride + kh) as isize - cfg.pad as isize;
                    let dst = &mut row[oy * wo..][..wo];
                    if cfg.reflect {
                        let sy = reflect_idx(iy, h);
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * cfg.stride + kw) as isize - cfg.pad as isize;
                            *d = plane[sy * w + reflect_idx(ix, w)];
                        }
                    } else if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                    } else {
                        let src = &plane[iy as usize * w..][..w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * cfg.stride + kw) as isize - cfg.pad as isize;
                            *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add patch columns back onto a (C,H,W) plane stack; the adjoint of
/// [`im2col`] with the same geometry.
fn col2im_add(
    cols_buf: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    cfg: ConvCfg,
    out: &mut [f32],
) {
    let ho = conv_out_dim(h, k, cfg.stride, cfg.pad);
    let wo = conv_out_dim(w, k, cfg.stride, cfg.pad);
    debug_assert_eq!(cols_buf.len(), c * k * k * ho * wo);
    debug_assert_eq!(out.len(), c * h * w);
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols_buf[((ci * k + kh) * k + kw) * cols..][..cols];
                for oy in 0..ho {
                    let iy = (oy * cfg.stride + kh) as isize - cfg.pad as isize;
                    let src = &row[oy * wo..][..wo];
                    if cfg.reflect {
                        let sy = reflect_idx(iy, h);
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * cfg.stride + kw) as isize - cfg.pad as isize;
                            plane[sy * w + reflect_idx(ix, w)] += v;
                        }
                    } else if iy >= 0 && iy < h as isize {
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * cfg.stride + kw) as isize - cfg.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn for_each_item(par: bool, out: &mut [f32], item_len: usize, f: impl Fn(usize, &mut [f32]) + Sync) {
    #[cfg(feature = "parallel")]
    if par && out.len() > item_len {
        out.par_chunks_mut(item_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    let _ = par;
    for (i, chunk) in out.chunks_mut(item_len).enumerate() {
        f(i, chunk);
    }
}

/// Per-item map followed by an in-order sum; deterministic under parallelism.
fn map_sum_items<T: Send>(
    par: bool,
    n: usize,
    f: impl Fn(usize) -> T + Sync,
    mut fold: impl FnMut(usize, T),
) {
    #[cfg(feature = "parallel")]
    if par && n > 1 {
        let parts: Vec<T> = (0..n).into_par_iter().map(&f).collect();
        for (i, p) in parts.into_iter().enumerate() {
            fold(i, p);
        }
        return;
    }
    let _ = par;
    for i in 0..n {
        fold(i, f(i));
    }
}

// ---------------------------------------------------------------------------
// Standard convolution
// ---------------------------------------------------------------------------

/// x: (N,Ci,H,W), w: (Co,Ci,K,K), bias: (1,Co,1,1).
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: ConvCfg, par: bool) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, k, _] = w.shape();
    assert_eq!(ci, wci, "conv2d: input channels {} do not match weight {}", ci, wci);
    let ho = conv_out_dim(h, k, cfg.stride, cfg.pad);
    let wo = conv_out_dim(wd, k, cfg.stride, cfg.pad);
    let mut y = Tensor::zeros(n, co, ho, wo);
    let item_out = co * ho * wo;
    let pointwise = k == 1 && cfg.stride == 1 && cfg.pad == 0;
    {
        let ydata = y.data_mut();
        for_each_item(par, ydata, item_out, |i, out| {
            if pointwise {
                sgemm_rowmajor(co, ci, ho * wo, w.data(), x.item(i), 0.0, out);
            } else {
                let mut cols = vec![0.0f32; ci * k * k * ho * wo];
                im2col(x.item(i), ci, h, wd, k, cfg, &mut cols);
                sgemm_rowmajor(co, ci * k * k, ho * wo, w.data(), &cols, 0.0, out);
            }
            if let Some(b) = bias {
                for (cch, row) in out.chunks_mut(ho * wo).enumerate() {
                    let bv = b.data()[cch];
                    for v in row {
                        *v += bv;
                    }
                }
            }
        });
    }
    y
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    cfg: ConvCfg,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
    par: bool,
) -> ConvGrads {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let [_, _, ho, wo] = dy.shape();
    let kk = ci * k * k;
    let spatial = ho * wo;
    let pointwise = k == 1 && cfg.stride == 1 && cfg.pad == 0;

    // w transposed to (Ci*K*K, Co) for the data gradient
    let mut wt = vec![0.0f32; kk * co];
    for o in 0..co {
        for r in 0..kk {
            wt[r * co + o] = w.data()[o * kk + r];
        }
    }

    let mut dx = if need_dx { Some(Tensor::zeros(n, ci, h, wd)) } else { None };
    let mut dw = if need_dw { Some(Tensor::zeros(co, ci, k, k)) } else { None };
    let mut db = if need_db { Some(Tensor::zeros(1, co, 1, 1)) } else { None };

    let per_item = |i: usize, dx_item: Option<&mut [f32]>| -> (Vec<f32>, Vec<f32>) {
        let dyi = dy.item(i);
        // weight gradient: dW += dY * cols^T
        let mut dw_part = vec![0.0f32; if need_dw { co * kk } else { 0 }];
        if need_dw {
            if pointwise {
                // cols == x directly
                let mut xt = vec![0.0f32; spatial * ci];
                let xi = x.item(i);
                for r in 0..ci {
                    for s in 0..spatial {
                        xt[s * ci + r] = xi[r * spatial + s];
                    }
                }
                sgemm_rowmajor(co, spatial, ci, dyi, &xt, 0.0, &mut dw_part);
            } else {
                let mut cols = vec![0.0f32; kk * spatial];
                im2col(x.item(i), ci, h, wd, k, cfg, &mut cols);
                let mut colst = vec![0.0f32; spatial * kk];
                for r in 0..kk {
                    for s in 0..spatial {
                        colst[s * kk + r] = cols[r * spatial + s];
                    }
                }
                sgemm_rowmajor(co, spatial, kk, dyi, &colst, 0.0, &mut dw_part);
            }
        }
        // bias gradient
        let mut db_part = vec![0.0f32; if need_db { co } else { 0 }];
        if need_db {
            for (cch, row) in dyi.chunks(spatial).enumerate() {
                db_part[cch] = row.iter().sum();
            }
        }
        // data gradient
        if let Some(out) = dx_item {
            if pointwise {
                sgemm_rowmajor(ci, co, spatial, &wt, dyi, 0.0, out);
            } else {
                let mut dcols = vec![0.0f32; kk * spatial];
                sgemm_rowmajor(kk, co, spatial, &wt, dyi, 0.0, &mut dcols);
                out.fill(0.0);
                col2im_add(&dcols, ci, h, wd, k, cfg, out);
            }
        }
        (dw_part, db_part)
    };

    run_items(par, n, dx.as_mut(), per_item, &mut dw, &mut db);
    ConvGrads { dx, dw, db }
}

/// Drive `per_item` over the batch (parallel when possible), writing per-item
/// `dx` chunks in place and folding weight/bias parts in batch order.
fn run_items(
    par: bool,
    n: usize,
    dx: Option<&mut Tensor>,
    per_item: impl Fn(usize, Option<&mut [f32]>) -> (Vec<f32>, Vec<f32>) + Sync,
    dw: &mut Option<Tensor>,
    db: &mut Option<Tensor>,
) {
    let parts: Vec<(Vec<f32>, Vec<f32>)> = if let Some(dx_t) = dx {
        let il = dx_t.item_len();
        let data = dx_t.data_mut();
        #[cfg(feature = "parallel")]
        if par && n > 1 {
            let parts = data
                .par_chunks_mut(il)
                .enumerate()
                .map(|(i, chunk)| per_item(i, Some(chunk)))
                .collect();
            accumulate_parts(parts, dw.as_mut(), db.as_mut());
            return;
        }
        data.chunks_mut(il).enumerate().map(|(i, chunk)| per_item(i, Some(chunk))).collect()
    } else {
        let mut collected: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(n);
        map_sum_items(par, n, |i| per_item(i, None), |_, p| collected.push(p));
        collected
    };
    accumulate_parts(parts, dw.as_mut(), db.as_mut());
}

fn accumulate_parts(
    parts: Vec<(Vec<f32>, Vec<f32>)>,
    dw: Option<&mut Tensor>,
    db: Option<&mut Tensor>,
) {
    let mut dwd = dw.map(|t| t.data_mut());
    let mut dbd = db.map(|t| t.data_mut());
    for (dw_part, db_part) in parts {
        if let Some(dwd) = dwd.as_deref_mut() {
            for (d, s) in dwd.iter_mut().zip(&dw_part) {
                *d += s;
            }
        }
        if let Some(dbd) = dbd.as_deref_mut() {
            for (d, s) in dbd.iter_mut().zip(&db_part) {
                *d += s;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Transposed convolution
// ---------------------------------------------------------------------------

/// x: (N,Ci,H,W), w: (Ci,Co,K,K), bias: (1,Co,1,1). Zero padding only.
pub fn deconv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize, par: bool) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [wci, co, k, _] = w.shape();
    assert_eq!(ci, wci, "deconv2d: input channels {} do not match weight {}", ci, wci);
    let ho = deconv_out_dim(h, k, stride, pad);
    let wo = deconv_out_dim(wd, k, stride, pad);
    let cfg = ConvCfg::new(stride, pad);
    let cokk = co * k * k;

    // (Co*K*K, Ci) view of the kernel
    let mut wt = vec![0.0f32; cokk * ci];
    for cin in 0..ci {
        for r in 0..cokk {
            wt[r * ci + cin] = w.data()[cin * cokk + r];
        }
    }

    let mut y = Tensor::zeros(n, co, ho, wo);
    let item_out = co * ho * wo;
    {
        let ydata = y.data_mut();
        for_each_item(par, ydata, item_out, |i, out| {
            let mut cols = vec![0.0f32; cokk * h * wd];
            sgemm_rowmajor(cokk, ci, h * wd, &wt, x.item(i), 0.0, &mut cols);
            col2im_add(&cols, co, ho, wo, k, cfg, out);
            if let Some(b) = bias {
                for (cch, row) in out.chunks_mut(ho * wo).enumerate() {
                    let bv = b.data()[cch];
                    for v in row {
                        *v += bv;
                    }
                }
            }
        });
    }
    y
}

pub fn deconv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
    par: bool,
) -> ConvGrads {
    let [n, ci, h, wd] = x.shape();
    let [_, co, k, _] = w.shape();
    let [_, _, ho, wo] = dy.shape();
    let cfg = ConvCfg::new(stride, pad);
    let cokk = co * k * k;
    let in_spatial = h * wd;

    let mut dx = if need_dx { Some(Tensor::zeros(n, ci, h, wd)) } else { None };
    let mut dw = if need_dw { Some(Tensor::zeros(ci, co, k, k)) } else { None };
    let mut db = if need_db { Some(Tensor::zeros(1, co, 1, 1)) } else { None };

    let per_item = |i: usize, dx_item: Option<&mut [f32]>| -> (Vec<f32>, Vec<f32>) {
        let mut dcols = vec![0.0f32; cokk * in_spatial];
        im2col(dy.item(i), co, ho, wo, k, cfg, &mut dcols);
        // dW(Ci, Co*K*K) += x(Ci, HW) * dcols^T
        let mut dw_part = vec![0.0f32; if need_dw { ci * cokk } else { 0 }];
        if need_dw {
            let mut dcolst = vec![0.0f32; in_spatial * cokk];
            for r in 0..cokk {
                for s in 0..in_spatial {
                    dcolst[s * cokk + r] = dcols[r * in_spatial + s];
                }
            }
            sgemm_rowmajor(ci, in_spatial, cokk, x.item(i), &dcolst, 0.0, &mut dw_part);
        }
        let mut db_part = vec![0.0f32; if need_db { co } else { 0 }];
        if need_db {
            for (cch, row) in dy.item(i).chunks(ho * wo).enumerate() {
                db_part[cch] = row.iter().sum();
            }
        }
        if let Some(out) = dx_item {
            sgemm_rowmajor(ci, cokk, in_spatial, w.data(), &dcols, 0.0, out);
        }
        (dw_part, db_part)
    };

    run_items(par, n, dx.as_mut(), per_item, &mut dw, &mut db);
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Depthwise convolution (stride 1)
// ---------------------------------------------------------------------------

/// x: (N,C,H,W), w: (C,1,K,K); stride 1, zero padding `(K-1)/2`.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, par: bool) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let [wc, _, k, _] = w.shape();
    assert_eq!(c, wc, "depthwise: channel mismatch");
    let p = (k - 1) / 2;
    let mut y = Tensor::zeros(n, c, h, wd);
    let item_len = c * h * wd;
    {
        let ydata = y.data_mut();
        for_each_item(par, ydata, item_len, |i, out| {
            let xi = x.item(i);
            for cc in 0..c {
                let plane = &xi[cc * h * wd..(cc + 1) * h * wd];
                let ker = &w.data()[cc * k * k..(cc + 1) * k * k];
                let dst = &mut out[cc * h * wd..(cc + 1) * h * wd];
                for oy in 0..h {
                    for kh in 0..k {
                        let iy = oy as isize + kh as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * wd..][..wd];
                        let drow = &mut dst[oy * wd..][..wd];
                        for kw in 0..k {
                            let kv = ker[kh * k + kw];
                            let off = kw as isize - p as isize;
                            let (x0, x1) = (0.max(-off) as usize, wd.min((wd as isize - off) as usize));
                            for ox in x0..x1 {
                                drow[ox] += kv * src[(ox as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        });
    }
    y
}

pub fn depthwise_conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
    par: bool,
) -> (Option<Tensor>, Tensor) {
    let [n, c, h, wd] = x.shape();
    let [_, _, k, _] = w.shape();
    let p = (k - 1) / 2;
    let mut dw = Tensor::zeros(c, 1, k, k);
    // dx is a depthwise convolution of dy with the flipped kernel
    let dx = if need_dx {
        let mut wflip = Tensor::zeros(c, 1, k, k);
        for cc in 0..c {
            for kh in 0..k {
                for kw in 0..k {
                    wflip.data_mut()[(cc * k + kh) * k + kw] =
                        w.data()[(cc * k + (k - 1 - kh)) * k + (k - 1 - kw)];
                }
            }
        }
        Some(depthwise_conv2d(dy, &wflip, par))
    } else {
        None
    };

    let per_item = |i: usize| -> Vec<f32> {
        let xi = x.item(i);
        let dyi = dy.item(i);
        let mut dw_part = vec![0.0f32; c * k * k];
        for cc in 0..c {
            let plane = &xi[cc * h * wd..(cc + 1) * h * wd];
            let gplane = &dyi[cc * h * wd..(cc + 1) * h * wd];
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = 0.0f32;
                    for oy in 0..h {
                        let iy = oy as isize + kh as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * wd..][..wd];
                        let grow = &gplane[oy * wd..][..wd];
                        let off = kw as isize - p as isize;
                        let (x0, x1) = (0.max(-off) as usize, wd.min((wd as isize - off) as usize));
                        for ox in x0..x1 {
                            acc += grow[ox] * src[(ox as isize + off) as usize];
                        }
                    }
                    dw_part[(cc * k + kh) * k + kw] = acc;
                }
            }
        }
        dw_part
    };
    map_sum_items(par, n, per_item, |_, part| {
        for (d, s) in dw.data_mut().iter_mut().zip(&part) {
            *d += s;
        }
    });
    (dx, dw)
}

// ---------------------------------------------------------------------------
// Instance normalization (affine)
// ---------------------------------------------------------------------------

/// Returns (y, mean, rstd); mean/rstd are (N,C,1,1) and are needed by the
/// backward pass.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f32;
    let mut y = Tensor::zeros(n, c, h, w);
    let mut mean = Tensor::zeros(n, c, 1, 1);
    let mut rstd = Tensor::zeros(n, c, 1, 1);
    for i in 0..n {
        for cc in 0..c {
            let base = (i * c + cc) * h * w;
            let plane = &x.data()[base..base + h * w];
            let mu = plane.iter().sum::<f32>() / hw;
            let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / hw;
            let rs = 1.0 / mathf::sqrt(var + NORM_EPS);
            mean.data_mut()[i * c + cc] = mu;
            rstd.data_mut()[i * c + cc] = rs;
            let (g, b) = (gamma.data()[cc], beta.data()[cc]);
            let dst = &mut y.data_mut()[base..base + h * w];
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = g * (v - mu) * rs + b;
            }
        }
    }
    (y, mean, rstd)
}

/// Returns (dx, dgamma, dbeta).
pub fn instance_norm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    rstd: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f32;
    let mut dx = Tensor::zeros(n, c, h, w);
    let mut dgamma = Tensor::zeros(1, c, 1, 1);
    let mut dbeta = Tensor::zeros(1, c, 1, 1);
    for i in 0..n {
        for cc in 0..c {
            let base = (i * c + cc) * h * w;
            let plane = &x.data()[base..base + h * w];
            let g = &dy.data()[base..base + h * w];
            let mu = mean.data()[i * c + cc];
            let rs = rstd.data()[i * c + cc];
            let mut sum_g = 0.0f32;
            let mut sum_gx = 0.0f32;
            for (&gv, &xv) in g.iter().zip(plane) {
                sum_g += gv;
                sum_gx += gv * (xv - mu) * rs;
            }
            dgamma.data_mut()[cc] += sum_gx;
            dbeta.data_mut()[cc] += sum_g;
            let gm = sum_g / hw;
            let gxm = sum_gx / hw;
            let scale = gamma.data()[cc] * rs;
            let dst = &mut dx.data_mut()[base..base + h * w];
            for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(plane) {
                let xhat = (xv - mu) * rs;
                *d = scale * (gv - gm - xhat * gxm);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data().iter().zip(dy.data()).map(|(&yv, &g)| if yv > 0.0 { g } else { 0.0 }).collect();
    let [n, c, h, w] = y.shape();
    Tensor::from_vec(n, c, h, w, data)
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_bwd(x: &Tensor, slope: f32, dy: &Tensor) -> Tensor {
    let data = x.data().iter().zip(dy.data()).map(|(&xv, &g)| if xv > 0.0 { g } else { slope * g }).collect();
    let [n, c, h, w] = x.shape();
    Tensor::from_vec(n, c, h, w, data)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(mathf::tanh)
}

pub fn tanh_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data().iter().zip(dy.data()).map(|(&yv, &g)| g * (1.0 - yv * yv)).collect();
    let [n, c, h, w] = y.shape();
    Tensor::from_vec(n, c, h, w, data)
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let [n, c, h, w] = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(n, c, h, w, data)
}

/// Concatenate along the channel dimension.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert!(n == nb && h == hb && w == wb, "concat: batch/spatial mismatch");
    let mut y = Tensor::zeros(n, ca + cb, h, w);
    let (ia, ib, iy) = (ca * h * w, cb * h * w, (ca + cb) * h * w);
    for i in 0..n {
        y.data_mut()[i * iy..i * iy + ia].copy_from_slice(a.item(i));
        y.data_mut()[i * iy + ia..(i + 1) * iy].copy_from_slice(b.item(i));
        debug_assert_eq!(ia + ib, iy);
    }
    y
}

/// Split a channel-concat gradient back into its two parts.
pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = dy.shape();
    let cb = c - ca;
    let mut da = Tensor::zeros(n, ca, h, w);
    let mut db = Tensor::zeros(n, cb, h, w);
    let (ia, ib) = (ca * h * w, cb * h * w);
    for i in 0..n {
        da.data_mut()[i * ia..(i + 1) * ia].copy_from_slice(&dy.item(i)[..ia]);
        db.data_mut()[i * ib..(i + 1) * ib].copy_from_slice(&dy.item(i)[ia..]);
    }
    (da, db)
}

/// 2×2 max pooling with stride 2 (spatial dims must be even). Returns the
/// pooled map and the flat argmax index of every output element.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(n, c, ho, wo);
    let mut idx = vec![0u32; n * c * ho * wo];
    for i in 0..n {
        for cc in 0..c {
            let base = (i * c + cc) * h * w;
            let obase = (i * c + cc) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let at = base + (oy * 2 + dy) * w + ox * 2 + dx;
                            let v = x.data()[at];
                            if v > best {
                                best = v;
                                best_at = at;
                            }
                        }
                    }
                    y.data_mut()[obase + oy * wo + ox] = best;
                    idx[obase + oy * wo + ox] = best_at as u32;
                }
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_bwd(x: &Tensor, idx: &[u32], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&at, &g) in idx.iter().zip(dy.data()) {
        dx.data_mut()[at as usize] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// Scalar reductions
// ---------------------------------------------------------------------------

/// mean((x - c)^2) over every element.
pub fn mean_sq_scalar(x: &Tensor, c: f32) -> f32 {
    let acc: f64 = x.data().iter().map(|&v| ((v - c) as f64) * ((v - c) as f64)).sum();
    (acc / x.len() as f64) as f32
}

pub fn mean_sq_scalar_bwd(x: &Tensor, c: f32, g: f32) -> Tensor {
    let scale = 2.0 * g / x.len() as f32;
    x.map(|v| scale * (v - c))
}

pub fn mse(x: &Tensor, target: &Tensor) -> f32 {
    debug_assert_eq!(x.shape(), target.shape());
    let acc: f64 =
        x.data().iter().zip(target.data()).map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64)).sum();
    (acc / x.len() as f64) as f32
}

pub fn mse_bwd(x: &Tensor, target: &Tensor, g: f32) -> Tensor {
    let scale = 2.0 * g / x.len() as f32;
    let [n, c, h, w] = x.shape();
    let data = x.data().iter().zip(target.data()).map(|(&a, &b)| scale * (a - b)).collect();
    Tensor::from_vec(n, c, h, w, data)
}

pub fn mae(x: &Tensor, target: &Tensor) -> f32 {
    debug_assert_eq!(x.shape(), target.shape());
    let acc: f64 = x.data().iter().zip(target.data()).map(|(&a, &b)| mathf::abs(a - b) as f64).sum();
    (acc / x.len() as f64) as f32
}

pub fn mae_bwd(x: &Tensor, target: &Tensor, g: f32) -> Tensor {
    let scale = g / x.len() as f32;
    let [n, c, h, w] = x.shape();
    let data = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a - b;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(n, c, h, w, data)
}

/// Mean of (x-t)^2 over masked pixels; `mask` is (N,1,H,W) with {0,1} entries
/// broadcast across channels. Returns (value, denominator).
pub fn masked_mse(x: &Tensor, target: &Tensor, mask: &Tensor) -> (f32, f32) {
    let [n, c, h, w] = x.shape();
    debug_assert_eq!(mask.shape(), [n, 1, h, w]);
    let mut acc = 0.0f64;
    let mut count = 0.0f64;
    for i in 0..n {
        let m = mask.item(i);
        count += m.iter().map(|&v| v as f64).sum::<f64>();
        for cc in 0..c {
            let base = (i * c + cc) * h * w;
            let xv = &x.data()[base..base + h * w];
            let tv = &target.data()[base..base + h * w];
            for ((&a, &b), &mv) in xv.iter().zip(tv).zip(m) {
                if mv != 0.0 {
                    acc += ((a - b) * (a - b)) as f64;
                }
            }
        }
    }
    let denom = (count * c as f64) as f32;
    ((acc / (count * c as f64).max(1.0)) as f32, denom)
}

pub fn masked_mse_bwd(x: &Tensor, target: &Tensor, mask: &Tensor, denom: f32, g: f32) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut dx = Tensor::zeros(n, c, h, w);
    let scale = 2.0 * g / denom.max(1.0);
    for i in 0..n {
        for cc in 0..c {
            let base = (i * c + cc) * h * w;
            for s in 0..h * w {
                if mask.item(i)[s] != 0.0 {
                    dx.data_mut()[base + s] =
                        scale * (x.data()[base + s] - target.data()[base + s]);
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Execution contexts
// ---------------------------------------------------------------------------

/// Layer-level execution abstraction: the same network-walking code runs
/// either eagerly over tensors ([`RawExec`]) or recorded on the autograd tape.
pub trait Exec {
    type V: Clone;
    fn leaf(&mut self, t: &Tensor, trainable: bool) -> Self::V;
    fn conv2d(&mut self, x: Self::V, w: Self::V, b: Option<Self::V>, cfg: ConvCfg) -> Self::V;
    fn deconv2d(&mut self, x: Self::V, w: Self::V, b: Option<Self::V>, stride: usize, pad: usize) -> Self::V;
    fn depthwise(&mut self, x: Self::V, w: Self::V) -> Self::V;
    fn instance_norm(&mut self, x: Self::V, gamma: Self::V, beta: Self::V) -> Self::V;
    fn relu(&mut self, x: Self::V) -> Self::V;
    fn leaky_relu(&mut self, x: Self::V, slope: f32) -> Self::V;
    fn tanh(&mut self, x: Self::V) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn concat_channels(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn max_pool2(&mut self, x: Self::V) -> Self::V;
}

/// Eager executor for inference. Tallies convolution MACs as it goes (same
/// counting convention as the cost model: transposed convs at output size,
/// normalization and activations free).
pub struct RawExec {
    pub par: bool,
    pub macs: u64,
}

impl RawExec {
    pub fn new(par: bool) -> Self {
        Self { par, macs: 0 }
    }
}

impl Exec for RawExec {
    type V = Tensor;

    fn leaf(&mut self, t: &Tensor, _trainable: bool) -> Tensor {
        t.clone()
    }

    fn conv2d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>, cfg: ConvCfg) -> Tensor {
        let y = conv2d(&x, &w, b.as_ref(), cfg, self.par);
        let [_, ci, k, _] = w.shape();
        let [n, co, ho, wo] = y.shape();
        self.macs += (n * k * k * ci * co * ho * wo) as u64;
        y
    }

    fn deconv2d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>, stride: usize, pad: usize) -> Tensor {
        let y = deconv2d(&x, &w, b.as_ref(), stride, pad, self.par);
        let [ci, co, k, _] = w.shape();
        let [n, _, ho, wo] = y.shape();
        self.macs += (n * k * k * ci * co * ho * wo) as u64;
        y
    }

    fn depthwise(&mut self, x: Tensor, w: Tensor) -> Tensor {
        let y = depthwise_conv2d(&x, &w, self.par);
        let [c, _, k, _] = w.shape();
        let [n, _, h, wd] = y.shape();
        self.macs += (n * k * k * c * h * wd) as u64;
        y
    }

    fn instance_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor {
        instance_norm(&x, &gamma, &beta).0
    }

    fn relu(&mut self, x: Tensor) -> Tensor {
        relu(&x)
    }

    fn leaky_relu(&mut self, x: Tensor, slope: f32) -> Tensor {
        leaky_relu(&x, slope)
    }

    fn tanh(&mut self, x: Tensor) -> Tensor {
        tanh(&x)
    }

    fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        add(&a, &b)
    }

    fn concat_channels(&mut self, a: Tensor, b: Tensor) -> Tensor {
        concat_channels(&a, &b)
    }

    fn max_pool2(&mut self, x: Tensor) -> Tensor {
        max_pool2(&x).0
    }
}

/// Mean over batch items of the per-item Frobenius norm.
pub fn frob_norm_mean(x: &Tensor) -> (f32, Tensor) {
    let n = x.n();
    let mut norms = Tensor::zeros(n, 1, 1, 1);
    let mut total = 0.0f64;
    for i in 0..n {
        let s: f64 = x.item(i).iter().map(|&v| (v as f64) * (v as f64)).sum();
        let nv = s.sqrt();
        norms.data_mut()[i] = nv as f32;
        total += nv;
    }
    ((total / n as f64) as f32, norms)
}

pub fn frob_norm_mean_bwd(x: &Tensor, norms: &Tensor, g: f32) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut dx = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        let nv = norms.data()[i];
        if nv <= 1e-12 {
            continue;
        }
        let scale = g / (n as f32 * nv);
        let src = x.item(i);
        let dst = dx.item_mut(i);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = scale * v;
        }
    }
    dx
}
