//! Independent reference implementations shared by the oracle and gradient
//! tests. Everything here is plain nested loops: no im2col, no GEMM, no reuse
//! of the library's execution path.

#![allow(dead_code)]

use beautyslim_core::Tensor;

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    (if i < 0 { -i } else if i >= len { 2 * len - 2 - i } else { i }) as usize
}

fn fetch(x: &Tensor, n: usize, c: usize, iy: isize, ix: isize, reflect_pad: bool) -> f32 {
    let (h, w) = (x.h(), x.w());
    if reflect_pad {
        x.at(n, c, reflect(iy, h), reflect(ix, w))
    } else if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
        x.at(n, c, iy as usize, ix as usize)
    } else {
        0.0
    }
}

/// Direct nested-loop convolution; w is (Co,Ci,K,K).
pub fn direct_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    reflect_pad: bool,
) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(n, co, ho, wo);
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = (oy * stride + kh) as isize - pad as isize;
                                let ix = (ox * stride + kw) as isize - pad as isize;
                                acc += fetch(x, ni, c, iy, ix, reflect_pad) * w.at(o, c, kh, kw);
                            }
                        }
                    }
                    *y.at_mut(ni, o, oy, ox) = acc;
                }
            }
        }
    }
    y
}

/// Direct transposed convolution; w is (Ci,Co,K,K).
pub fn direct_deconv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [_, co, k, _] = w.shape();
    let ho = (h - 1) * stride + k - 2 * pad;
    let wo = (wd - 1) * stride + k - 2 * pad;
    let mut y = Tensor::zeros(n, co, ho, wo);
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ty = oy as isize + pad as isize - kh as isize;
                                let tx = ox as isize + pad as isize - kw as isize;
                                if ty >= 0
                                    && tx >= 0
                                    && ty % stride as isize == 0
                                    && tx % stride as isize == 0
                                {
                                    let (sy, sx) = (ty as usize / stride, tx as usize / stride);
                                    if sy < h && sx < wd {
                                        acc += x.at(ni, c, sy, sx) * w.at(c, o, kh, kw);
                                    }
                                }
                            }
                        }
                    }
                    *y.at_mut(ni, o, oy, ox) = acc;
                }
            }
        }
    }
    y
}

/// Direct depthwise convolution, stride 1, zero padding (K-1)/2; w is (C,1,K,K).
pub fn direct_depthwise(x: &Tensor, w: &Tensor) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let k = w.shape()[2];
    let p = (k - 1) / 2;
    let mut y = Tensor::zeros(n, c, h, wd);
    for ni in 0..n {
        for cc in 0..c {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = 0.0;
                    for kh in 0..k {
                        for kw in 0..k {
                            let iy = oy as isize + kh as isize - p as isize;
                            let ix = ox as isize + kw as isize - p as isize;
                            acc += fetch(x, ni, cc, iy, ix, false) * w.at(cc, 0, kh, kw);
                        }
                    }
                    *y.at_mut(ni, cc, oy, ox) = acc;
                }
            }
        }
    }
    y
}

/// Count the multiply–accumulates an explicit direct convolution performs:
/// every (output position × kernel tap × input channel) pair is one MAC.
pub fn conv_mac_count(ci: usize, co: usize, k: usize, ho: usize, wo: usize) -> u64 {
    let mut count = 0u64;
    for _ in 0..co {
        for _ in 0..ho {
            for _ in 0..wo {
                for _ in 0..ci {
                    for _ in 0..k {
                        for _ in 0..k {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    count
}

/// MACs of one depthwise + pointwise unit, counted by the same loop walk.
pub fn separated_unit_mac_count(ci: usize, co: usize, k: usize, h: usize, w: usize) -> u64 {
    let mut count = 0u64;
    // depthwise: one K×K filter per channel
    for _ in 0..ci {
        for _ in 0..h {
            for _ in 0..w {
                for _ in 0..k {
                    for _ in 0..k {
                        count += 1;
                    }
                }
            }
        }
    }
    count + conv_mac_count(ci, co, 1, h, w)
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f32, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{}: shape mismatch", what);
    let mut worst = 0.0f32;
    for (x, y) in a.data().iter().zip(b.data()) {
        let denom = 1.0f32.max(x.abs().max(y.abs()));
        worst = worst.max((x - y).abs() / denom);
    }
    assert!(worst <= tol, "{}: max relative deviation {} > {}", what, worst, tol);
}

/// Central finite difference of `f` over the listed coordinates of `x`.
pub fn central_diff(
    f: &mut dyn FnMut(&[f32]) -> f32,
    x: &mut Vec<f32>,
    coords: &[usize],
    h: f32,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x) as f64;
        x[i] = orig - h;
        let fm = f(x) as f64;
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h as f64));
    }
    out
}

/// L2 relative error between analytic and finite-difference gradients.
pub fn grad_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let num: f64 = analytic.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Deterministic coordinate subset for finite-difference probes.
pub fn probe_coords(len: usize, want: usize, salt: u64) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    let mut state = salt.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut out = Vec::with_capacity(want);
    for _ in 0..want {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        out.push((state % len as u64) as usize);
    }
    out.sort_unstable();
    out.dedup();
    out
}
