//! Differentiable building blocks: 3D convolution (im2col + GEMM), group
//! normalization, ReLU, and nearest-neighbor upsampling.
//!
//! Each op exposes a forward and a backward that consumes the cached forward
//! input. Backward passes accumulate into parameter gradient buffers and
//! return the input gradient.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::mathutil;

/// 3D convolution geometry: cubic kernel, symmetric zero padding `k/2`, so
/// output spatial dims are `ceil(in/stride)` for stride 1 or 2 on even dims.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k * self.k
    }

    pub fn out_dims(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (
            mathutil::div_ceil(d, self.stride),
            mathutil::div_ceil(h, self.stride),
            mathutil::div_ceil(w, self.stride),
        )
    }
}

/// Unfolds `x` into a `[in_c*k^3, od*oh*ow]` row-major patch matrix.
fn im2col(spec: &ConvSpec, x: &Tensor, od: usize, oh: usize, ow: usize) -> Vec<f32> {
    let k = spec.k;
    let pad = (k / 2) as isize;
    let n = od * oh * ow;
    let mut col = vec![0.0f32; spec.in_c * k * k * k * n];
    let mut row = 0usize;
    for ci in 0..spec.in_c {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * n..(row + 1) * n];
                    row += 1;
                    let mut out_i = 0usize;
                    for oz in 0..od {
                        let iz = (oz * spec.stride) as isize + kz as isize - pad;
                        if iz < 0 || iz >= x.d as isize {
                            out_i += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * spec.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= x.h as isize {
                                out_i += ow;
                                continue;
                            }
                            let base = x.index(ci, iz as usize, iy as usize, 0);
                            let xrow = &x.data[base..base + x.w];
                            if spec.stride == 1 {
                                // contiguous stripe: ix = ox + kx - pad
                                let shift = kx as isize - pad;
                                let ox_start = (-shift).max(0) as usize;
                                let ox_end = (x.w as isize - shift).min(ow as isize).max(0) as usize;
                                for ox in ox_start..ox_end {
                                    dst[out_i + ox] = xrow[(ox as isize + shift) as usize];
                                }
                                out_i += ow;
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * spec.stride) as isize + kx as isize - pad;
                                    if ix >= 0 && ix < x.w as isize {
                                        dst[out_i] = xrow[ix as usize];
                                    }
                                    out_i += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds a patch-matrix gradient back onto the input grid (scatter-add).
fn col2im(spec: &ConvSpec, dcol: &[f32], dx: &mut Tensor, od: usize, oh: usize, ow: usize) {
    let k = spec.k;
    let pad = (k / 2) as isize;
    let n = od * oh * ow;
    let mut row = 0usize;
    for ci in 0..spec.in_c {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &dcol[row * n..(row + 1) * n];
                    row += 1;
                    let mut out_i = 0usize;
                    for oz in 0..od {
                        let iz = (oz * spec.stride) as isize + kz as isize - pad;
                        if iz < 0 || iz >= dx.d as isize {
                            out_i += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * spec.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= dx.h as isize {
                                out_i += ow;
                                continue;
                            }
                            let base = dx.index(ci, iz as usize, iy as usize, 0);
                            for ox in 0..ow {
                                let ix = (ox * spec.stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < dx.w as isize {
                                    dx.data[base + ix as usize] += src[out_i];
                                }
                                out_i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = a[m x kk] * b[kk x n] (+ c)`, all row-major.
fn sgemm_rowmajor(
    m: usize,
    kk: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1isize, m as isize)
    } else {
        (kk as isize, 1isize)
    };
    let (rsb, csb) = if b_trans {
        (1isize, kk as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        matrixmultiply::sgemm(
            m,
            kk,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution: `y = w * x + b`.
pub fn conv3d_forward(spec: &ConvSpec, w: &[f32], b: Option<&[f32]>, x: &Tensor) -> Tensor {
    debug_assert_eq!(x.c, spec.in_c);
    debug_assert_eq!(w.len(), spec.weight_len());
    let (od, oh, ow) = spec.out_dims(x.d, x.h, x.w);
    let n = od * oh * ow;
    let kdim = spec.in_c * spec.k * spec.k * spec.k;
    let col = im2col(spec, x, od, oh, ow);
    let mut y = Tensor::zeros(spec.out_c, od, oh, ow);
    sgemm_rowmajor(spec.out_c, kdim, n, w, false, &col, false, 0.0, &mut y.data);
    if let Some(bias) = b {
        for (co, &bv) in bias.iter().enumerate() {
            for v in y.data[co * n..(co + 1) * n].iter_mut() {
                *v += bv;
            }
        }
    }
    y
}

/// Backward convolution. Accumulates `dw` (and `db`) and returns `dx`.
pub fn conv3d_backward(
    spec: &ConvSpec,
    w: &[f32],
    x: &Tensor,
    dy: &Tensor,
    dw: &mut [f32],
    db: Option<&mut [f32]>,
) -> Tensor {
    let (od, oh, ow) = spec.out_dims(x.d, x.h, x.w);
    debug_assert_eq!((dy.d, dy.h, dy.w), (od, oh, ow));
    let n = od * oh * ow;
    let kdim = spec.in_c * spec.k * spec.k * spec.k;

    // dw += dy * col^T
    let col = im2col(spec, x, od, oh, ow);
    sgemm_rowmajor(spec.out_c, n, kdim, &dy.data, false, &col, true, 1.0, dw);

    if let Some(db) = db {
        for co in 0..spec.out_c {
            let mut s = 0.0f32;
            for &g in &dy.data[co * n..(co + 1) * n] {
                s += g;
            }
            db[co] += s;
        }
    }

    // dcol = w^T * dy, then fold back
    let mut dcol = vec![0.0f32; kdim * n];
    sgemm_rowmajor(kdim, spec.out_c, n, w, true, &dy.data, false, 0.0, &mut dcol);
    let mut dx = Tensor::zeros(x.c, x.d, x.h, x.w);
    col2im(spec, &dcol, &mut dx, od, oh, ow);
    dx
}

/// Group normalization over `(channels/groups, spatial)` slabs with per
/// channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct GroupNormSpec {
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNormSpec {
    /// Largest divisor of `channels` not exceeding the requested group count.
    pub fn for_channels(channels: usize, requested: usize) -> Self {
        let cap = requested.max(1).min(channels.max(1));
        let groups = (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1);
        GroupNormSpec {
            channels,
            groups,
            eps: 1e-5,
        }
    }
}

pub fn group_norm_forward(spec: &GroupNormSpec, gamma: &[f32], beta: &[f32], x: &Tensor) -> Tensor {
    debug_assert_eq!(x.c, spec.channels);
    let sp = x.spatial();
    let cpg = spec.channels / spec.groups;
    let gsize = cpg * sp;
    let mut y = Tensor::zeros(x.c, x.d, x.h, x.w);
    for g in 0..spec.groups {
        let base = g * gsize;
        let slab = &x.data[base..base + gsize];
        let mean = slab.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
        let var = slab
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / gsize as f64;
        let istd = 1.0 / mathutil::sqrt(var + spec.eps as f64);
        for ci in 0..cpg {
            let c = g * cpg + ci;
            let (gm, bt) = (gamma[c] as f64, beta[c] as f64);
            for i in 0..sp {
                let idx = base + ci * sp + i;
                let xhat = (x.data[idx] as f64 - mean) * istd;
                y.data[idx] = (gm * xhat + bt) as f32;
            }
        }
    }
    y
}

pub fn group_norm_backward(
    spec: &GroupNormSpec,
    gamma: &[f32],
    x: &Tensor,
    dy: &Tensor,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Tensor {
    let sp = x.spatial();
    let cpg = spec.channels / spec.groups;
    let gsize = cpg * sp;
    let mut dx = Tensor::zeros(x.c, x.d, x.h, x.w);
    for g in 0..spec.groups {
        let base = g * gsize;
        let slab = &x.data[base..base + gsize];
        let mean = slab.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
        let var = slab
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / gsize as f64;
        let istd = 1.0 / mathutil::sqrt(var + spec.eps as f64);

        // accumulate group-level sums of dxhat and dxhat*xhat
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for ci in 0..cpg {
            let c = g * cpg + ci;
            let gm = gamma[c] as f64;
            let mut dg = 0.0f64;
            let mut db = 0.0f64;
            for i in 0..sp {
                let idx = base + ci * sp + i;
                let xhat = (x.data[idx] as f64 - mean) * istd;
                let dyv = dy.data[idx] as f64;
                dg += dyv * xhat;
                db += dyv;
                let dxhat = dyv * gm;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            dgamma[c] += dg as f32;
            dbeta[c] += db as f32;
        }
        let mean_dxhat = sum_dxhat / gsize as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / gsize as f64;
        for ci in 0..cpg {
            let c = g * cpg + ci;
            let gm = gamma[c] as f64;
            for i in 0..sp {
                let idx = base + ci * sp + i;
                let xhat = (x.data[idx] as f64 - mean) * istd;
                let dxhat = dy.data[idx] as f64 * gm;
                dx.data[idx] = (istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)) as f32;
            }
        }
    }
    dx
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Backward through ReLU given the forward *output*.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &o) in dx.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.c, x.d * 2, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for z in 0..y.d {
            for yy in 0..y.h {
                let src = x.index(c, z / 2, yy / 2, 0);
                let dst = y.index(c, z, yy, 0);
                for xx in 0..y.w {
                    y.data[dst + xx] = x.data[src + xx / 2];
                }
            }
        }
    }
    y
}

/// Each input cell collects the gradient of its eight children.
pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.d / 2, dy.h / 2, dy.w / 2);
    for c in 0..dy.c {
        for z in 0..dy.d {
            for yy in 0..dy.h {
                let src = dy.index(c, z, yy, 0);
                let dst = dx.index(c, z / 2, yy / 2, 0);
                for xx in 0..dy.w {
                    dx.data[dst + xx / 2] += dy.data[src + xx];
                }
            }
        }
    }
    dx
}
