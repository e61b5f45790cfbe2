//! Primitive differentiable operations on `[C, H, W]` feature maps.
//!
//! All convolutions are stride-1 cross-correlations; down/upsampling is
//! done by 2x2 average pooling and 2x2 stride-2 transposed convolution
//! respectively. Every op has a matching backward that the tape
//! dispatches during reverse-mode differentiation.

use super::tensor::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

fn dims3<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected [C,H,W] tensor, got {:?}", x.shape()))),
    }
}

/// Stride-1 cross-correlation with zero padding `pad` on both spatial
/// axes. `w` is `[C_out, C_in, KH, KW]`, `b` is `[C_out]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (cin, h, wd) = dims3(x)?;
    let (cout, wcin, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape(format!("conv weights must be 4-d, got {:?}", w.shape()))),
    };
    if wcin != cin {
        return Err(Error::shape(format!("conv expects {wcin} input channels, got {cin}")));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(format!("conv bias shape {:?}, expected [{cout}]", b.shape())));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}"
        )));
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);

    let xd = x.data();
    let wd_ = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for co in 0..cout {
        let o_ch = &mut od[co * oh * ow..(co + 1) * oh * ow];
        o_ch.fill(bd[co]);
        for ci in 0..cin {
            let x_ch = &xd[ci * h * wd..(ci + 1) * h * wd];
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let wv = wd_[((co * cin + ci) * kh + dkh) * kw + dkw];
                    // Valid output column window for this kernel tap.
                    let ow_lo = pad.saturating_sub(dkw);
                    let ow_hi = (wd + pad - dkw).min(ow);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for r in 0..oh {
                        let ih = r + dkh;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let x_row = (ih - pad) * wd + (ow_lo + dkw - pad);
                        let o_row = r * ow + ow_lo;
                        let n = ow_hi - ow_lo;
                        let xs = &x_ch[x_row..x_row + n];
                        let os = &mut o_ch[o_row..o_row + n];
                        for (o, &xv) in os.iter_mut().zip(xs) {
                            *o = *o + wv * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cin, h, wd) = dims3(x)?;
    let (cout, _, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv weights must be 4-d")),
    };
    let (gc, oh, ow) = dims3(gy)?;
    if gc != cout {
        return Err(Error::shape("upstream gradient channel mismatch"));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);

    let xd = x.data();
    let wd_ = w.data();
    let gyd = gy.data();
    {
        let gbd = gb.data_mut();
        for co in 0..cout {
            gbd[co] = gyd[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
        }
    }
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for co in 0..cout {
        let g_ch = &gyd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let x_ch = &xd[ci * h * wd..(ci + 1) * h * wd];
            let gx_ch = &mut gxd[ci * h * wd..(ci + 1) * h * wd];
            for dkh in 0..kh {
                for dkw in 0..kw {
                    let wi = ((co * cin + ci) * kh + dkh) * kw + dkw;
                    let wv = wd_[wi];
                    let ow_lo = pad.saturating_sub(dkw);
                    let ow_hi = (wd + pad - dkw).min(ow);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for r in 0..oh {
                        let ih = r + dkh;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let x_row = (ih - pad) * wd + (ow_lo + dkw - pad);
                        let g_row = r * ow + ow_lo;
                        let n = ow_hi - ow_lo;
                        let xs = &x_ch[x_row..x_row + n];
                        let gxs = &mut gx_ch[x_row..x_row + n];
                        let gs = &g_ch[g_row..g_row + n];
                        for ((gxv, &xv), &gv) in gxs.iter_mut().zip(xs).zip(gs) {
                            *gxv = *gxv + wv * gv;
                            acc = acc + xv * gv;
                        }
                    }
                    gwd[wi] = gwd[wi] + acc;
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Transposed convolution with a 2x2 kernel and stride 2 (non-overlapping):
/// doubles both spatial extents. `w` is `[C_in, C_out, 2, 2]`.
pub fn tconv2<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, h, wd) = dims3(x)?;
    let (wcin, cout) = match *w.shape() {
        [a, b, 2, 2] => (a, b),
        _ => return Err(Error::shape(format!("tconv weights must be [Cin,Cout,2,2], got {:?}", w.shape()))),
    };
    if wcin != cin {
        return Err(Error::shape(format!("tconv expects {wcin} input channels, got {cin}")));
    }
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let xd = x.data();
    let wd_ = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for co in 0..cout {
        let o_ch = &mut od[co * oh * ow..(co + 1) * oh * ow];
        o_ch.fill(bd[co]);
        for ci in 0..cin {
            let x_ch = &xd[ci * h * wd..(ci + 1) * h * wd];
            for a in 0..2 {
                for bb in 0..2 {
                    let wv = wd_[((ci * cout + co) * 2 + a) * 2 + bb];
                    for i in 0..h {
                        let o_row = (2 * i + a) * ow + bb;
                        let x_row = i * wd;
                        for j in 0..wd {
                            o_ch[o_row + 2 * j] = o_ch[o_row + 2 * j] + wv * x_ch[x_row + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tconv2_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cin, h, wd) = dims3(x)?;
    let (_, cout) = match *w.shape() {
        [a, b, 2, 2] => (a, b),
        _ => return Err(Error::shape("tconv weights must be [Cin,Cout,2,2]")),
    };
    let (_, oh, ow) = dims3(gy)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let xd = x.data();
    let wd_ = w.data();
    let gyd = gy.data();
    {
        let gbd = gb.data_mut();
        for co in 0..cout {
            gbd[co] = gyd[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
        }
    }
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for co in 0..cout {
        let g_ch = &gyd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let x_ch = &xd[ci * h * wd..(ci + 1) * h * wd];
            let gx_ch = &mut gxd[ci * h * wd..(ci + 1) * h * wd];
            for a in 0..2 {
                for bb in 0..2 {
                    let wi = ((ci * cout + co) * 2 + a) * 2 + bb;
                    let wv = wd_[wi];
                    let mut acc = T::zero();
                    for i in 0..h {
                        let g_row = (2 * i + a) * ow + bb;
                        let x_row = i * wd;
                        for j in 0..wd {
                            let gv = g_ch[g_row + 2 * j];
                            gx_ch[x_row + j] = gx_ch[x_row + j] + wv * gv;
                            acc = acc + x_ch[x_row + j] * gv;
                        }
                    }
                    gwd[wi] = gwd[wi] + acc;
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// ELU with alpha = 1: `x` for `x >= 0`, `exp(x) - 1` otherwise.
pub fn elu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = v.exp() - T::one();
        }
    }
    out
}

pub fn elu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = gy.clone();
    for (g, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
        if xv < T::zero() {
            *g = *g * xv.exp();
        }
    }
    gx
}

/// 2x2 average pooling; both spatial extents must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("avg_pool2 requires even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let quarter = sc::<T>(0.25);
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..oh {
            let r0 = ci * h * w + (2 * i) * w;
            let r1 = r0 + w;
            let o_row = ci * oh * ow + i * ow;
            for j in 0..ow {
                let s = xd[r0 + 2 * j] + xd[r0 + 2 * j + 1] + xd[r1 + 2 * j] + xd[r1 + 2 * j + 1];
                od[o_row + j] = s * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let (h, w) = (x_shape[1], x_shape[2]);
    let mut gx = Tensor::zeros(x_shape);
    let quarter = sc::<T>(0.25);
    let gd = gy.data();
    let gxd = gx.data_mut();
    for ci in 0..c {
        for i in 0..oh {
            let r0 = ci * h * w + (2 * i) * w;
            let r1 = r0 + w;
            let g_row = ci * oh * ow + i * ow;
            for j in 0..ow {
                let g = gd[g_row + j] * quarter;
                gxd[r0 + 2 * j] = gxd[r0 + 2 * j] + g;
                gxd[r0 + 2 * j + 1] = gxd[r0 + 2 * j + 1] + g;
                gxd[r1 + 2 * j] = gxd[r1 + 2 * j] + g;
                gxd[r1 + 2 * j + 1] = gxd[r1 + 2 * j + 1] + g;
            }
        }
    }
    gx
}

/// Channel concatenation.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (_, h, w) = dims3(parts[0])?;
    let mut c_total = 0;
    for p in parts {
        let (c, ph, pw) = dims3(p)?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape("concat requires matching spatial dims"));
        }
        c_total += c;
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[c_total, h, w], data)
}

/// Softmax over channel groups of `class_count`: channel `g * class_count + c`
/// holds class `c` of group `g`, and each group sums to one at every
/// spatial position.
pub fn softmax_groups<T: Scalar>(x: &Tensor<T>, class_count: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x)?;
    if c % class_count != 0 {
        return Err(Error::shape(format!(
            "channel count {c} not divisible by class count {class_count}"
        )));
    }
    let groups = c / class_count;
    let plane = h * w;
    let mut out = x.clone();
    let od = out.data_mut();
    for g in 0..groups {
        let base = g * class_count * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for k in 0..class_count {
                m = m.max(od[base + k * plane + p]);
            }
            let mut sum = T::zero();
            for k in 0..class_count {
                let i = base + k * plane + p;
                let e = (od[i] - m).exp();
                od[i] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for k in 0..class_count {
                let i = base + k * plane + p;
                od[i] = od[i] * inv;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax_groups`] given the forward output `p`:
/// `gx = p * (gy - sum_k(gy_k * p_k))` within each group.
pub fn softmax_groups_backward<T: Scalar>(p: &Tensor<T>, gy: &Tensor<T>, class_count: usize) -> Tensor<T> {
    let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let groups = c / class_count;
    let plane = h * w;
    let mut gx = Tensor::zeros(p.shape());
    let pd = p.data();
    let gd = gy.data();
    let gxd = gx.data_mut();
    for g in 0..groups {
        let base = g * class_count * plane;
        for pos in 0..plane {
            let mut dot = T::zero();
            for k in 0..class_count {
                let i = base + k * plane + pos;
                dot = dot + gd[i] * pd[i];
            }
            for k in 0..class_count {
                let i = base + k * plane + pos;
                gxd[i] = pd[i] * (gd[i] - dot);
            }
        }
    }
    gx
}

/// How normalization statistics are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    /// Per channel over its spatial plane (batch-of-one batch norm and
    /// instance norm).
    PerChannel,
    /// One statistic over all channels and positions (layer norm).
    Whole,
    /// Per channel, but taken from stored running statistics.
    FixedPerChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormCache<T> {
    pub kind: StatKind,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalize with learned per-channel scale/shift. For
/// `FixedPerChannel` the `fixed` running (mean, var) pair is required.
/// Returns the output, the cache for backward, and the batch (mean,
/// var) per channel when they were computed (for running-stat updates).
#[allow(clippy::type_complexity)]
pub fn norm_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    kind: StatKind,
    fixed: Option<(&[T], &[T])>,
) -> Result<(Tensor<T>, NormCache<T>, Option<(Vec<T>, Vec<T>)>)> {
    let (c, h, w) = dims3(x)?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape("norm scale/shift must be per-channel"));
    }
    let plane = h * w;
    let eps = sc::<T>(NORM_EPS);
    let xd = x.data();
    let sd = scale.data();
    let bd = shift.data();

    let (mean, var): (Vec<T>, Vec<T>) = match kind {
        StatKind::PerChannel => {
            let n = sc::<T>(plane as f64);
            let mut mean = Vec::with_capacity(c);
            let mut var = Vec::with_capacity(c);
            for ci in 0..c {
                let ch = &xd[ci * plane..(ci + 1) * plane];
                let m = ch.iter().copied().sum::<T>() / n;
                let v = ch.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / n;
                mean.push(m);
                var.push(v);
            }
            (mean, var)
        }
        StatKind::Whole => {
            let n = sc::<T>((c * plane) as f64);
            let m = xd.iter().copied().sum::<T>() / n;
            let v = xd.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / n;
            (vec![m], vec![v])
        }
        StatKind::FixedPerChannel => {
            let (fm, fv) = fixed.ok_or_else(|| {
                Error::invalid("running statistics requested but none were provided")
            })?;
            (fm.to_vec(), fv.to_vec())
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for ci in 0..c {
        let (m, inv) = match kind {
            StatKind::Whole => (mean[0], inv_std[0]),
            _ => (mean[ci], inv_std[ci]),
        };
        let g = sd[ci];
        let b = bd[ci];
        for p in 0..plane {
            let i = ci * plane + p;
            od[i] = (xd[i] - m) * inv * g + b;
        }
    }
    let batch_stats = match kind {
        StatKind::PerChannel => Some((mean.clone(), var)),
        _ => None,
    };
    Ok((out, NormCache { kind, mean, inv_std }, batch_stats))
}

/// Backward through normalization. For statistic-bearing kinds the
/// dependence of mean/variance on `x` is included; for fixed statistics
/// they are constants.
pub fn norm_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    cache: &NormCache<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let xd = x.data();
    let sd = scale.data();
    let gd = gy.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut gscale = Tensor::zeros(&[c]);
    let mut gshift = Tensor::zeros(&[c]);

    let stat = |ci: usize| -> (T, T) {
        match cache.kind {
            StatKind::Whole => (cache.mean[0], cache.inv_std[0]),
            _ => (cache.mean[ci], cache.inv_std[ci]),
        }
    };

    // Scale/shift gradients are per channel for every kind.
    {
        let gsd = gscale.data_mut();
        let gbd = gshift.data_mut();
        for ci in 0..c {
            let (m, inv) = stat(ci);
            let mut s_scale = T::zero();
            let mut s_shift = T::zero();
            for p in 0..plane {
                let i = ci * plane + p;
                let xhat = (xd[i] - m) * inv;
                s_scale = s_scale + gd[i] * xhat;
                s_shift = s_shift + gd[i];
            }
            gsd[ci] = s_scale;
            gbd[ci] = s_shift;
        }
    }

    let gxd = gx.data_mut();
    match cache.kind {
        StatKind::FixedPerChannel => {
            for ci in 0..c {
                let (_, inv) = stat(ci);
                let f = sd[ci] * inv;
                for p in 0..plane {
                    let i = ci * plane + p;
                    gxd[i] = gd[i] * f;
                }
            }
        }
        StatKind::PerChannel => {
            let n = sc::<T>(plane as f64);
            for ci in 0..c {
                let (m, inv) = stat(ci);
                let g = sd[ci];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for p in 0..plane {
                    let i = ci * plane + p;
                    let ghat = gd[i] * g;
                    let xhat = (xd[i] - m) * inv;
                    s1 = s1 + ghat;
                    s2 = s2 + ghat * xhat;
                }
                let m1 = s1 / n;
                let m2 = s2 / n;
                for p in 0..plane {
                    let i = ci * plane + p;
                    let ghat = gd[i] * g;
                    let xhat = (xd[i] - m) * inv;
                    gxd[i] = inv * (ghat - m1 - xhat * m2);
                }
            }
        }
        StatKind::Whole => {
            let n = sc::<T>((c * plane) as f64);
            let (m, inv) = (cache.mean[0], cache.inv_std[0]);
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ci in 0..c {
                let g = sd[ci];
                for p in 0..plane {
                    let i = ci * plane + p;
                    let ghat = gd[i] * g;
                    s1 = s1 + ghat;
                    s2 = s2 + ghat * (xd[i] - m) * inv;
                }
            }
            let m1 = s1 / n;
            let m2 = s2 / n;
            for ci in 0..c {
                let g = sd[ci];
                for p in 0..plane {
                    let i = ci * plane + p;
                    let ghat = gd[i] * g;
                    let xhat = (xd[i] - m) * inv;
                    gxd[i] = inv * (ghat - m1 - xhat * m2);
                }
            }
        }
    }
    (gx, gscale, gshift)
}
