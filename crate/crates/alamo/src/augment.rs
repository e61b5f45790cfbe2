//! Training-time sampling and stochastic augmentation: slab cropping,
//! in-plane flips, and projective deformation.
//!
//! Every operation applies the identical geometric map to image and
//! labels (bilinear vs. nearest-neighbor sampling respectively) and is
//! deterministic under a fixed RNG stream.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{reslice, reslice_labels, LabelMap, ViewAxis, Volume};

/// A stack of `s` contiguous slices (the network input unit), cropped
/// from a resliced volume. `image` and `labels` are `[s][h][w]`, `w`
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub s: usize,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub view: ViewAxis,
    /// Index of slice 0 within the resliced volume.
    pub origin_slice: usize,
}

impl Slab {
    #[inline]
    pub fn idx(&self, s: usize, h: usize, w: usize) -> usize {
        (s * self.h + h) * self.w + w
    }
}

/// In-plane projective deformation parameters. Hard bounds are fixed;
/// [`DeformParams::validate`] enforces them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformParams {
    /// Rotation angle in radians, within [-0.05, 0.05].
    pub rotation: f64,
    /// Shear scale (x as a function of y), within [-0.3, 0.3].
    pub shear: f64,
    /// Projective scale, within [-0.003, 0.003].
    pub projective: f64,
    pub apply: bool,
}

pub const ROTATION_BOUND: f64 = 0.05;
pub const SHEAR_BOUND: f64 = 0.3;
pub const PROJECTIVE_BOUND: f64 = 0.003;

impl DeformParams {
    pub fn identity() -> Self {
        DeformParams { rotation: 0.0, shear: 0.0, projective: 0.0, apply: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.abs() > ROTATION_BOUND {
            return Err(Error::invalid(format!("rotation {} outside [-{ROTATION_BOUND}, {ROTATION_BOUND}]", self.rotation)));
        }
        if self.shear.abs() > SHEAR_BOUND {
            return Err(Error::invalid(format!("shear {} outside [-{SHEAR_BOUND}, {SHEAR_BOUND}]", self.shear)));
        }
        if self.projective.abs() > PROJECTIVE_BOUND {
            return Err(Error::invalid(format!("projective {} outside [-{PROJECTIVE_BOUND}, {PROJECTIVE_BOUND}]", self.projective)));
        }
        Ok(())
    }
}

/// Per-parameter draw limits (defaults are the hard bounds).
#[derive(Debug, Clone, Copy)]
pub struct DeformLimits {
    pub rotation_max: f64,
    pub shear_max: f64,
    pub projective_max: f64,
}

impl Default for DeformLimits {
    fn default() -> Self {
        DeformLimits {
            rotation_max: ROTATION_BOUND,
            shear_max: SHEAR_BOUND,
            projective_max: PROJECTIVE_BOUND,
        }
    }
}

impl DeformLimits {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=ROTATION_BOUND).contains(&self.rotation_max) {
            return Err(Error::config(format!("rotation_max must be in [0, {ROTATION_BOUND}]")));
        }
        if !(0.0..=SHEAR_BOUND).contains(&self.shear_max) {
            return Err(Error::config(format!("shear_max must be in [0, {SHEAR_BOUND}]")));
        }
        if !(0.0..=PROJECTIVE_BOUND).contains(&self.projective_max) {
            return Err(Error::config(format!("projective_max must be in [0, {PROJECTIVE_BOUND}]")));
        }
        Ok(())
    }
}

/// Draw deformation parameters: applied with probability `p_apply`,
/// each parameter uniform over its limit range; identity otherwise.
/// Stream order: apply coin, rotation, shear, projective.
pub fn draw_params(rng: &mut Rng, p_apply: f64, limits: &DeformLimits) -> DeformParams {
    if !rng.coin(p_apply) {
        return DeformParams::identity();
    }
    DeformParams {
        rotation: rng.range_f64(-limits.rotation_max, limits.rotation_max),
        shear: rng.range_f64(-limits.shear_max, limits.shear_max),
        projective: rng.range_f64(-limits.projective_max, limits.projective_max),
        apply: true,
    }
}

/// Crop an `s`-slice slab of size `h` x `w` at a uniformly random valid
/// position. Volumes smaller than the crop in-plane are symmetrically
/// zero-padded (label 0) first; the slice axis is never padded.
/// Stream order: slice start, h start, w start.
pub fn crop_slab(
    v: &Volume,
    labels: &LabelMap,
    view: ViewAxis,
    s: usize,
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> Result<Slab> {
    if v.dims != labels.dims {
        return Err(Error::shape(format!(
            "volume dims {:?} and label dims {:?} differ",
            v.dims, labels.dims
        )));
    }
    if s == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("slab extents must be >= 1"));
    }
    let rv = reslice(v, view)?;
    let rl = reslice_labels(labels, view)?;
    let [ns, nh, nw] = rv.dims;
    if ns < s {
        return Err(Error::invalid(format!(
            "volume has {ns} slices along the {view:?} axis, need {s} (slabs never pad along the slice axis)"
        )));
    }
    let (ph, pad_h) = padded(nh, h);
    let (pw, pad_w) = padded(nw, w);

    let s0 = rng.below((ns - s + 1) as u64) as usize;
    let h0 = rng.below((ph - h + 1) as u64) as usize;
    let w0 = rng.below((pw - w + 1) as u64) as usize;
    Ok(crop_at(&rv, &rl, view, [s, h, w], [s0, h0, w0], [pad_h, pad_w]))
}

/// Deterministic centered crop with the same padding rule as
/// [`crop_slab`] (used for validation losses).
pub fn center_slab(
    v: &Volume,
    labels: &LabelMap,
    view: ViewAxis,
    s: usize,
    h: usize,
    w: usize,
) -> Result<Slab> {
    if v.dims != labels.dims {
        return Err(Error::shape(format!(
            "volume dims {:?} and label dims {:?} differ",
            v.dims, labels.dims
        )));
    }
    let rv = reslice(v, view)?;
    let rl = reslice_labels(labels, view)?;
    let [ns, nh, nw] = rv.dims;
    if ns < s {
        return Err(Error::invalid(format!(
            "volume has {ns} slices along the {view:?} axis, need {s} (slabs never pad along the slice axis)"
        )));
    }
    let (ph, pad_h) = padded(nh, h);
    let (pw, pad_w) = padded(nw, w);
    let starts = [(ns - s) / 2, (ph - h) / 2, (pw - w) / 2];
    Ok(crop_at(&rv, &rl, view, [s, h, w], starts, [pad_h, pad_w]))
}

fn crop_at(
    rv: &Volume,
    rl: &LabelMap,
    view: ViewAxis,
    size: [usize; 3],
    start: [usize; 3],
    pad: [usize; 2],
) -> Slab {
    let [s, h, w] = size;
    let [s0, h0, w0] = start;
    let [pad_h, pad_w] = pad;
    let [_, nh, nw] = rv.dims;
    let mut image = vec![0.0f32; s * h * w];
    let mut lab = vec![0u8; s * h * w];
    for ds in 0..s {
        let src_s = s0 + ds;
        for dh in 0..h {
            // Position in the padded plane, mapped back to the source.
            let src_h = (h0 + dh) as isize - pad_h as isize;
            if src_h < 0 || src_h as usize >= nh {
                continue;
            }
            for dw in 0..w {
                let src_w = (w0 + dw) as isize - pad_w as isize;
                if src_w < 0 || src_w as usize >= nw {
                    continue;
                }
                let di = (ds * h + dh) * w + dw;
                image[di] = rv.at(src_s, src_h as usize, src_w as usize);
                lab[di] = rl.at(src_s, src_h as usize, src_w as usize);
            }
        }
    }
    Slab { s, h, w, image, labels: lab, view, origin_slice: s0 }
}

/// Padded extent and leading pad for symmetric zero-padding up to `want`.
fn padded(have: usize, want: usize) -> (usize, usize) {
    if have >= want {
        (have, 0)
    } else {
        (want, (want - have) / 2)
    }
}

/// Independently flip up-down (h axis) and left-right (w axis), each
/// with probability `p`; the slice axis is never flipped.
/// Stream order: up-down coin, left-right coin.
pub fn random_flip(slab: &Slab, p: f64, rng: &mut Rng) -> Slab {
    let ud = rng.coin(p);
    let lr = rng.coin(p);
    flip(slab, ud, lr)
}

pub fn flip(slab: &Slab, up_down: bool, left_right: bool) -> Slab {
    if !up_down && !left_right {
        return slab.clone();
    }
    let mut out = slab.clone();
    for s in 0..slab.s {
        for h in 0..slab.h {
            let sh = if up_down { slab.h - 1 - h } else { h };
            for w in 0..slab.w {
                let sw = if left_right { slab.w - 1 - w } else { w };
                let di = out.idx(s, h, w);
                let si = slab.idx(s, sh, sw);
                out.image[di] = slab.image[si];
                out.labels[di] = slab.labels[si];
            }
        }
    }
    out
}

/// The 3x3 homography `P * Sh * R` about the slice center, acting on
/// homogeneous in-plane coordinates `(x, y, 1)` with `x` along the `w`
/// axis and `y` along the `h` axis.
fn homography(p: &DeformParams) -> [[f64; 3]; 3] {
    let (sin, cos) = p.rotation.sin_cos();
    let r = [[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]];
    let sh = [[1.0, p.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let pr = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [p.projective, p.projective, 1.0]];
    mat_mul(&pr, &mat_mul(&sh, &r))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

fn mat_inv(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return Err(Error::invalid(format!("homography is not invertible (det {det:e})")));
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Ok(inv)
}

/// Apply the projective deformation to every slice of the slab: image
/// sampled bilinearly, labels nearest-neighbor, out-of-field filled
/// with 0 / background. The same homography maps an input position to
/// its output position; sampling uses the inverse map.
pub fn projective_deform(slab: &Slab, params: &DeformParams) -> Result<Slab> {
    params.validate()?;
    if !params.apply {
        return Ok(slab.clone());
    }
    let hmat = homography(params);
    let hinv = mat_inv(&hmat)?;
    let cx = (slab.w as f64 - 1.0) / 2.0;
    let cy = (slab.h as f64 - 1.0) / 2.0;

    let mut out = slab.clone();
    for s in 0..slab.s {
        for oy in 0..slab.h {
            for ox in 0..slab.w {
                let q = [ox as f64 - cx, oy as f64 - cy];
                let wden = hinv[2][0] * q[0] + hinv[2][1] * q[1] + hinv[2][2];
                let sx = (hinv[0][0] * q[0] + hinv[0][1] * q[1] + hinv[0][2]) / wden + cx;
                let sy = (hinv[1][0] * q[0] + hinv[1][1] * q[1] + hinv[1][2]) / wden + cy;
                let di = out.idx(s, oy, ox);
                out.image[di] = bilinear(slab, s, sy, sx);
                out.labels[di] = nearest_label(slab, s, sy, sx);
            }
        }
    }
    Ok(out)
}

fn bilinear(slab: &Slab, s: usize, y: f64, x: f64) -> f32 {
    if y < 0.0 || x < 0.0 || y > (slab.h - 1) as f64 || x > (slab.w - 1) as f64 {
        return 0.0;
    }
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(slab.h - 1);
    let x1 = (x0 + 1).min(slab.w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let v00 = slab.image[slab.idx(s, y0, x0)] as f64;
    let v01 = slab.image[slab.idx(s, y0, x1)] as f64;
    let v10 = slab.image[slab.idx(s, y1, x0)] as f64;
    let v11 = slab.image[slab.idx(s, y1, x1)] as f64;
    let v0 = v00 + (v01 - v00) * fx;
    let v1 = v10 + (v11 - v10) * fx;
    (v0 + (v1 - v0) * fy) as f32
}

fn nearest_label(slab: &Slab, s: usize, y: f64, x: f64) -> u8 {
    let yi = y.round();
    let xi = x.round();
    if yi < 0.0 || xi < 0.0 || yi > (slab.h - 1) as f64 || xi > (slab.w - 1) as f64 {
        return 0;
    }
    slab.labels[slab.idx(s, yi as usize, xi as usize)]
}
