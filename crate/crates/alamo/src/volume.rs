//! Volumetric data types, resampling, standardization and view re-slicing.
//!
//! Axis convention throughout the crate: arrays are indexed `[z][y][x]`
//! with `x` fastest-varying; `z` is the transversal slice axis. Grids
//! use corner alignment: index `i` along an axis with spacing `s` sits
//! at physical coordinate `i * s` millimeters.

use crate::error::{Error, Result};

/// Number of segmentation classes (background + 10 organs).
pub const CLASS_COUNT: usize = 11;

/// Class id / organ name table. Id 0 is background.
pub const CLASS_TABLE: [(u8, &str); CLASS_COUNT] = [
    (0, "background"),
    (1, "liver"),
    (2, "spleen"),
    (3, "pancreas"),
    (4, "right_kidney"),
    (5, "left_kidney"),
    (6, "stomach"),
    (7, "duodenum"),
    (8, "small_intestine"),
    (9, "spinal_cord"),
    (10, "vertebral_bodies"),
];

pub fn class_name(id: u8) -> &'static str {
    CLASS_TABLE
        .get(id as usize)
        .map(|(_, name)| *name)
        .unwrap_or("unknown")
}

/// Scalar intensity grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Extents as `[z, y, x]`.
    pub dims: [usize; 3],
    /// Spacing in millimeters as `[sz, sy, sx]`, all strictly positive.
    pub spacing: [f64; 3],
    /// Voxels in `[z][y][x]` order, `x` fastest.
    pub data: Vec<f32>,
}

/// Integer class-id grid over [`CLASS_COUNT`] classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<u8>,
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("dims must all be >= 1, got {dims:?}")));
    }
    Ok(())
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "spacing components must be strictly positive, got {spacing:?}"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} in volume data")));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing, vec![value; n])
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(z, y, x)]
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    pub fn is_isotropic(&self) -> bool {
        let [a, b, c] = self.spacing;
        (a - b).abs() < 1e-9 && (a - c).abs() < 1e-9
    }
}

impl LabelMap {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(format!(
                "label data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|&v| v as usize >= CLASS_COUNT) {
            return Err(Error::invalid("class id out of range (must be 0..=10)"));
        }
        Ok(LabelMap { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        LabelMap::new(dims, spacing, vec![0u8; n])
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.idx(z, y, x)]
    }
}

/// The three orthogonal slicing planes. Re-slicing an isotropic volume
/// is a pure axis permutation; each permutation below is an involution
/// (it is its own inverse).
///
/// Fixed permutation table, `output index <- input index`:
/// * `Transversal`: `[z, y, x]` (identity; slices along z)
/// * `Coronal`:     `[y, z, x]` (slices along y)
/// * `Sagittal`:    `[x, y, z]` (slices along x)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    Transversal,
    Coronal,
    Sagittal,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Transversal, ViewAxis::Coronal, ViewAxis::Sagittal];

    /// `perm[out_axis] = in_axis`.
    pub fn perm(self) -> [usize; 3] {
        match self {
            ViewAxis::Transversal => [0, 1, 2],
            ViewAxis::Coronal => [1, 0, 2],
            ViewAxis::Sagittal => [2, 1, 0],
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ViewAxis::Transversal => "t",
            ViewAxis::Coronal => "c",
            ViewAxis::Sagittal => "s",
        }
    }

    pub fn parse_short(s: &str) -> Result<Self> {
        match s {
            "t" | "transversal" => Ok(ViewAxis::Transversal),
            "c" | "coronal" => Ok(ViewAxis::Coronal),
            "s" | "sagittal" => Ok(ViewAxis::Sagittal),
            other => Err(Error::config(format!("unknown view '{other}' (expected t, c or s)"))),
        }
    }
}

/// Permute a dense `[z][y][x]` grid. `perm[out_axis] = in_axis`.
pub(crate) fn permute3<T: Copy>(data: &[T], dims: [usize; 3], perm: [usize; 3]) -> (Vec<T>, [usize; 3]) {
    let out_dims = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
    let mut out = Vec::with_capacity(data.len());
    let mut inv = [0usize; 3];
    for (o, &i) in perm.iter().enumerate() {
        inv[i] = o;
    }
    let mut coord = [0usize; 3];
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                let oc = [a, b, c];
                coord[0] = oc[inv[0]];
                coord[1] = oc[inv[1]];
                coord[2] = oc[inv[2]];
                out.push(data[(coord[0] * dims[1] + coord[1]) * dims[2] + coord[2]]);
            }
        }
    }
    (out, out_dims)
}

fn require_isotropic(spacing: [f64; 3]) -> Result<()> {
    let [a, b, c] = spacing;
    if (a - b).abs() >= 1e-9 || (a - c).abs() >= 1e-9 {
        return Err(Error::invalid(format!(
            "anisotropic input: reslice requires isotropic spacing, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Re-slice an isotropic volume into the given view. `Transversal`
/// is the identity; every view applied twice returns the input.
pub fn reslice(v: &Volume, view: ViewAxis) -> Result<Volume> {
    require_isotropic(v.spacing)?;
    if view == ViewAxis::Transversal {
        return Ok(v.clone());
    }
    let (data, dims) = permute3(&v.data, v.dims, view.perm());
    Ok(Volume { dims, spacing: v.spacing, data })
}

pub fn reslice_labels(l: &LabelMap, view: ViewAxis) -> Result<LabelMap> {
    require_isotropic(l.spacing)?;
    if view == ViewAxis::Transversal {
        return Ok(l.clone());
    }
    let (data, dims) = permute3(&l.data, l.dims, view.perm());
    Ok(LabelMap { dims, spacing: l.spacing, data })
}

fn output_dims(dims: [usize; 3], spacing: [f64; 3], target: f64) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target).round() as usize).max(1);
    }
    out
}

/// Trilinear isotropic resampling with clamp-to-edge.
///
/// Output index `i` maps to source index `i * target / spacing`; when
/// the target equals the source spacing the ratio is exactly 1 and the
/// op is an exact identity.
pub fn resample_isotropic(v: &Volume, target_spacing_mm: f64) -> Result<Volume> {
    if !(target_spacing_mm > 0.0) || !target_spacing_mm.is_finite() {
        return Err(Error::invalid(format!(
            "target spacing must be strictly positive, got {target_spacing_mm}"
        )));
    }
    let out_dims = output_dims(v.dims, v.spacing, target_spacing_mm);
    let ratio = [
        target_spacing_mm / v.spacing[0],
        target_spacing_mm / v.spacing[1],
        target_spacing_mm / v.spacing[2],
    ];
    let [nz, ny, nx] = v.dims;
    let mut out = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for z in 0..out_dims[0] {
        let (z0, z1, fz) = lerp_coords(z as f64 * ratio[0], nz);
        for y in 0..out_dims[1] {
            let (y0, y1, fy) = lerp_coords(y as f64 * ratio[1], ny);
            for x in 0..out_dims[2] {
                let (x0, x1, fx) = lerp_coords(x as f64 * ratio[2], nx);
                let c000 = v.at(z0, y0, x0) as f64;
                let c001 = v.at(z0, y0, x1) as f64;
                let c010 = v.at(z0, y1, x0) as f64;
                let c011 = v.at(z0, y1, x1) as f64;
                let c100 = v.at(z1, y0, x0) as f64;
                let c101 = v.at(z1, y0, x1) as f64;
                let c110 = v.at(z1, y1, x0) as f64;
                let c111 = v.at(z1, y1, x1) as f64;
                let c00 = c000 + (c001 - c000) * fx;
                let c01 = c010 + (c011 - c010) * fx;
                let c10 = c100 + (c101 - c100) * fx;
                let c11 = c110 + (c111 - c110) * fx;
                let c0 = c00 + (c01 - c00) * fy;
                let c1 = c10 + (c11 - c10) * fy;
                out.push((c0 + (c1 - c0) * fz) as f32);
            }
        }
    }
    Ok(Volume {
        dims: out_dims,
        spacing: [target_spacing_mm; 3],
        data: out,
    })
}

/// Source coordinate split into lower/upper voxel and interpolation
/// fraction, clamped to the grid edge.
fn lerp_coords(src: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let s = src.clamp(0.0, max);
    let lo = s.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - lo)
}

/// Companion nearest-neighbor label resampling; never invents class ids.
pub fn resample_labels(l: &LabelMap, target_spacing_mm: f64) -> Result<LabelMap> {
    if !(target_spacing_mm > 0.0) || !target_spacing_mm.is_finite() {
        return Err(Error::invalid(format!(
            "target spacing must be strictly positive, got {target_spacing_mm}"
        )));
    }
    let out_dims = output_dims(l.dims, l.spacing, target_spacing_mm);
    resample_labels_to(l, out_dims, [target_spacing_mm; 3])
}

/// Nearest-neighbor resample onto an explicit target grid (used to map
/// fused predictions back to the original acquisition grid).
pub fn resample_labels_to(l: &LabelMap, out_dims: [usize; 3], out_spacing: [f64; 3]) -> Result<LabelMap> {
    check_dims(out_dims)?;
    check_spacing(out_spacing)?;
    let ratio = [
        out_spacing[0] / l.spacing[0],
        out_spacing[1] / l.spacing[1],
        out_spacing[2] / l.spacing[2],
    ];
    let nearest = |src: f64, n: usize| -> usize {
        (src.round().max(0.0) as usize).min(n - 1)
    };
    let mut out = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for z in 0..out_dims[0] {
        let sz = nearest(z as f64 * ratio[0], l.dims[0]);
        for y in 0..out_dims[1] {
            let sy = nearest(y as f64 * ratio[1], l.dims[1]);
            for x in 0..out_dims[2] {
                let sx = nearest(x as f64 * ratio[2], l.dims[2]);
                out.push(l.at(sz, sy, sx));
            }
        }
    }
    Ok(LabelMap {
        dims: out_dims,
        spacing: out_spacing,
        data: out,
    })
}

/// Shift to zero mean and scale to unit population standard deviation,
/// computed over all voxels of the dataset.
pub fn standardize(v: &Volume) -> Result<Volume> {
    if v.voxel_count() < 2 {
        return Err(Error::invalid("standardize requires at least 2 voxels"));
    }
    let n = v.voxel_count() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(Error::invalid("constant volume: standard deviation is zero"));
    }
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / sd) as f32).collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_volume(dims: [usize; 3], spacing: [f64; 3], rng: &mut Rng) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|_| rng.range_f64(-100.0, 100.0) as f32).collect();
        Volume::new(dims, spacing, data).unwrap()
    }

    #[test]
    fn rejects_zero_dims_and_bad_spacing() {
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![f32::NAN]).is_err());
    }

    #[test]
    fn labelmap_rejects_out_of_range_ids() {
        let err = LabelMap::new([1, 1, 2], [1.0; 3], vec![3, 11]).unwrap_err();
        assert!(err.to_string().contains("class id out of range"), "{err}");
    }

    #[test]
    fn class_table_is_consistent() {
        for (i, (id, _)) in CLASS_TABLE.iter().enumerate() {
            assert_eq!(*id as usize, i);
        }
        let mut names: Vec<&str> = CLASS_TABLE.iter().map(|(_, n)| *n).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), CLASS_COUNT);
        assert_eq!(class_name(1), "liver");
        assert_eq!(class_name(10), "vertebral_bodies");
    }

    #[test]
    fn reslice_transversal_is_identity() {
        let mut rng = Rng::seed_from_u64(0);
        let v = random_volume([4, 5, 6], [1.0; 3], &mut rng);
        assert_eq!(reslice(&v, ViewAxis::Transversal).unwrap(), v);
    }

    #[test]
    fn reslice_twice_is_identity() {
        let mut rng = Rng::seed_from_u64(1);
        let v = random_volume([4, 5, 6], [1.0; 3], &mut rng);
        for view in ViewAxis::ALL {
            let once = reslice(&v, view).unwrap();
            let twice = reslice(&once, view).unwrap();
            assert_eq!(twice, v, "{view:?}");
        }
    }

    #[test]
    fn reslice_moves_marked_voxel_per_table() {
        // Marked voxel at (z,y,x) = (1,2,3) in a 4x5x6 volume.
        let mut v = Volume::filled([4, 5, 6], [1.0; 3], 0.0).unwrap();
        let i = v.idx(1, 2, 3);
        v.data[i] = 1.0;
        // Coronal permutes [z,y,x] -> [y,z,x]: marked voxel at (2,1,3).
        let c = reslice(&v, ViewAxis::Coronal).unwrap();
        assert_eq!(c.dims, [5, 4, 6]);
        assert_eq!(c.at(2, 1, 3), 1.0);
        assert_eq!(c.data.iter().filter(|&&x| x != 0.0).count(), 1);
        // Sagittal permutes [z,y,x] -> [x,y,z]: marked voxel at (3,2,1).
        let s = reslice(&v, ViewAxis::Sagittal).unwrap();
        assert_eq!(s.dims, [6, 5, 4]);
        assert_eq!(s.at(3, 2, 1), 1.0);
    }

    #[test]
    fn reslice_rejects_anisotropic() {
        let v = Volume::filled([2, 2, 2], [1.0, 1.0, 2.0], 0.0).unwrap();
        let err = reslice(&v, ViewAxis::Coronal).unwrap_err();
        assert!(err.to_string().contains("anisotropic"), "{err}");
    }

    #[test]
    fn label_reslice_preserves_alphabet() {
        let mut rng = Rng::seed_from_u64(2);
        let dims = [3, 4, 5];
        let data: Vec<u8> = (0..60).map(|_| rng.below(3) as u8 * 5).collect();
        let l = LabelMap::new(dims, [1.0; 3], data).unwrap();
        let input_set: std::collections::BTreeSet<u8> = l.data.iter().copied().collect();
        for view in ViewAxis::ALL {
            let r = reslice_labels(&l, view).unwrap();
            let out_set: std::collections::BTreeSet<u8> = r.data.iter().copied().collect();
            assert_eq!(out_set, input_set);
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::filled([3, 4, 5], [2.0, 1.0, 1.5], 7.25).unwrap();
        let r = resample_isotropic(&v, 1.2).unwrap();
        assert_eq!(r.spacing, [1.2; 3]);
        assert!(r.data.iter().all(|&x| x == 7.25));
    }

    #[test]
    fn resample_output_dims_round() {
        let v = Volume::filled([10, 10, 10], [2.0, 1.0, 1.5], 0.0).unwrap();
        let r = resample_isotropic(&v, 1.2).unwrap();
        // round(10*2/1.2)=round(16.67)=17, round(10*1/1.2)=round(8.33)=8,
        // round(10*1.5/1.2)=round(12.5)=13 (half away from zero).
        assert_eq!(r.dims, [17, 8, 13]);
    }

    #[test]
    fn resample_linear_ramp_is_exact_interior() {
        // f(x) = x along the x axis, unit spacing, resampled to 0.5 mm.
        let dims = [2, 2, 9];
        let mut data = Vec::new();
        for _z in 0..2 {
            for _y in 0..2 {
                for x in 0..9 {
                    data.push(x as f32);
                }
            }
        }
        let v = Volume::new(dims, [1.0; 3], data).unwrap();
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.dims[2], 18);
        for x in 0..r.dims[2] {
            let expect = (x as f64 * 0.5).min(8.0);
            let got = r.at(0, 0, x) as f64;
            assert!((got - expect).abs() < 1e-9, "x={x} got {got} expect {expect}");
        }
    }

    #[test]
    fn resample_exact_on_affine_field() {
        // Dyadic affine field: a*x + b*y + c*z + d with dyadic coefficients
        // evaluates exactly in both f32 storage and f64 interpolation, so
        // interior error is exactly zero.
        let dims = [5, 6, 7];
        let (a, b, c, d) = (0.25f64, 0.5f64, 1.0f64, 2.0f64);
        let mut data = Vec::new();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push((a * x as f64 + b * y as f64 + c * z as f64 + d) as f32);
                }
            }
        }
        let v = Volume::new(dims, [2.0; 3], data).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        // Interior voxels only: source coordinate i*0.5 stays inside the grid.
        for z in 0..r.dims[0] {
            for y in 0..r.dims[1] {
                for x in 0..r.dims[2] {
                    let (sz, sy, sx) = (z as f64 * 0.5, y as f64 * 0.5, x as f64 * 0.5);
                    if sz > (dims[0] - 1) as f64 || sy > (dims[1] - 1) as f64 || sx > (dims[2] - 1) as f64 {
                        continue;
                    }
                    let expect = a * sx + b * sy + c * sz + d;
                    let got = r.at(z, y, x) as f64;
                    assert!((got - expect).abs() < 1e-9, "({z},{y},{x}): {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn resample_to_same_spacing_is_identity() {
        let mut rng = Rng::seed_from_u64(3);
        let v = random_volume([4, 5, 6], [1.2; 3], &mut rng);
        let r = resample_isotropic(&v, 1.2).unwrap();
        assert_eq!(r.dims, v.dims);
        for (a, b) in r.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_rejects_nonpositive_target() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        assert!(resample_isotropic(&v, 0.0).is_err());
        assert!(resample_isotropic(&v, -1.0).is_err());
    }

    #[test]
    fn label_resample_preserves_alphabet() {
        let dims = [6, 6, 6];
        let mut data = vec![0u8; 216];
        for z in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    data[(z * 6 + y) * 6 + x] = 7;
                }
            }
        }
        let l = LabelMap::new(dims, [1.0; 3], data).unwrap();
        let r = resample_labels(&l, 0.7).unwrap();
        let set: std::collections::BTreeSet<u8> = r.data.iter().copied().collect();
        assert_eq!(set, [0u8, 7u8].into_iter().collect());
    }

    #[test]
    fn standardize_two_voxels() {
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![1.0, 3.0]).unwrap();
        let s = standardize(&v).unwrap();
        assert_eq!(s.data, vec![-1.0, 1.0]);
    }

    #[test]
    fn standardize_constant_errors() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 5.0).unwrap();
        let err = standardize(&v).unwrap_err();
        assert!(err.to_string().contains("constant volume"), "{err}");
    }

    #[test]
    fn standardize_moments_and_idempotence() {
        let mut rng = Rng::seed_from_u64(4);
        let v = random_volume([8, 8, 8], [1.0; 3], &mut rng);
        let s = standardize(&v).unwrap();
        let n = s.voxel_count() as f64;
        let mean = s.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = s.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        let ss = standardize(&s).unwrap();
        for (a, b) in ss.data.iter().zip(&s.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
