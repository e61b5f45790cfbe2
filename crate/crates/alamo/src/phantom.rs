//! Synthetic abdominal-like phantoms: paired (Volume, LabelMap) data
//! generated deterministically from a seed, plus dataset splitting.
//!
//! A phantom is a stack of parameterized shapes (ellipsoids and
//! axis-aligned tubes) rasterized into a label map with last-shape-wins
//! overlap resolution. The intensity volume is the per-class mean plus
//! a smooth low-frequency bias field (three fixed-frequency cosines
//! with seed-drawn phases) plus i.i.d. Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{LabelMap, Volume, CLASS_COUNT};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum OrganShape {
    /// Axis-aligned ellipsoid: `sum(((p - center) / radii)^2) <= 1`.
    Ellipsoid {
        class_id: u8,
        center: [f64; 3],
        radii: [f64; 3],
    },
    /// Elliptic cylinder along one axis (0 = z, 1 = y, 2 = x).
    Tube {
        class_id: u8,
        axis: usize,
        center: [f64; 3],
        /// Cross-section radii for the two non-axis dimensions, in
        /// `[z, y, x]` order with the axis entry ignored.
        radii: [f64; 3],
        half_length: f64,
    },
}

impl OrganShape {
    pub fn class_id(&self) -> u8 {
        match self {
            OrganShape::Ellipsoid { class_id, .. } | OrganShape::Tube { class_id, .. } => *class_id,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            OrganShape::Ellipsoid { center, radii, .. } => {
                let mut q = 0.0;
                for a in 0..3 {
                    let d = (p[a] - center[a]) / radii[a];
                    q += d * d;
                }
                q <= 1.0
            }
            OrganShape::Tube { axis, center, radii, half_length, .. } => {
                if (p[*axis] - center[*axis]).abs() > *half_length {
                    return false;
                }
                let mut q = 0.0;
                for a in 0..3 {
                    if a == *axis {
                        continue;
                    }
                    let d = (p[a] - center[a]) / radii[a];
                    q += d * d;
                }
                q <= 1.0
            }
        }
    }

    /// Axis-aligned bounding box (lo, hi), inclusive, in voxel units.
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            OrganShape::Ellipsoid { center, radii, .. } => {
                let lo = [center[0] - radii[0], center[1] - radii[1], center[2] - radii[2]];
                let hi = [center[0] + radii[0], center[1] + radii[1], center[2] + radii[2]];
                (lo, hi)
            }
            OrganShape::Tube { axis, center, radii, half_length, .. } => {
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for a in 0..3 {
                    let r = if a == *axis { *half_length } else { radii[a] };
                    lo[a] = center[a] - r;
                    hi[a] = center[a] + r;
                }
                (lo, hi)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    /// Later shapes overwrite earlier ones where they overlap.
    pub shapes: Vec<OrganShape>,
    /// Mean intensity per class id, indexed 0..=10 (0 = background).
    pub intensity_mean: Vec<f64>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("phantom dims must all be >= 1"));
        }
        if self.noise_sigma < 0.0 || self.bias_amplitude < 0.0 {
            return Err(Error::invalid("noise_sigma and bias_amplitude must be >= 0"));
        }
        if self.intensity_mean.len() != CLASS_COUNT {
            return Err(Error::invalid(format!(
                "intensity_mean must list {CLASS_COUNT} classes, got {}",
                self.intensity_mean.len()
            )));
        }
        let mut seen = [false; CLASS_COUNT];
        for shape in &self.shapes {
            let id = shape.class_id() as usize;
            if id == 0 || id >= CLASS_COUNT {
                return Err(Error::invalid(format!("shape class id {id} out of range 1..=10")));
            }
            if seen[id] {
                return Err(Error::invalid(format!("duplicate class id {id} among shapes")));
            }
            seen[id] = true;
            if let OrganShape::Tube { axis, .. } = shape {
                if *axis > 2 {
                    return Err(Error::invalid("tube axis must be 0, 1 or 2"));
                }
            }
            let (lo, hi) = shape.bounds();
            for a in 0..3 {
                let r = match shape {
                    OrganShape::Ellipsoid { radii, .. } => radii[a],
                    OrganShape::Tube { axis, radii, half_length, .. } => {
                        if a == *axis { *half_length } else { radii[a] }
                    }
                };
                if !(r > 0.0) {
                    return Err(Error::invalid("shape radii must be strictly positive"));
                }
                if lo[a] < 0.0 || hi[a] > (self.dims[a] - 1) as f64 {
                    return Err(Error::invalid(format!(
                        "shape out of bounds: class {} extends to [{:.1}, {:.1}] on axis {a} (dims {:?})",
                        shape.class_id(),
                        lo[a],
                        hi[a],
                        self.dims
                    )));
                }
            }
        }
        Ok(())
    }
}

// Fixed spatial frequencies (cycles across the volume) of the three
// bias-field cosines; only their phases are seed-drawn.
const BIAS_FREQS: [[f64; 3]; 3] = [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];

/// Rasterize a phantom. Deterministic for a given spec (the spec's own
/// seed drives phases and noise; the caller's RNG is untouched).
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let [nz, ny, nx] = spec.dims;
    let n = nz * ny * nx;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let phases: Vec<f64> = (0..3).map(|_| rng.range_f64(0.0, std::f64::consts::TAU)).collect();

    let mut labels = vec![0u8; n];
    for shape in &spec.shapes {
        // Last-listed shape wins, so later shapes simply overwrite.
        let (lo, hi) = shape.bounds();
        let zr = lo[0].floor().max(0.0) as usize..=(hi[0].ceil() as usize).min(nz - 1);
        let yr = lo[1].floor().max(0.0) as usize..=(hi[1].ceil() as usize).min(ny - 1);
        let xr = lo[2].floor().max(0.0) as usize..=(hi[2].ceil() as usize).min(nx - 1);
        for z in zr {
            for y in yr.clone() {
                for x in xr.clone() {
                    if shape.contains([z as f64, y as f64, x as f64]) {
                        labels[(z * ny + y) * nx + x] = shape.class_id();
                    }
                }
            }
        }
    }

    let amp = spec.bias_amplitude / 3.0;
    let mut data = Vec::with_capacity(n);
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut bias = 0.0;
                if spec.bias_amplitude > 0.0 {
                    let fz = z as f64 / nz as f64;
                    let fy = y as f64 / ny as f64;
                    let fx = x as f64 / nx as f64;
                    for (k, freq) in BIAS_FREQS.iter().enumerate() {
                        let arg = std::f64::consts::TAU * (freq[0] * fz + freq[1] * fy + freq[2] * fx)
                            + phases[k];
                        bias += amp * arg.cos();
                    }
                }
                let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * rng.normal() } else { 0.0 };
                let mean = spec.intensity_mean[labels[i] as usize];
                data.push((mean + bias + noise) as f32);
                i += 1;
            }
        }
    }

    let vol = Volume::new(spec.dims, [1.0; 3], data)?;
    let lab = LabelMap::new(spec.dims, [1.0; 3], labels)?;
    Ok((vol, lab))
}

/// Draw a plausible random phantom spec: `organ_count` ellipsoids/tubes
/// with well-separated class intensities. Case `index` under dataset
/// `seed` is reproducible in isolation.
pub fn random_spec(
    dims: [usize; 3],
    organ_count: usize,
    seed: u64,
    index: u64,
    noise_sigma: f64,
    bias_amplitude: f64,
) -> Result<PhantomSpec> {
    if organ_count == 0 || organ_count > 10 {
        return Err(Error::invalid("organ_count must be in 1..=10"));
    }
    let mut rng = Rng::derive(seed, index);
    let mut shapes = Vec::with_capacity(organ_count);
    for organ in 0..organ_count {
        let class_id = (organ + 1) as u8;
        // Radii bounded so the shape always fits: at most a quarter of
        // the smallest extent, at least 2 voxels.
        let mut radii = [0.0; 3];
        for (a, r) in radii.iter_mut().enumerate() {
            let max_r = ((spec_extent(dims[a])) / 4.0).max(2.0);
            *r = rng.range_f64(2.0, max_r.max(2.01));
        }
        let mut center = [0.0; 3];
        let make_tube = organ_count >= 4 && organ == organ_count - 1;
        if make_tube {
            let axis = rng.below(3) as usize;
            let half_length = (spec_extent(dims[axis]) / 3.0).max(2.0);
            for a in 0..3 {
                let r = if a == axis { half_length } else { radii[a] };
                center[a] = rng.range_f64(r, (dims[a] - 1) as f64 - r);
            }
            shapes.push(OrganShape::Tube { class_id, axis, center, radii, half_length });
        } else {
            for a in 0..3 {
                center[a] = rng.range_f64(radii[a], (dims[a] - 1) as f64 - radii[a]);
            }
            shapes.push(OrganShape::Ellipsoid { class_id, center, radii });
        }
    }
    // Class means spread across [0, 100] with small per-case jitter so
    // no two classes collide.
    let mut intensity_mean = vec![0.0; CLASS_COUNT];
    for (c, m) in intensity_mean.iter_mut().enumerate() {
        *m = 100.0 * c as f64 / 10.0 + rng.range_f64(-2.0, 2.0);
    }
    let spec = PhantomSpec {
        dims,
        seed: seed ^ (index.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        noise_sigma,
        bias_amplitude,
        shapes,
        intensity_mean,
    };
    spec.validate()?;
    Ok(spec)
}

fn spec_extent(d: usize) -> f64 {
    (d.saturating_sub(1)) as f64
}

/// Split `0..n` into train/val/test ids at the 66:16:20 ratio.
///
/// Sizes use largest-remainder rounding (total preserved); every split
/// then receives at least one case, taking from the largest split.
/// Membership is a seeded shuffle of `0..n`.
pub fn split_dataset(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 cases to split, got {n}")));
    }
    let sizes = split_sizes(n);
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seed);
    rng.shuffle(&mut ids);
    let train = ids[..sizes[0]].to_vec();
    let val = ids[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = ids[sizes[0] + sizes[1]..].to_vec();
    Ok((train, val, test))
}

pub fn split_sizes(n: usize) -> [usize; 3] {
    const WEIGHTS: [f64; 3] = [66.0, 16.0, 20.0];
    const TOTAL: f64 = 102.0;
    let raw: Vec<f64> = WEIGHTS.iter().map(|w| n as f64 * w / TOTAL).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut remaining = n - sizes.iter().sum::<usize>();
    // Largest remainder first; ties resolved by split order.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).partial_cmp(&(raw[a] - raw[a].floor())).unwrap());
    let mut oi = 0;
    while remaining > 0 {
        sizes[order[oi % 3]] += 1;
        remaining -= 1;
        oi += 1;
    }
    // Every split non-empty, taking from the largest.
    for i in 0..3 {
        while sizes[i] == 0 {
            let largest = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            sizes[largest] -= 1;
            sizes[i] += 1;
        }
    }
    [sizes[0], sizes[1], sizes[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_spec(dims: [usize; 3], shapes: Vec<OrganShape>) -> PhantomSpec {
        PhantomSpec {
            dims,
            seed: 0,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            shapes,
            intensity_mean: (0..CLASS_COUNT).map(|c| 10.0 * c as f64).collect(),
        }
    }

    #[test]
    fn empty_spec_gives_constant_background() {
        let spec = flat_spec([4, 4, 4], vec![]);
        let (vol, lab) = generate(&spec).unwrap();
        assert!(lab.data.iter().all(|&l| l == 0));
        assert!(vol.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = flat_spec(
            [12, 12, 12],
            vec![OrganShape::Ellipsoid { class_id: 1, center: [5.0, 5.0, 5.0], radii: [3.0, 2.0, 2.0] }],
        );
        spec.noise_sigma = 1.5;
        spec.bias_amplitude = 5.0;
        let (v1, l1) = generate(&spec).unwrap();
        let (v2, l2) = generate(&spec).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn ellipsoid_voxel_count_matches_brute_force() {
        let center = [8.0, 8.0, 8.0];
        let radii = [3.0, 3.0, 3.0];
        let spec = flat_spec(
            [16, 16, 16],
            vec![OrganShape::Ellipsoid { class_id: 1, center, radii }],
        );
        let (_, lab) = generate(&spec).unwrap();
        let labeled = lab.data.iter().filter(|&&l| l == 1).count();
        // Enumerate all 4096 voxels against the ellipsoid inequality.
        let mut expect = 0usize;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let q = ((z as f64 - center[0]) / radii[0]).powi(2)
                        + ((y as f64 - center[1]) / radii[1]).powi(2)
                        + ((x as f64 - center[2]) / radii[2]).powi(2);
                    if q <= 1.0 {
                        expect += 1;
                    }
                }
            }
        }
        assert_eq!(labeled, expect);
        assert!(expect > 0);
    }

    #[test]
    fn last_shape_wins_on_overlap() {
        let spec = flat_spec(
            [10, 10, 10],
            vec![
                OrganShape::Ellipsoid { class_id: 1, center: [5.0; 3], radii: [3.0; 3] },
                OrganShape::Ellipsoid { class_id: 2, center: [5.0; 3], radii: [1.5; 3] },
            ],
        );
        let (_, lab) = generate(&spec).unwrap();
        assert_eq!(lab.at(5, 5, 5), 2);
        assert_eq!(lab.at(5, 5, 3), 1);
    }

    #[test]
    fn zero_noise_zero_bias_intensity_is_class_mean() {
        let spec = flat_spec(
            [8, 8, 8],
            vec![OrganShape::Ellipsoid { class_id: 3, center: [4.0; 3], radii: [2.0; 3] }],
        );
        let (vol, lab) = generate(&spec).unwrap();
        for (v, l) in vol.data.iter().zip(&lab.data) {
            assert_eq!(*v, spec.intensity_mean[*l as usize] as f32);
        }
    }

    #[test]
    fn bias_respects_amplitude_bound() {
        let mut spec = flat_spec([8, 8, 8], vec![]);
        spec.bias_amplitude = 4.0;
        let (vol, _) = generate(&spec).unwrap();
        for &v in &vol.data {
            assert!((v as f64).abs() <= 4.0 + 1e-6, "bias {v} exceeds amplitude");
        }
    }

    #[test]
    fn label_alphabet_subset_of_declared() {
        let spec = flat_spec(
            [12, 12, 12],
            vec![
                OrganShape::Ellipsoid { class_id: 4, center: [4.0, 6.0, 6.0], radii: [2.0; 3] },
                OrganShape::Tube { class_id: 7, axis: 2, center: [8.0, 6.0, 6.0], radii: [2.0, 2.0, 0.0], half_length: 4.0 },
            ],
        );
        let (_, lab) = generate(&spec).unwrap();
        let set: std::collections::BTreeSet<u8> = lab.data.iter().copied().collect();
        for id in &set {
            assert!([0u8, 4, 7].contains(id), "unexpected class {id}");
        }
        assert!(set.contains(&4) && set.contains(&7));
    }

    #[test]
    fn out_of_bounds_shape_is_rejected() {
        let spec = flat_spec(
            [8, 8, 8],
            vec![OrganShape::Ellipsoid { class_id: 1, center: [7.0, 4.0, 4.0], radii: [3.0; 3] }],
        );
        let err = generate(&spec).unwrap_err();
        assert!(err.to_string().contains("out of bounds"), "{err}");
    }

    #[test]
    fn duplicate_class_ids_rejected() {
        let spec = flat_spec(
            [10, 10, 10],
            vec![
                OrganShape::Ellipsoid { class_id: 2, center: [3.0; 3], radii: [2.0; 3] },
                OrganShape::Ellipsoid { class_id: 2, center: [6.0; 3], radii: [2.0; 3] },
            ],
        );
        let err = generate(&spec).unwrap_err();
        assert!(err.to_string().contains("duplicate class id"), "{err}");
    }

    #[test]
    fn split_sizes_match_reference_ratio() {
        assert_eq!(split_sizes(102), [66, 16, 20]);
        assert_eq!(split_sizes(51), [33, 8, 10]);
        assert_eq!(split_sizes(3), [1, 1, 1]);
        assert_eq!(split_sizes(4), [2, 1, 1]);
    }

    #[test]
    fn split_is_a_partition() {
        for n in [3usize, 7, 23, 102] {
            let (train, val, test) = split_dataset(n, 42).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "n={n}");
        }
        assert!(split_dataset(2, 0).is_err());
    }

    #[test]
    fn split_deterministic_given_seed() {
        assert_eq!(split_dataset(20, 5).unwrap(), split_dataset(20, 5).unwrap());
        assert_ne!(split_dataset(20, 5).unwrap(), split_dataset(20, 6).unwrap());
    }

    #[test]
    fn random_spec_is_valid_and_reproducible() {
        let a = random_spec([24, 48, 48], 4, 9, 2, 1.0, 5.0).unwrap();
        let b = random_spec([24, 48, 48], 4, 9, 2, 1.0, 5.0).unwrap();
        assert_eq!(a, b);
        let (vol, lab) = generate(&a).unwrap();
        assert_eq!(vol.dims, [24, 48, 48]);
        let classes: std::collections::BTreeSet<u8> = lab.data.iter().copied().collect();
        assert!(classes.len() > 1, "expected some organs, got {classes:?}");
    }
}
