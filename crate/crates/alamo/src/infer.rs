//! Whole-volume inference: sliding-slab per-view prediction, majority
//! vote fusion of the three views, and label-map assembly.
//!
//! The three per-view predictions are independent reads of the same
//! frozen weights and run concurrently; fusion is a deterministic
//! join.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{Network, NormStates, SlabOut, Tensor};
use crate::volume::{
    permute3, resample_isotropic, resample_labels_to, standardize, LabelMap, ViewAxis, Volume,
};

/// Per-voxel class probability field in the transversal frame,
/// laid out `[class][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub class_count: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn zeros(class_count: usize, dims: [usize; 3], spacing: [f64; 3]) -> Self {
        ProbMap {
            class_count,
            dims,
            spacing,
            data: vec![0.0; class_count * dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, z, y, x)]
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Winning class per voxel, lowest id on exact ties.
    pub fn argmax_labels(&self) -> Result<LabelMap> {
        let n = self.voxels();
        let mut out = vec![0u8; n];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_p = self.data[i];
            for c in 1..self.class_count {
                let p = self.data[c * n + i];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            *slot = best as u8;
        }
        LabelMap::new(self.dims, self.spacing, out)
    }

    /// Re-slice the spatial axes only (class axis untouched).
    pub fn reslice(&self, view: ViewAxis) -> ProbMap {
        if view == ViewAxis::Transversal {
            return self.clone();
        }
        let n = self.voxels();
        let perm = view.perm();
        let out_dims = [self.dims[perm[0]], self.dims[perm[1]], self.dims[perm[2]]];
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.class_count {
            let (part, _) = permute3(&self.data[c * n..(c + 1) * n], self.dims, perm);
            data.extend(part);
        }
        ProbMap { class_count: self.class_count, dims: out_dims, spacing: self.spacing, data }
    }
}

/// Slab start positions: multiples of `stride` while a full slab fits,
/// plus a final slab aligned to the last slice when the tail would
/// otherwise be uncovered.
pub(crate) fn slab_starts(n_slices: usize, s: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = 0;
    while pos + s <= n_slices {
        starts.push(pos);
        pos += stride;
    }
    let last = *starts.last().unwrap_or(&0);
    if starts.is_empty() || last + s < n_slices {
        starts.push(n_slices - s);
    }
    starts
}

/// Mirror an out-of-range slice index back into `[0, n)` (edge repeats).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Predict class probabilities for a standardized, isotropic volume
/// along one view. Slabs of `s` slices slide at `stride` (default `s`
/// when 0); overlapping probabilities are averaged then renormalized.
/// Volumes shorter than one slab are reflection-padded and cropped
/// back. The result is always in the transversal frame.
pub fn predict_view(
    net: &Network<f32>,
    norm: &NormStates<f32>,
    v: &Volume,
    view: ViewAxis,
    stride: usize,
) -> Result<ProbMap> {
    let cc = net.cfg.class_count;
    let s = net.cfg.slab;
    let rv = crate::volume::reslice(v, view)?;
    let [ns, nh, nw] = rv.dims;
    if ns < 1 {
        return Err(Error::invalid("volume has no slices along the view axis"));
    }
    let stride = if stride == 0 { s } else { stride };

    // Reflection-pad the slice axis up to one slab.
    let (slices, pad_lo): (Vec<usize>, usize) = if ns < s {
        let lo = (s - ns) / 2;
        let idx = (0..s).map(|i| reflect(i as isize - lo as isize, ns)).collect();
        (idx, lo)
    } else {
        ((0..ns).collect(), 0)
    };
    let ns_eff = slices.len();

    // Zero-pad the plane to multiples of 2^depth.
    let div = net.cfg.spatial_divisor();
    let ph = nh.div_ceil(div) * div;
    let pw = nw.div_ceil(div) * div;
    let (off_h, off_w) = ((ph - nh) / 2, (pw - nw) / 2);

    let plane = ph * pw;
    let mut sums = vec![0.0f64; cc * ns_eff * plane];
    let mut counts = vec![0u32; ns_eff];

    let slab_input = |start: usize| -> Tensor<f32> {
        let mut data = vec![0.0f32; s * plane];
        for ds in 0..s {
            let src_z = slices[start + ds];
            for y in 0..nh {
                let row = rv.idx(src_z, y, 0);
                let dst = ds * plane + (y + off_h) * pw + off_w;
                data[dst..dst + nw].copy_from_slice(&rv.data[row..row + nw]);
            }
        }
        Tensor::from_vec(&[s, ph, pw], data).expect("slab buffer sized above")
    };

    match net.cfg.slab_out {
        SlabOut::AllSlices => {
            for start in slab_starts(ns_eff, s, stride) {
                let x = slab_input(start);
                let pass = net.forward_infer(&x, norm)?;
                let probs = pass.main_probs();
                for ds in 0..s {
                    let z = start + ds;
                    counts[z] += 1;
                    for c in 0..cc {
                        let src = ((ds * cc + c) * ph) * pw;
                        let dst = (c * ns_eff + z) * plane;
                        for p in 0..plane {
                            sums[dst + p] += probs.data()[src + p] as f64;
                        }
                    }
                }
            }
        }
        SlabOut::CenterSlice => {
            // Reflection-pad so every slice can sit at the slab center.
            let half = s / 2;
            for z in 0..ns_eff {
                let mut data = vec![0.0f32; s * plane];
                for ds in 0..s {
                    let src_z = slices[reflect(z as isize + ds as isize - half as isize, ns_eff)];
                    for y in 0..nh {
                        let row = rv.idx(src_z, y, 0);
                        let dst = ds * plane + (y + off_h) * pw + off_w;
                        data[dst..dst + nw].copy_from_slice(&rv.data[row..row + nw]);
                    }
                }
                let x = Tensor::from_vec(&[s, ph, pw], data)?;
                let pass = net.forward_infer(&x, norm)?;
                let probs = pass.main_probs();
                counts[z] += 1;
                for c in 0..cc {
                    let src = (c * ph) * pw;
                    let dst = (c * ns_eff + z) * plane;
                    for p in 0..plane {
                        sums[dst + p] += probs.data()[src + p] as f64;
                    }
                }
            }
        }
    }

    // Average overlaps, renormalize, crop plane padding and the
    // reflection padding, then return to the transversal frame.
    let mut out = ProbMap::zeros(cc, [ns, nh, nw], rv.spacing);
    for z in 0..ns {
        // When reflection-padded, original slice z sits at pad_lo + z.
        let ze = if ns_eff != ns { pad_lo + z } else { z };
        let cnt = counts[ze] as f64;
        for y in 0..nh {
            for x in 0..nw {
                let p = (y + off_h) * pw + (x + off_w);
                let mut total = 0.0f64;
                for c in 0..cc {
                    total += sums[(c * ns_eff + ze) * plane + p];
                }
                // total is cnt * 1 up to rounding; renormalize per voxel.
                let inv = if total > 0.0 { 1.0 / total } else { 1.0 / cnt };
                for c in 0..cc {
                    let v = sums[(c * ns_eff + ze) * plane + p] * inv;
                    let oi = out.idx(c, z, y, x);
                    out.data[oi] = v as f32;
                }
            }
        }
    }
    Ok(out.reslice(view))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    /// Per-voxel majority vote over the three views' argmax classes;
    /// three-way splits fall back to the largest summed probability,
    /// then the lowest class id.
    Vote,
    /// Average the three probability maps, then argmax.
    Soft,
    Single(ViewAxis),
}

fn check_same_grid(maps: &[&ProbMap]) -> Result<()> {
    for m in &maps[1..] {
        if m.dims != maps[0].dims || m.class_count != maps[0].class_count {
            return Err(Error::shape(format!(
                "probability maps disagree: {:?}/{} vs {:?}/{}",
                m.dims, m.class_count, maps[0].dims, maps[0].class_count
            )));
        }
    }
    Ok(())
}

fn argmax_at(m: &ProbMap, i: usize, n: usize) -> (usize, f32) {
    let mut best = 0usize;
    let mut best_p = m.data[i];
    for c in 1..m.class_count {
        let p = m.data[c * n + i];
        if p > best_p {
            best_p = p;
            best = c;
        }
    }
    (best, best_p)
}

/// Majority-vote fusion: each view casts its argmax class; two votes
/// win outright; a three-way split goes to the voted class with the
/// greatest probability summed across the views (lowest id on exact
/// sum ties). Symmetric in its inputs.
pub fn fuse_majority(a: &ProbMap, b: &ProbMap, c: &ProbMap) -> Result<LabelMap> {
    let maps = [a, b, c];
    check_same_grid(&maps)?;
    let n = a.voxels();
    let mut out = vec![0u8; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let votes = [argmax_at(a, i, n).0, argmax_at(b, i, n).0, argmax_at(c, i, n).0];
        let winner = if votes[0] == votes[1] || votes[0] == votes[2] {
            votes[0]
        } else if votes[1] == votes[2] {
            votes[1]
        } else {
            // Three distinct candidates: compare summed probabilities.
            let mut best = usize::MAX;
            let mut best_sum = f64::NEG_INFINITY;
            let mut cands = votes;
            cands.sort_unstable();
            for &cand in &cands {
                let sum = maps
                    .iter()
                    .map(|m| m.data[cand * n + i] as f64)
                    .sum::<f64>();
                if sum > best_sum {
                    best_sum = sum;
                    best = cand;
                }
            }
            best
        };
        *slot = winner as u8;
    }
    LabelMap::new(a.dims, a.spacing, out)
}

/// Soft fusion: per-voxel mean of the three maps, then argmax.
pub fn fuse_soft(a: &ProbMap, b: &ProbMap, c: &ProbMap) -> Result<LabelMap> {
    let maps = [a, b, c];
    check_same_grid(&maps)?;
    let n = a.voxels();
    let mut out = vec![0u8; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_sum = f64::NEG_INFINITY;
        for cand in 0..a.class_count {
            let sum = maps.iter().map(|m| m.data[cand * n + i] as f64).sum::<f64>();
            if sum > best_sum {
                best_sum = sum;
                best = cand;
            }
        }
        *slot = best as u8;
    }
    LabelMap::new(a.dims, a.spacing, out)
}

/// Timed per-view probability maps for the requested views.
pub fn predict_views(
    net: &Network<f32>,
    norm: &NormStates<f32>,
    v: &Volume,
    views: &[ViewAxis],
    stride: usize,
) -> Result<Vec<(ViewAxis, ProbMap, f64)>> {
    views
        .par_iter()
        .map(|&view| {
            let t0 = std::time::Instant::now();
            let map = predict_view(net, norm, v, view, stride)?;
            Ok((view, map, t0.elapsed().as_secs_f64()))
        })
        .collect()
}

/// Full pipeline: standardize, resample to `target_spacing`, predict
/// the needed views (concurrently for fusion modes), fuse, and map the
/// labels back onto the input grid by nearest neighbor.
pub fn predict_full(
    net: &Network<f32>,
    norm: &NormStates<f32>,
    v: &Volume,
    fuse: FuseMode,
    target_spacing: f64,
    stride: usize,
) -> Result<LabelMap> {
    let std = standardize(v)?;
    let iso = resample_isotropic(&std, target_spacing)?;
    let views: Vec<ViewAxis> = match fuse {
        FuseMode::Single(view) => vec![view],
        _ => ViewAxis::ALL.to_vec(),
    };
    let maps = predict_views(net, norm, &iso, &views, stride)?;
    let fused = match fuse {
        FuseMode::Single(_) => maps[0].1.argmax_labels()?,
        FuseMode::Vote => fuse_majority(&maps[0].1, &maps[1].1, &maps[2].1)?,
        FuseMode::Soft => fuse_soft(&maps[0].1, &maps[1].1, &maps[2].1)?,
    };
    resample_labels_to(&fused, v.dims, v.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, ModelConfig};
    use crate::rng::Rng;

    fn tiny_net(slab: usize, depth: usize) -> (Network<f32>, NormStates<f32>) {
        let cfg = ModelConfig {
            arch: Arch::Dense,
            k: 2,
            depth,
            layers_per_block: 1,
            slab,
            ..ModelConfig::default()
        };
        let net = Network::<f32>::init(&cfg, 11).unwrap();
        let norm = NormStates::new(&net);
        (net, norm)
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.range_f64(-2.0, 2.0) as f32).collect())
            .unwrap()
    }

    #[test]
    fn slab_placement_rules() {
        // Exactly one slab when the volume matches the slab size.
        assert_eq!(slab_starts(20, 20, 20), vec![0]);
        // 30 slices, s = 20, stride 20: slabs at 0 and tail-aligned 10.
        assert_eq!(slab_starts(30, 20, 20), vec![0, 10]);
        assert_eq!(slab_starts(40, 20, 20), vec![0, 20]);
        assert_eq!(slab_starts(45, 20, 20), vec![0, 20, 25]);
        assert_eq!(slab_starts(8, 4, 2), vec![0, 2, 4]);
    }

    #[test]
    fn probmap_sums_to_one_with_random_weights() {
        let (net, norm) = tiny_net(4, 1);
        let v = random_volume([10, 12, 14], 0);
        let map = predict_view(&net, &norm, &v, ViewAxis::Transversal, 0).unwrap();
        assert_eq!(map.dims, [10, 12, 14]);
        let n = map.voxels();
        for i in 0..n {
            let sum: f64 = (0..11).map(|c| map.data[c * n + i] as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5, "voxel {i} sums to {sum}");
        }
    }

    #[test]
    fn overlapping_slabs_average_and_views_return_transversal() {
        let (net, norm) = tiny_net(4, 1);
        let v = random_volume([6, 8, 8], 1);
        for view in ViewAxis::ALL {
            let map = predict_view(&net, &norm, &v, view, 2).unwrap();
            assert_eq!(map.dims, v.dims, "{view:?}");
            let n = map.voxels();
            for i in 0..n {
                let sum: f64 = (0..11).map(|c| map.data[c * n + i] as f64).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn short_volume_is_reflection_padded() {
        let (net, norm) = tiny_net(8, 1);
        // Only 3 slices for an 8-slice slab.
        let v = random_volume([3, 8, 8], 2);
        let map = predict_view(&net, &norm, &v, ViewAxis::Transversal, 0).unwrap();
        assert_eq!(map.dims, [3, 8, 8]);
    }

    #[test]
    fn repeated_prediction_is_bit_identical() {
        let (net, norm) = tiny_net(4, 1);
        let v = random_volume([8, 8, 8], 3);
        let a = predict_view(&net, &norm, &v, ViewAxis::Coronal, 0).unwrap();
        let b = predict_view(&net, &norm, &v, ViewAxis::Coronal, 0).unwrap();
        assert_eq!(a, b);
    }

    fn prob_map_from(classes: usize, dims: [usize; 3], f: impl Fn(usize, usize) -> f32) -> ProbMap {
        // f(class, voxel) -> probability
        let mut m = ProbMap::zeros(classes, dims, [1.0; 3]);
        let n = m.voxels();
        for c in 0..classes {
            for i in 0..n {
                m.data[c * n + i] = f(c, i);
            }
        }
        m
    }

    fn one_hotish(classes: usize, dims: [usize; 3], winner: usize, p: f32) -> ProbMap {
        let rest = (1.0 - p) / (classes as f32 - 1.0);
        prob_map_from(classes, dims, |c, _| if c == winner { p } else { rest })
    }

    #[test]
    fn unanimity_wins() {
        let a = one_hotish(11, [1, 2, 2], 5, 0.8);
        let fused = fuse_majority(&a, &a.clone(), &a.clone()).unwrap();
        assert!(fused.data.iter().all(|&l| l == 5));
    }

    #[test]
    fn two_of_three_majority_wins() {
        let a = one_hotish(11, [1, 1, 1], 2, 0.6);
        let b = one_hotish(11, [1, 1, 1], 2, 0.55);
        let c = one_hotish(11, [1, 1, 1], 7, 0.99);
        let fused = fuse_majority(&a, &b, &c).unwrap();
        assert_eq!(fused.data[0], 2);
    }

    #[test]
    fn three_way_split_uses_summed_probability() {
        // Votes 1, 2, 3 with summed probabilities 0.9 / 1.2 / 0.9.
        let dims = [1, 1, 1];
        let mut a = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut b = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut c = ProbMap::zeros(11, dims, [1.0; 3]);
        // View a: argmax 1 (0.5); contributes 1:0.5, 2:0.4, 3:0.1.
        a.data[1] = 0.5;
        a.data[2] = 0.4;
        a.data[3] = 0.1;
        // View b: argmax 2 (0.4 tie-broken by others below), make it clear: 2:0.5, 1:0.2, 3:0.3.
        b.data[2] = 0.5;
        b.data[1] = 0.2;
        b.data[3] = 0.3;
        // View c: argmax 3 (0.5); 3:0.5, 1:0.2, 2:0.3.
        c.data[3] = 0.5;
        c.data[1] = 0.2;
        c.data[2] = 0.3;
        // Sums: class 1: 0.9, class 2: 1.2, class 3: 0.9.
        let fused = fuse_majority(&a, &b, &c).unwrap();
        assert_eq!(fused.data[0], 2);
    }

    #[test]
    fn three_way_sum_tie_takes_lowest_id() {
        let dims = [1, 1, 1];
        let mut a = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut b = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut c = ProbMap::zeros(11, dims, [1.0; 3]);
        a.data[4] = 0.6;
        b.data[6] = 0.6;
        c.data[9] = 0.6;
        let fused = fuse_majority(&a, &b, &c).unwrap();
        assert_eq!(fused.data[0], 4);
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let mut rng = Rng::seed_from_u64(4);
        let dims = [2, 3, 3];
        let n = 18;
        let mk = |rng: &mut Rng| {
            let mut m = ProbMap::zeros(11, dims, [1.0; 3]);
            for i in 0..n {
                let mut col: Vec<f64> = (0..11).map(|_| rng.range_f64(0.01, 1.0)).collect();
                let s: f64 = col.iter().sum();
                col.iter_mut().for_each(|v| *v /= s);
                for c in 0..11 {
                    m.data[c * n + i] = col[c] as f32;
                }
            }
            m
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let ref_fused = fuse_majority(&a, &b, &c).unwrap();
        for (x, y, z) in [(&b, &a, &c), (&c, &b, &a), (&b, &c, &a), (&c, &a, &b), (&a, &c, &b)] {
            assert_eq!(fuse_majority(x, y, z).unwrap(), ref_fused);
        }
    }

    #[test]
    fn shared_per_voxel_rescaling_leaves_fusion_unchanged() {
        let mut rng = Rng::seed_from_u64(5);
        let dims = [1, 4, 4];
        let n = 16;
        let mk = |rng: &mut Rng| {
            let mut m = ProbMap::zeros(11, dims, [1.0; 3]);
            for i in 0..n {
                let mut col: Vec<f64> = (0..11).map(|_| rng.range_f64(0.01, 1.0)).collect();
                let s: f64 = col.iter().sum();
                col.iter_mut().for_each(|v| *v /= s);
                for c in 0..11 {
                    m.data[c * n + i] = col[c] as f32;
                }
            }
            m
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let kappa: Vec<f32> = (0..n).map(|_| rng.range_f64(0.5, 3.0) as f32).collect();
        let rescale = |m: &ProbMap| {
            let mut out = m.clone();
            for i in 0..n {
                let mut total = 0.0f32;
                for c in 0..11 {
                    out.data[c * n + i] *= kappa[i];
                    total += out.data[c * n + i];
                }
                for c in 0..11 {
                    out.data[c * n + i] /= total;
                }
            }
            out
        };
        let fused = fuse_majority(&a, &b, &c).unwrap();
        let fused_scaled = fuse_majority(&rescale(&a), &rescale(&b), &rescale(&c)).unwrap();
        assert_eq!(fused, fused_scaled);
    }

    #[test]
    fn identical_maps_fuse_to_single_view_argmax() {
        let mut rng = Rng::seed_from_u64(6);
        let dims = [2, 2, 2];
        let n = 8;
        let mut m = ProbMap::zeros(11, dims, [1.0; 3]);
        for i in 0..n {
            let mut col: Vec<f64> = (0..11).map(|_| rng.range_f64(0.01, 1.0)).collect();
            let s: f64 = col.iter().sum();
            col.iter_mut().for_each(|v| *v /= s);
            for c in 0..11 {
                m.data[c * n + i] = col[c] as f32;
            }
        }
        let fused = fuse_majority(&m, &m.clone(), &m.clone()).unwrap();
        assert_eq!(fused, m.argmax_labels().unwrap());
    }

    #[test]
    fn region_dropped_by_one_view_is_restored() {
        // Two views see class 8 in a region, one view misses it.
        let dims = [2, 4, 4];
        let good = |_: usize| one_hotish(11, dims, 8, 0.9);
        let mut bad = one_hotish(11, dims, 0, 0.9);
        // Make the bad view quite confident about background.
        bad.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let fused = fuse_majority(&good(0), &good(1), &bad).unwrap();
        assert!(fused.data.iter().all(|&l| l == 8));
    }

    #[test]
    fn predict_full_single_matches_view_argmax() {
        let (net, norm) = tiny_net(4, 1);
        let v = random_volume([8, 8, 8], 7);
        let full =
            predict_full(&net, &norm, &v, FuseMode::Single(ViewAxis::Transversal), 1.0, 0).unwrap();
        let std = standardize(&v).unwrap();
        let map = predict_view(&net, &norm, &std, ViewAxis::Transversal, 0).unwrap();
        assert_eq!(full, map.argmax_labels().unwrap());
    }

    #[test]
    fn predict_full_vote_runs_three_views() {
        let (net, norm) = tiny_net(4, 2);
        let v = random_volume([8, 8, 8], 8);
        let out = predict_full(&net, &norm, &v, FuseMode::Vote, 1.0, 0).unwrap();
        assert_eq!(out.dims, v.dims);
        assert!(out.data.iter().all(|&l| (l as usize) < 11));
    }
}
