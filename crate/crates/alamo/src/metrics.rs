//! Per-organ volume-overlap and surface-distance metrics, aggregate
//! reports, and paired significance testing.
//!
//! Distance semantics: a foreground voxel is a surface voxel iff any
//! of its six face-neighbors is background or out of bounds; surface
//! points are voxel centers scaled by the spacing. MSD is the mean of
//! the symmetric nearest-distance multiset between the two surfaces;
//! HD95 is its 95th percentile with linear interpolation between order
//! statistics. The all-pairs computation below is the normative
//! definition, exact at desk scale.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{class_name, LabelMap, CLASS_COUNT};

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape("mask data length does not match dims"));
        }
        Ok(Mask { dims, data })
    }

    pub fn from_labels(labels: &LabelMap, class_id: u8) -> Self {
        Mask {
            dims: labels.dims,
            data: labels.data.iter().map(|&l| l == class_id).collect(),
        }
    }

    #[inline]
    fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Dice similarity coefficient `2|A∩B| / (|A|+|B|)`; both masks empty
/// counts as perfect agreement (1.0).
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims(a, b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Jaccard index `|A∩B| / |A∪B|`; both empty counts as 1.0.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Surface voxel centers in millimeters (6-connectivity: a foreground
/// voxel with any face-neighbor background or out of bounds).
pub fn surface_points(m: &Mask, spacing: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let [nz, ny, nx] = m.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.at(z, y, x) {
                    continue;
                }
                let boundary = (z == 0 || !m.at(z - 1, y, x))
                    || (z + 1 == nz || !m.at(z + 1, y, x))
                    || (y == 0 || !m.at(z, y - 1, x))
                    || (y + 1 == ny || !m.at(z, y + 1, x))
                    || (x == 0 || !m.at(z, y, x - 1))
                    || (x + 1 == nx || !m.at(z, y, x + 1));
                if boundary {
                    out.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("empty mask has no surface"));
    }
    Ok(out)
}

fn nearest_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.par_iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            for q in to {
                let dz = p[0] - q[0];
                let dy = p[1] - q[1];
                let dx = p[2] - q[2];
                let d2 = dz * dz + dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// The symmetric surface-distance multiset between two nonempty masks.
fn distance_multiset(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    let sa = surface_points(a, spacing)?;
    let sb = surface_points(b, spacing)?;
    let mut d = nearest_distances(&sa, &sb);
    d.extend(nearest_distances(&sb, &sa));
    Ok(d)
}

/// Mean surface distance in millimeters.
pub fn msd(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<f64> {
    let d = distance_multiset(a, b, spacing)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Percentile via linear interpolation between order statistics:
/// rank `p/100 * (n-1)` in the ascending sort.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn hd_percentile(a: &Mask, b: &Mask, spacing: [f64; 3], p: f64) -> Result<f64> {
    let mut d = distance_multiset(a, b, spacing)?;
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(percentile(&d, p))
}

/// 95% Hausdorff distance in millimeters.
pub fn hd95(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<f64> {
    hd_percentile(a, b, spacing, 95.0)
}

/// One class's metric row. Distance metrics are `None` ("undefined")
/// when either mask is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub dsc: f64,
    pub jaccard: f64,
    pub msd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
}

/// Binarize per class id 1..=10 and compute all four metrics. A class
/// absent from both maps scores 1.0 overlap with undefined distances.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, spacing: [f64; 3]) -> Result<Vec<ClassMetrics>> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "prediction dims {:?} differ from ground truth {:?}",
            pred.dims, gt.dims
        )));
    }
    (1..CLASS_COUNT as u8)
        .map(|class_id| {
            let pm = Mask::from_labels(pred, class_id);
            let gm = Mask::from_labels(gt, class_id);
            let (msd_mm, hd95_mm) = if pm.count() == 0 || gm.count() == 0 {
                (None, None)
            } else {
                (Some(msd(&pm, &gm, spacing)?), Some(hd95(&pm, &gm, spacing)?))
            };
            Ok(ClassMetrics {
                class_id,
                dsc: dsc(&pm, &gm)?,
                jaccard: jaccard(&pm, &gm)?,
                msd_mm,
                hd95_mm,
            })
        })
        .collect()
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; ties get average ranks. The null
/// distribution is exact (sign-assignment enumeration via dynamic
/// programming over doubled ranks) for up to 25 nonzero differences,
/// and a tie-corrected normal approximation with continuity correction
/// beyond that. All differences zero gives p = 1.
pub fn paired_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired test needs equal-length samples"));
    }
    if a.len() < 5 {
        return Err(Error::invalid(format!(
            "paired test needs at least 5 pairs, got {}",
            a.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let m = diffs.len();
    if m == 0 {
        return Ok(1.0);
    }

    // Average ranks over |d|, doubled so ties stay integral.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks2 = vec![0u64; m];
    let mut tie_groups = Vec::new();
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Ranks i+1 ..= j+1 (1-based); doubled average = (i+j+2).
        let avg2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks2[k] = avg2;
        }
        tie_groups.push((j - i + 1) as f64);
        i = j + 1;
    }

    let w2: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    if m <= 25 {
        // counts[s] = number of sign assignments with doubled W+ = s.
        let total_sum: u64 = ranks2.iter().sum();
        let mut counts = vec![0u64; total_sum as usize + 1];
        counts[0] = 1;
        for &r in &ranks2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let total = (1u64 << m) as f64;
        let p_le: f64 = counts[..=w2 as usize].iter().sum::<u64>() as f64 / total;
        let p_ge: f64 = counts[w2 as usize..].iter().sum::<u64>() as f64 / total;
        Ok((2.0 * p_le.min(p_ge)).min(1.0))
    } else {
        let mf = m as f64;
        let mean = mf * (mf + 1.0) / 4.0;
        let tie_term: f64 = tie_groups.iter().map(|t| t * t * t - t).sum::<f64>() / 48.0;
        let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term;
        let w = w2 as f64 / 2.0;
        let delta = w - mean;
        let cc = 0.5 * delta.signum();
        let z = (delta - cc) / var.sqrt();
        Ok((2.0 * normal_sf(z.abs())).min(1.0))
    }
}

/// Standard normal survival function via the complementary error
/// function (Press et al. rational approximation, ~1e-7 absolute).
fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// One evaluated case.
#[derive(Debug, Clone)]
pub struct CaseRow {
    pub case_id: String,
    pub metrics: Vec<ClassMetrics>,
}

const METRIC_NAMES: [&str; 4] = ["dsc", "jaccard", "msd_mm", "hd95_mm"];

fn metric_value(m: &ClassMetrics, which: usize) -> Option<f64> {
    match which {
        0 => Some(m.dsc),
        1 => Some(m.jaccard),
        2 => m.msd_mm,
        _ => m.hd95_mm,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-case CSV: one row per (case, class).
pub fn per_case_csv(rows: &[CaseRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no cases to report"));
    }
    let mut out = String::from("case_id,class_id,class_name,dsc,jaccard,msd_mm,hd95_mm\n");
    for row in rows {
        for m in &row.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.case_id,
                m.class_id,
                class_name(m.class_id),
                m.dsc,
                m.jaccard,
                fmt_opt(m.msd_mm),
                fmt_opt(m.hd95_mm),
            ));
        }
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summary CSV: per class and metric, mean and population std over the
/// cases where the metric is defined, plus a grand `all` row per
/// metric averaging the per-class means (classes first, cases within
/// class pooled first — stated in the header comment).
pub fn summary_csv(rows: &[CaseRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no cases to report"));
    }
    let mut out = String::new();
    out.push_str("# pooling: per-class rows average over cases; the 'all' row averages the per-class means\n");
    out.push_str("class_id,metric,mean,std,n,n_excluded\n");
    let mut grand: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for class_id in 1..CLASS_COUNT as u8 {
        for (which, name) in METRIC_NAMES.iter().enumerate() {
            let values: Vec<f64> = rows
                .iter()
                .flat_map(|r| r.metrics.iter())
                .filter(|m| m.class_id == class_id)
                .filter_map(|m| metric_value(m, which))
                .collect();
            let excluded = rows
                .iter()
                .flat_map(|r| r.metrics.iter())
                .filter(|m| m.class_id == class_id && metric_value(m, which).is_none())
                .count();
            if values.is_empty() {
                out.push_str(&format!("{class_id},{name},,,0,{excluded}\n"));
            } else {
                let (mean, std) = mean_std(&values);
                grand[which].push(mean);
                out.push_str(&format!(
                    "{class_id},{name},{mean},{std},{},{excluded}\n",
                    values.len()
                ));
            }
        }
    }
    for (which, name) in METRIC_NAMES.iter().enumerate() {
        if grand[which].is_empty() {
            out.push_str(&format!("all,{name},,,0,0\n"));
        } else {
            let (mean, std) = mean_std(&grand[which]);
            out.push_str(&format!("all,{name},{mean},{std},{},0\n", grand[which].len()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SignificanceRow {
    pub class_id: u8,
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    pub p_value: f64,
}

pub fn significance_csv(rows: &[SignificanceRow]) -> String {
    let mut out = String::from("class_id,metric,method_a,method_b,p_value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.class_id, r.metric, r.method_a, r.method_b, r.p_value
        ));
    }
    out
}

/// Paired tests per (class, metric) between two methods' case rows,
/// matched by case id. Cases where a metric is undefined on either
/// side are dropped from that metric's pairing.
pub fn compare_methods(
    rows_a: &[CaseRow],
    rows_b: &[CaseRow],
    method_a: &str,
    method_b: &str,
) -> Result<Vec<SignificanceRow>> {
    let mut out = Vec::new();
    for class_id in 1..CLASS_COUNT as u8 {
        for (which, name) in METRIC_NAMES.iter().enumerate() {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for ra in rows_a {
                let Some(rb) = rows_b.iter().find(|r| r.case_id == ra.case_id) else {
                    return Err(Error::invalid(format!(
                        "unpaired case id '{}' (present in {method_a}, missing in {method_b})",
                        ra.case_id
                    )));
                };
                let ma = ra.metrics.iter().find(|m| m.class_id == class_id);
                let mb = rb.metrics.iter().find(|m| m.class_id == class_id);
                if let (Some(ma), Some(mb)) = (ma, mb) {
                    if let (Some(va), Some(vb)) = (metric_value(ma, which), metric_value(mb, which)) {
                        xs.push(va);
                        ys.push(vb);
                    }
                }
            }
            if xs.len() >= 5 {
                out.push(SignificanceRow {
                    class_id,
                    metric: name.to_string(),
                    method_a: method_a.to_string(),
                    method_b: method_b.to_string(),
                    p_value: paired_test(&xs, &ys)?,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mask_from(dims: [usize; 3], voxels: &[[usize; 3]]) -> Mask {
        let mut data = vec![false; dims[0] * dims[1] * dims[2]];
        for v in voxels {
            data[(v[0] * dims[1] + v[1]) * dims[2] + v[2]] = true;
        }
        Mask::new(dims, data).unwrap()
    }

    fn random_mask(dims: [usize; 3], fill: f64, rng: &mut Rng) -> Mask {
        let n = dims[0] * dims[1] * dims[2];
        Mask::new(dims, (0..n).map(|_| rng.coin(fill)).collect()).unwrap()
    }

    #[test]
    fn dsc_identical_disjoint_and_half() {
        let a = mask_from([2, 2, 2], &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask_from([2, 2, 2], &[[1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // |a| = 4, |b| = 4, |∩| = 2.
        let c = mask_from([2, 2, 2], &[[0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1]]);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
        assert!((jaccard(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_masks_are_perfect_agreement() {
        let e = Mask::new([2, 2, 2], vec![false; 8]).unwrap();
        assert_eq!(dsc(&e, &e.clone()).unwrap(), 1.0);
        assert_eq!(jaccard(&e, &e.clone()).unwrap(), 1.0);
    }

    #[test]
    fn surface_of_single_voxel_is_its_center() {
        let m = mask_from([3, 3, 3], &[[1, 1, 1]]);
        let s = surface_points(&m, [2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s, vec![[2.0, 3.0, 4.0]]);
    }

    #[test]
    fn solid_cube_surface_excludes_center() {
        let mut voxels = Vec::new();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    voxels.push([z, y, x]);
                }
            }
        }
        let m = mask_from([3, 3, 3], &voxels);
        let s = surface_points(&m, [1.0; 3]).unwrap();
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn thin_plane_is_all_surface() {
        let mut voxels = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                voxels.push([1, y, x]);
            }
        }
        let m = mask_from([3, 4, 4], &voxels);
        assert_eq!(surface_points(&m, [1.0; 3]).unwrap().len(), 16);
    }

    #[test]
    fn empty_mask_surface_is_an_error() {
        let e = Mask::new([2, 2, 2], vec![false; 8]).unwrap();
        assert!(surface_points(&e, [1.0; 3]).is_err());
    }

    #[test]
    fn identical_masks_have_zero_distances() {
        let m = mask_from([4, 4, 4], &[[1, 1, 1], [1, 1, 2], [2, 2, 2]]);
        assert_eq!(msd(&m, &m.clone(), [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&m, &m.clone(), [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn two_points_three_mm_apart() {
        let a = mask_from([1, 1, 5], &[[0, 0, 0]]);
        let b = mask_from([1, 1, 5], &[[0, 0, 3]]);
        assert_eq!(msd(&a, &b, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 3.0);
    }

    /// Independent all-pairs oracle written against the same published
    /// definition (full distance matrix, then row minima).
    fn oracle_multiset(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Vec<f64> {
        let sa = surface_points(a, spacing).unwrap();
        let sb = surface_points(b, spacing).unwrap();
        let dist = |p: &[f64; 3], q: &[f64; 3]| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        };
        let mut matrix = vec![vec![0.0; sb.len()]; sa.len()];
        for (i, p) in sa.iter().enumerate() {
            for (j, q) in sb.iter().enumerate() {
                matrix[i][j] = dist(p, q);
            }
        }
        let mut out = Vec::new();
        for row in &matrix {
            out.push(row.iter().copied().fold(f64::INFINITY, f64::min));
        }
        for j in 0..sb.len() {
            out.push((0..sa.len()).map(|i| matrix[i][j]).fold(f64::INFINITY, f64::min));
        }
        out
    }

    #[test]
    fn distances_match_oracle_on_random_masks() {
        let mut rng = Rng::seed_from_u64(0);
        for round in 0..30 {
            let dims = [
                2 + rng.below(10) as usize,
                2 + rng.below(10) as usize,
                2 + rng.below(10) as usize,
            ];
            let a = random_mask(dims, 0.3, &mut rng);
            let b = random_mask(dims, 0.3, &mut rng);
            if a.count() == 0 || b.count() == 0 {
                continue;
            }
            let spacing = [1.0, 1.5, 0.75];
            let mut oracle = oracle_multiset(&a, &b, spacing);
            oracle.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let oracle_msd = oracle.iter().sum::<f64>() / oracle.len() as f64;
            let oracle_hd95 = percentile(&oracle, 95.0);
            assert!((msd(&a, &b, spacing).unwrap() - oracle_msd).abs() < 1e-9, "round {round}");
            assert!((hd95(&a, &b, spacing).unwrap() - oracle_hd95).abs() < 1e-9, "round {round}");
        }
    }

    #[test]
    fn jaccard_dice_identity() {
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_mask([6, 6, 6], 0.4, &mut rng);
            let b = random_mask([6, 6, 6], 0.4, &mut rng);
            let d = dsc(&a, &b).unwrap();
            let j = jaccard(&a, &b).unwrap();
            assert!((j - d / (2.0 - d)).abs() < 1e-9, "d={d} j={j}");
        }
    }

    #[test]
    fn metric_symmetry() {
        let mut rng = Rng::seed_from_u64(2);
        let a = random_mask([5, 5, 5], 0.3, &mut rng);
        let b = random_mask([5, 5, 5], 0.3, &mut rng);
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        assert_eq!(msd(&a, &b, [1.0; 3]).unwrap(), msd(&b, &a, [1.0; 3]).unwrap());
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), hd95(&b, &a, [1.0; 3]).unwrap());
    }

    #[test]
    fn hd_is_monotone_in_percentile_and_bounded() {
        let mut rng = Rng::seed_from_u64(3);
        let a = random_mask([6, 6, 6], 0.3, &mut rng);
        let b = random_mask([6, 6, 6], 0.3, &mut rng);
        let spacing = [1.0; 3];
        let h100 = hd_percentile(&a, &b, spacing, 100.0).unwrap();
        let mut prev = 0.0;
        for p in [0.0, 25.0, 50.0, 75.0, 95.0, 100.0] {
            let h = hd_percentile(&a, &b, spacing, p).unwrap();
            assert!(h >= prev);
            prev = h;
        }
        assert!(hd95(&a, &b, spacing).unwrap() <= h100);
        assert!(msd(&a, &b, spacing).unwrap() <= h100);
    }

    #[test]
    fn translation_invariance() {
        let base = [[1usize, 1, 1], [1, 1, 2], [2, 1, 1], [1, 2, 1]];
        let gt = [[2usize, 2, 2], [2, 2, 3]];
        let shift = |vs: &[[usize; 3]], d: usize| -> Vec<[usize; 3]> {
            vs.iter().map(|v| [v[0] + d, v[1] + d, v[2] + d]).collect()
        };
        let dims = [8, 8, 8];
        let (a0, b0) = (mask_from(dims, &base), mask_from(dims, &gt));
        let (a1, b1) = (mask_from(dims, &shift(&base, 3)), mask_from(dims, &shift(&gt, 3)));
        let spacing = [1.0, 2.0, 0.5];
        assert_eq!(dsc(&a0, &b0).unwrap(), dsc(&a1, &b1).unwrap());
        assert_eq!(jaccard(&a0, &b0).unwrap(), jaccard(&a1, &b1).unwrap());
        assert_eq!(msd(&a0, &b0, spacing).unwrap(), msd(&a1, &b1, spacing).unwrap());
        assert_eq!(hd95(&a0, &b0, spacing).unwrap(), hd95(&a1, &b1, spacing).unwrap());
    }

    #[test]
    fn spacing_scaling_is_exact_for_power_of_two() {
        let mut rng = Rng::seed_from_u64(4);
        let a = random_mask([5, 6, 4], 0.35, &mut rng);
        let b = random_mask([5, 6, 4], 0.35, &mut rng);
        let s1 = [1.1, 0.9, 1.3];
        let s2 = [2.2, 1.8, 2.6];
        assert_eq!(msd(&a, &b, s2).unwrap(), 2.0 * msd(&a, &b, s1).unwrap());
        assert_eq!(hd95(&a, &b, s2).unwrap(), 2.0 * hd95(&a, &b, s1).unwrap());
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&a, &b).unwrap());
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let mut data = vec![0u8; 4 * 4 * 4];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 11) as u8;
        }
        let gt = LabelMap::new([4, 4, 4], [1.0; 3], data).unwrap();
        let rows = evaluate(&gt, &gt, [1.0; 3]).unwrap();
        assert_eq!(rows.len(), 10);
        for r in rows {
            assert_eq!(r.dsc, 1.0);
            assert_eq!(r.msd_mm, Some(0.0));
        }
    }

    #[test]
    fn evaluate_empty_prediction() {
        let pred = LabelMap::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let mut gt = LabelMap::zeros([4, 4, 4], [1.0; 3]).unwrap();
        gt.data[5] = 1;
        let rows = evaluate(&pred, &gt, [1.0; 3]).unwrap();
        let class1 = &rows[0];
        assert_eq!(class1.dsc, 0.0);
        assert_eq!(class1.msd_mm, None);
        // Class absent from both: perfect overlap, undefined distance.
        let class2 = &rows[1];
        assert_eq!(class2.dsc, 1.0);
        assert_eq!(class2.msd_mm, None);
    }

    #[test]
    fn evaluate_matches_per_class_recomputation() {
        let mut rng = Rng::seed_from_u64(5);
        let n = 1000;
        let pred = LabelMap::new(
            [10, 10, 10],
            [1.0; 3],
            (0..n).map(|_| rng.below(4) as u8).collect(),
        )
        .unwrap();
        let gt = LabelMap::new(
            [10, 10, 10],
            [1.0; 3],
            (0..n).map(|_| rng.below(4) as u8).collect(),
        )
        .unwrap();
        let rows = evaluate(&pred, &gt, [1.2; 3]).unwrap();
        for class_id in 1..=3u8 {
            let row = &rows[(class_id - 1) as usize];
            let pm = Mask::from_labels(&pred, class_id);
            let gm = Mask::from_labels(&gt, class_id);
            assert_eq!(row.dsc, dsc(&pm, &gm).unwrap());
            assert_eq!(row.jaccard, jaccard(&pm, &gm).unwrap());
            assert_eq!(row.msd_mm, Some(msd(&pm, &gm, [1.2; 3]).unwrap()));
            assert_eq!(row.hd95_mm, Some(hd95(&pm, &gm, [1.2; 3]).unwrap()));
        }
    }

    #[test]
    fn wilcoxon_identical_samples() {
        let a = [0.9, 0.8, 0.7, 0.95, 0.85, 0.75];
        assert_eq!(paired_test(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn wilcoxon_six_positive_distinct_exact() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.9, 1.8, 2.7, 3.6, 4.5, 5.4];
        // All six differences positive with distinct magnitudes:
        // exact two-sided p = 2/64.
        assert_eq!(paired_test(&a, &b).unwrap(), 0.03125);
    }

    #[test]
    fn wilcoxon_two_sided_symmetry() {
        let a = [0.91, 0.83, 0.77, 0.95, 0.88, 0.70, 0.65];
        let b = [0.88, 0.86, 0.71, 0.90, 0.91, 0.66, 0.60];
        let p_ab = paired_test(&a, &b).unwrap();
        let p_ba = paired_test(&b, &a).unwrap();
        assert_eq!(p_ab, p_ba);
        assert!((0.0..=1.0).contains(&p_ab));
    }

    #[test]
    fn wilcoxon_handles_ties_and_zeros() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 7.0];
        let b = [1.0, 1.5, 2.5, 4.5, 4.5, 6.5]; // one zero diff, tied magnitudes
        let p = paired_test(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn wilcoxon_rejects_short_samples() {
        assert!(paired_test(&[1.0; 4], &[2.0; 4]).is_err());
        assert!(paired_test(&[1.0; 5], &[2.0; 4]).is_err());
    }

    #[test]
    fn wilcoxon_normal_branch_is_sane() {
        // 30 pairs, clear one-sided shift: p should be tiny.
        let a: Vec<f64> = (0..30).map(|i| i as f64 + 1.0).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 + 0.5 + 0.01 * i as f64).collect();
        let p = paired_test(&a, &b).unwrap();
        assert!(p < 0.01, "p = {p}");
        // And erfc sanity.
        assert!((erfc(0.0) - 1.0).abs() < 1e-6);
        assert!(erfc(3.0) < 3e-5);
    }

    #[test]
    fn report_single_case_single_class() {
        let rows = vec![CaseRow {
            case_id: "case_000".into(),
            metrics: vec![ClassMetrics {
                class_id: 1,
                dsc: 1.0,
                jaccard: 1.0,
                msd_mm: Some(0.0),
                hd95_mm: Some(0.0),
            }],
        }];
        let summary = summary_csv(&rows).unwrap();
        assert!(summary.contains("1,dsc,1,0,1,0"), "{summary}");
        let per_case = per_case_csv(&rows).unwrap();
        assert!(per_case.contains("case_000,1,liver,1,1,0,0"), "{per_case}");
    }

    #[test]
    fn report_mean_std_of_two_cases() {
        let mk = |id: &str, d: f64| CaseRow {
            case_id: id.into(),
            metrics: vec![ClassMetrics {
                class_id: 2,
                dsc: d,
                jaccard: d / (2.0 - d),
                msd_mm: None,
                hd95_mm: None,
            }],
        };
        let rows = vec![mk("a", 0.8), mk("b", 1.0)];
        let summary = summary_csv(&rows).unwrap();
        // Population std of {0.8, 1.0} is 0.1; undefined distances are
        // excluded with the exclusion count recorded.
        let dsc_row: Vec<&str> = summary
            .lines()
            .find(|l| l.starts_with("2,dsc,"))
            .unwrap()
            .split(',')
            .collect();
        assert!((dsc_row[2].parse::<f64>().unwrap() - 0.9).abs() < 1e-12);
        assert!((dsc_row[3].parse::<f64>().unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(dsc_row[4], "2");
        assert!(summary.contains("2,msd_mm,,,0,2"), "{summary}");
    }

    #[test]
    fn compare_identical_methods_gives_p_one() {
        let mk = |case: usize| CaseRow {
            case_id: format!("case_{case:03}"),
            metrics: vec![ClassMetrics {
                class_id: 1,
                dsc: 0.8 + 0.01 * case as f64,
                jaccard: 0.7,
                msd_mm: Some(1.0),
                hd95_mm: Some(2.0),
            }],
        };
        let rows: Vec<CaseRow> = (0..6).map(mk).collect();
        let sig = compare_methods(&rows, &rows.clone(), "a", "b").unwrap();
        assert!(!sig.is_empty());
        for s in sig {
            assert_eq!(s.p_value, 1.0);
        }
    }

    #[test]
    fn compare_rejects_unpaired_ids() {
        let mk = |id: &str| CaseRow {
            case_id: id.into(),
            metrics: vec![],
        };
        let a = vec![mk("x"), mk("y")];
        let b = vec![mk("x")];
        let err = compare_methods(&a, &b, "a", "b").unwrap_err();
        assert!(err.to_string().contains("unpaired"), "{err}");
    }
}
