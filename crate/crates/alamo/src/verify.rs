//! Self-check suites: finite-difference gradient checks for every
//! layer type and the assembled network, brute-force oracles for the
//! distance metrics, and fusion property checks. The `verify` CLI
//! command runs these and the acceptance tests reuse them.
//!
//! Gradient checks run in double precision with central differences
//! (h = 1e-5) and require max relative error below 1e-4 over at least
//! 50 sampled coordinates per case.

use crate::augment::Slab;
use crate::infer::{fuse_majority, ProbMap};
use crate::metrics::{self, Mask};
use crate::nn::ops::{self, NormCache, StatKind};
use crate::nn::{backward, Arch, ModelConfig, Network, Node, NormStates, Pass, Tensor};
use crate::rng::Rng;
use crate::train::{ce_probs, loss_and_seeds};
use crate::volume::ViewAxis;

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_SAMPLES: usize = 50;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Check { name: name.into(), passed, detail }
    }
}

/// Relative error with a dead zone for jointly tiny values (central
/// differences bottom out around 1e-9 in double precision).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central-difference check of `grad` against `f` at `theta`, sampling
/// [`GRAD_SAMPLES`] coordinates.
pub fn fd_check(
    name: &str,
    theta: &[f64],
    f: &dyn Fn(&[f64]) -> f64,
    grad: &[f64],
    rng: &mut Rng,
) -> Check {
    assert_eq!(theta.len(), grad.len());
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for _ in 0..GRAD_SAMPLES {
        let i = rng.below(theta.len() as u64) as usize;
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        let rel = relative_error(grad[i], numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Check::new(
        name,
        max_rel < GRAD_TOL,
        format!("max relative error {max_rel:.3e} (tolerance {GRAD_TOL:.0e}, worst coordinate {worst})"),
    )
}

fn rand_vec(n: usize, rng: &mut Rng, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

/// Split a flat parameter vector into tensors of the given shapes.
fn unflatten(theta: &[f64], shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::from_vec(s, theta[off..off + n].to_vec()).unwrap());
        off += n;
    }
    assert_eq!(off, theta.len());
    out
}

fn flatten(tensors: &[&Tensor<f64>]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn weighted_sum(y: &Tensor<f64>, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn conv_case(name: &str, xs: [usize; 3], ws: [usize; 4], pad: usize, rng: &mut Rng) -> Check {
    let shapes: Vec<Vec<usize>> = vec![xs.to_vec(), ws.to_vec(), vec![ws[0]]];
    let dim: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let theta = rand_vec(dim, rng, -1.0, 1.0);
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let parts = unflatten(&theta, &shape_refs);
    let y0 = ops::conv2d(&parts[0], &parts[1], &parts[2], pad).unwrap();
    let w_loss = rand_vec(y0.len(), rng, -1.0, 1.0);
    let gy = Tensor::from_vec(y0.shape(), w_loss.clone()).unwrap();
    let (gx, gw, gb) = ops::conv2d_backward(&parts[0], &parts[1], &gy, pad).unwrap();
    let grad = flatten(&[&gx, &gw, &gb]);
    let f = move |t: &[f64]| {
        let p = unflatten(t, &[&xs, &ws, &[ws[0]]]);
        weighted_sum(&ops::conv2d(&p[0], &p[1], &p[2], pad).unwrap(), &w_loss)
    };
    fd_check(name, &theta, &f, &grad, rng)
}

fn tconv_case(rng: &mut Rng) -> Check {
    let xs = [2usize, 3, 3];
    let ws = [2usize, 3, 2, 2];
    let dim = 18 + 24 + 3;
    let theta = rand_vec(dim, rng, -1.0, 1.0);
    let parts = unflatten(&theta, &[&xs, &ws, &[3]]);
    let y0 = ops::tconv2(&parts[0], &parts[1], &parts[2]).unwrap();
    let w_loss = rand_vec(y0.len(), rng, -1.0, 1.0);
    let gy = Tensor::from_vec(y0.shape(), w_loss.clone()).unwrap();
    let (gx, gw, gb) = ops::tconv2_backward(&parts[0], &parts[1], &gy).unwrap();
    let grad = flatten(&[&gx, &gw, &gb]);
    let f = move |t: &[f64]| {
        let p = unflatten(t, &[&xs, &ws, &[3]]);
        weighted_sum(&ops::tconv2(&p[0], &p[1], &p[2]).unwrap(), &w_loss)
    };
    fd_check("transposed_conv2 2x2 s2", &theta, &f, &grad, rng)
}

fn elu_case(rng: &mut Rng) -> Check {
    let xs = [2usize, 5, 5];
    let theta = rand_vec(50, rng, -2.0, 2.0);
    let x = Tensor::from_vec(&xs, theta.clone()).unwrap();
    let y0 = ops::elu(&x);
    let w_loss = rand_vec(y0.len(), rng, -1.0, 1.0);
    let gy = Tensor::from_vec(y0.shape(), w_loss.clone()).unwrap();
    let gx = ops::elu_backward(&x, &gy);
    let f = move |t: &[f64]| {
        let x = Tensor::from_vec(&xs, t.to_vec()).unwrap();
        weighted_sum(&ops::elu(&x), &w_loss)
    };
    fd_check("elu", &theta, &f, gx.data(), rng)
}

fn pool_case(rng: &mut Rng) -> Check {
    let xs = [2usize, 6, 6];
    let theta = rand_vec(72, rng, -2.0, 2.0);
    let x = Tensor::from_vec(&xs, theta.clone()).unwrap();
    let y0 = ops::avg_pool2(&x).unwrap();
    let w_loss = rand_vec(y0.len(), rng, -1.0, 1.0);
    let gy = Tensor::from_vec(y0.shape(), w_loss.clone()).unwrap();
    let gx = ops::avg_pool2_backward(&xs, &gy);
    let f = move |t: &[f64]| {
        let x = Tensor::from_vec(&xs, t.to_vec()).unwrap();
        weighted_sum(&ops::avg_pool2(&x).unwrap(), &w_loss)
    };
    fd_check("avg_pool2", &theta, &f, gx.data(), rng)
}

fn softmax_ce_case(rng: &mut Rng) -> Check {
    let xs = [22usize, 3, 3];
    let theta = rand_vec(22 * 9, rng, -3.0, 3.0);
    let labels: Vec<u8> = (0..2 * 9).map(|_| rng.below(11) as u8).collect();
    let x = Tensor::from_vec(&xs, theta.clone()).unwrap();
    let p = ops::softmax_groups(&x, 11).unwrap();
    let (_, seed) = ce_probs(&p, &labels, 11).unwrap();
    let gx = ops::softmax_groups_backward(&p, &seed, 11);
    let labels_f = labels.clone();
    let f = move |t: &[f64]| {
        let x = Tensor::from_vec(&xs, t.to_vec()).unwrap();
        let p = ops::softmax_groups(&x, 11).unwrap();
        ce_probs(&p, &labels_f, 11).unwrap().0
    };
    fd_check("softmax + cross-entropy", &theta, &f, gx.data(), rng)
}

fn norm_case(name: &str, kind: StatKind, rng: &mut Rng) -> Check {
    let xs = [3usize, 4, 4];
    let c = 3usize;
    let dim = 48 + c + c;
    let theta = rand_vec(dim, rng, -2.0, 2.0);
    let fixed_mean = rand_vec(c, rng, -0.5, 0.5);
    let fixed_var = rand_vec(c, rng, 0.5, 2.0);
    let run = |t: &[f64]| -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>, NormCache<f64>) {
        let p = unflatten(t, &[&xs, &[c], &[c]]);
        let fixed = match kind {
            StatKind::FixedPerChannel => Some((fixed_mean.as_slice(), fixed_var.as_slice())),
            _ => None,
        };
        let (y, cache, _) = ops::norm_forward(&p[0], &p[1], &p[2], kind, fixed).unwrap();
        (y, p[0].clone(), p[1].clone(), p[2].clone(), cache)
    };
    let (y0, x0, s0, _b0, cache) = run(&theta);
    let w_loss = rand_vec(y0.len(), rng, -1.0, 1.0);
    let gy = Tensor::from_vec(y0.shape(), w_loss.clone()).unwrap();
    let (gx, gs, gb) = ops::norm_backward(&x0, &s0, &cache, &gy);
    let grad = flatten(&[&gx, &gs, &gb]);
    let f = move |t: &[f64]| weighted_sum(&run(t).0, &w_loss);
    fd_check(name, &theta, &f, &grad, rng)
}

/// Gradient-check a hand-wired dense or plain block through the tape
/// (conv + ELU per layer; dense concatenates every layer's output).
fn block_case(name: &str, dense: bool, rng: &mut Rng) -> Check {
    let xs = [3usize, 6, 6];
    let k = 2usize;
    // Layer input channels: dense grows 3 -> 5; plain is 4 -> 4.
    let shapes: Vec<Vec<usize>> = if dense {
        vec![xs.to_vec(), vec![k, 3, 3, 3], vec![k], vec![k, 5, 3, 3], vec![k]]
    } else {
        vec![xs.to_vec(), vec![4, 3, 3, 3], vec![4], vec![4, 4, 3, 3], vec![4]]
    };
    let dim: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let theta = rand_vec(dim, rng, -0.7, 0.7);
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();

    let run = |t: &[f64]| -> (Pass<f64>, Vec<Tensor<f64>>) {
        let parts = unflatten(t, &shape_refs);
        let params = parts[1..].to_vec();
        let mut pass = Pass::new(parts[0].clone());
        let mut cur = 0usize;
        for layer in 0..2 {
            let (wi, bi) = (layer * 2, layer * 2 + 1);
            let y = ops::conv2d(pass.value(cur), &params[wi], &params[bi], 1).unwrap();
            let conv = pass.push(Node::Conv { x: cur, w: wi, b: bi, pad: 1 }, y);
            let y = ops::elu(pass.value(conv));
            let act = pass.push(Node::Elu { x: conv }, y);
            cur = if dense {
                let y = ops::concat(&[pass.value(cur), pass.value(act)]).unwrap();
                pass.push(Node::Concat { xs: vec![cur, act] }, y)
            } else {
                act
            };
        }
        pass.main = cur;
        (pass, params)
    };

    let (pass0, params0) = run(&theta);
    let w_loss = rand_vec(pass0.main_probs().len(), rng, -1.0, 1.0);
    let gy = Tensor::from_vec(pass0.main_probs().shape(), w_loss.clone()).unwrap();
    let grads = backward(&params0, &pass0, vec![(pass0.main, gy)]).unwrap();
    let grad_refs: Vec<&Tensor<f64>> = std::iter::once(&grads.input)
        .chain(grads.params.iter())
        .collect();
    let grad = flatten(&grad_refs);
    let f = move |t: &[f64]| {
        let (pass, _) = run(t);
        weighted_sum(pass.main_probs(), &w_loss)
    };
    fd_check(name, &theta, &f, &grad, rng)
}

/// Gradient-check the assembled tiny network end to end through the
/// deep-supervision loss.
fn assembled_case(rng: &mut Rng) -> Check {
    let cfg = ModelConfig {
        arch: Arch::Dense,
        k: 2,
        depth: 2,
        layers_per_block: 2,
        slab: 2,
        ..ModelConfig::default()
    };
    let net = Network::<f64>::init(&cfg, rng.next_u64()).unwrap();
    let theta = flatten(&net.params.iter().collect::<Vec<_>>());
    let shapes: Vec<Vec<usize>> = net.params.iter().map(|p| p.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let input =
        Tensor::from_vec(&[2, 8, 8], rand_vec(128, rng, -1.5, 1.5)).unwrap();
    let labels: Vec<u8> = (0..128).map(|_| rng.below(11) as u8).collect();
    let slab = Slab {
        s: 2,
        h: 8,
        w: 8,
        image: input.data().iter().map(|&v| v as f32).collect(),
        labels,
        view: ViewAxis::Transversal,
        origin_slice: 0,
    };

    let run = |t: &[f64]| -> f64 {
        let mut n = net.clone();
        n.params = unflatten(t, &shape_refs);
        let mut states = NormStates::new(&n);
        let pass = n.forward_train(&input, &mut states).unwrap();
        loss_and_seeds(&cfg, &pass, &slab, 0.25).unwrap().0.total
    };

    let mut states = NormStates::new(&net);
    let pass = net.forward_train(&input, &mut states).unwrap();
    let (_, seeds) = loss_and_seeds(&cfg, &pass, &slab, 0.25).unwrap();
    let grads = backward(&net.params, &pass, seeds).unwrap();
    let grad = flatten(&grads.params.iter().collect::<Vec<_>>());
    fd_check("assembled tiny DenseUnet (k=2, depth=2, S=2, 8x8)", &theta, &run, &grad, rng)
}

/// The full gradient-integrity suite.
pub fn gradcheck_suite(seed: u64) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut checks = vec![
        conv_case("conv2d 3x3 same-pad", [2, 6, 6], [3, 2, 3, 3], 1, &mut rng),
        conv_case("conv2d 1x1", [3, 4, 4], [2, 3, 1, 1], 0, &mut rng),
        elu_case(&mut rng),
        pool_case(&mut rng),
        tconv_case(&mut rng),
        softmax_ce_case(&mut rng),
        norm_case("normalize: batch stats per channel (bn train / in)", StatKind::PerChannel, &mut rng),
        norm_case("normalize: running stats (bn inference)", StatKind::FixedPerChannel, &mut rng),
        norm_case("normalize: whole-sample stats (ln)", StatKind::Whole, &mut rng),
        block_case("dense block (2 layers, k=2)", true, &mut rng),
        block_case("plain block (2 layers, f=4)", false, &mut rng),
    ];
    checks.push(assembled_case(&mut rng));
    checks
}

fn counting_dsc(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut ca = 0usize;
    let mut cb = 0usize;
    for i in 0..a.data.len() {
        if a.data[i] && b.data[i] {
            inter += 1;
        }
        if a.data[i] {
            ca += 1;
        }
        if b.data[i] {
            cb += 1;
        }
    }
    if ca + cb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (ca + cb) as f64
    }
}

fn counting_jaccard(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..a.data.len() {
        if a.data[i] && b.data[i] {
            inter += 1;
        }
        if a.data[i] || b.data[i] {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// All-pairs oracle: materialize the full distance matrix between the
/// two surfaces, reduce rows/columns to minima, then aggregate.
fn oracle_distances(a: &Mask, b: &Mask, spacing: [f64; 3]) -> (f64, f64) {
    let sa = metrics::surface_points(a, spacing).unwrap();
    let sb = metrics::surface_points(b, spacing).unwrap();
    let mut matrix = vec![f64::INFINITY; sa.len() * sb.len()];
    for (i, p) in sa.iter().enumerate() {
        for (j, q) in sb.iter().enumerate() {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            matrix[i * sb.len() + j] = d;
        }
    }
    let mut multiset = Vec::with_capacity(sa.len() + sb.len());
    for i in 0..sa.len() {
        multiset.push(
            matrix[i * sb.len()..(i + 1) * sb.len()]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
        );
    }
    for j in 0..sb.len() {
        multiset.push((0..sa.len()).map(|i| matrix[i * sb.len() + j]).fold(f64::INFINITY, f64::min));
    }
    let msd = multiset.iter().sum::<f64>() / multiset.len() as f64;
    multiset.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let hd95 = metrics::percentile(&multiset, 95.0);
    (msd, hd95)
}

/// Metric oracle equivalence over random mask pairs (dims up to 12^3).
pub fn metrics_suite(seed: u64) -> Vec<Check> {
    const PAIRS: usize = 200;
    let mut rng = Rng::seed_from_u64(seed);
    let mut max_overlap_err = 0.0f64;
    let mut max_dist_err = 0.0f64;
    let mut max_identity_err = 0.0f64;
    let mut max_scale_err = 0.0f64;
    let mut evaluated = 0usize;
    for _ in 0..PAIRS {
        let dims = [
            2 + rng.below(11) as usize,
            2 + rng.below(11) as usize,
            2 + rng.below(11) as usize,
        ];
        let n = dims[0] * dims[1] * dims[2];
        let fill = rng.range_f64(0.15, 0.5);
        let a = Mask::new(dims, (0..n).map(|_| rng.coin(fill)).collect()).unwrap();
        let b = Mask::new(dims, (0..n).map(|_| rng.coin(fill)).collect()).unwrap();

        let d = metrics::dsc(&a, &b).unwrap();
        let j = metrics::jaccard(&a, &b).unwrap();
        max_overlap_err = max_overlap_err
            .max((d - counting_dsc(&a, &b)).abs())
            .max((j - counting_jaccard(&a, &b)).abs());
        if d < 2.0 {
            max_identity_err = max_identity_err.max((j - d / (2.0 - d)).abs());
        }

        if a.count() > 0 && b.count() > 0 {
            evaluated += 1;
            let spacing = [rng.range_f64(0.5, 2.0), rng.range_f64(0.5, 2.0), rng.range_f64(0.5, 2.0)];
            let msd = metrics::msd(&a, &b, spacing).unwrap();
            let hd = metrics::hd95(&a, &b, spacing).unwrap();
            let (omsd, ohd) = oracle_distances(&a, &b, spacing);
            max_dist_err = max_dist_err.max((msd - omsd).abs()).max((hd - ohd).abs());

            // Doubling every spacing component must scale exactly.
            let spacing2 = [2.0 * spacing[0], 2.0 * spacing[1], 2.0 * spacing[2]];
            let msd2 = metrics::msd(&a, &b, spacing2).unwrap();
            let hd2 = metrics::hd95(&a, &b, spacing2).unwrap();
            max_scale_err = max_scale_err
                .max((msd2 - 2.0 * msd).abs())
                .max((hd2 - 2.0 * hd).abs());
        }
    }
    vec![
        Check::new(
            "dsc/jaccard vs counting oracle",
            max_overlap_err == 0.0,
            format!("max abs deviation {max_overlap_err:.3e} over {PAIRS} pairs"),
        ),
        Check::new(
            "msd/hd95 vs all-pairs oracle",
            max_dist_err < 1e-9,
            format!("max abs deviation {max_dist_err:.3e} over {evaluated} nonempty pairs"),
        ),
        Check::new(
            "jaccard-dice identity",
            max_identity_err < 1e-9,
            format!("max abs deviation {max_identity_err:.3e}"),
        ),
        Check::new(
            "spacing scaling law (factor 2, exact)",
            max_scale_err == 0.0,
            format!("max abs deviation {max_scale_err:.3e}"),
        ),
    ]
}

fn random_prob_map(dims: [usize; 3], rng: &mut Rng) -> ProbMap {
    let mut m = ProbMap::zeros(11, dims, [1.0; 3]);
    let n = m.voxels();
    for i in 0..n {
        let col: Vec<f64> = (0..11).map(|_| rng.range_f64(0.01, 1.0)).collect();
        let s: f64 = col.iter().sum();
        for c in 0..11 {
            m.data[c * n + i] = (col[c] / s) as f32;
        }
    }
    m
}

/// Majority-vote fusion property checks plus the constructed
/// region-drop scenario.
pub fn fusion_suite(seed: u64) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // Region dropped by one view is restored by the other two.
    {
        let dims = [4, 8, 8];
        let n = dims[0] * dims[1] * dims[2];
        let mut gt = crate::volume::LabelMap::zeros(dims, [1.0; 3]).unwrap();
        for z in 1..3 {
            for y in 2..6 {
                for x in 2..6 {
                    gt.data[(z * 8 + y) * 8 + x] = 8;
                }
            }
        }
        let confident = |labels: &crate::volume::LabelMap| {
            let mut m = ProbMap::zeros(11, dims, [1.0; 3]);
            for i in 0..n {
                let winner = labels.data[i] as usize;
                for c in 0..11 {
                    m.data[c * n + i] = if c == winner { 0.9 } else { 0.01 };
                }
            }
            m
        };
        let good = confident(&gt);
        let blank = crate::volume::LabelMap::zeros(dims, [1.0; 3]).unwrap();
        let bad = confident(&blank);
        let fused = fuse_majority(&good, &good.clone(), &bad).unwrap();
        let fused_mask = Mask::from_labels(&fused, 8);
        let gt_mask = Mask::from_labels(&gt, 8);
        let fused_dsc = metrics::dsc(&fused_mask, &gt_mask).unwrap();
        let bad_dsc = metrics::dsc(&Mask::from_labels(&bad.argmax_labels().unwrap(), 8), &gt_mask).unwrap();
        checks.push(Check::new(
            "two correct views restore a dropped region",
            fused_dsc == 1.0 && bad_dsc < 1.0,
            format!("fused dsc {fused_dsc}, deficient view dsc {bad_dsc}"),
        ));
    }

    // Unanimity: voxels where all three argmax classes agree must keep
    // that class. Random maps rarely agree by chance, so plant an
    // agreed winner at every third voxel.
    {
        let dims = [3, 5, 5];
        let mut a = random_prob_map(dims, &mut rng);
        let mut b = random_prob_map(dims, &mut rng);
        let mut c = random_prob_map(dims, &mut rng);
        let n = a.voxels();
        for i in (0..n).step_by(3) {
            let winner = rng.below(11) as usize;
            for m in [&mut a, &mut b, &mut c] {
                m.data[winner * n + i] = 0.6;
            }
        }
        let (la, lb, lc) = (
            a.argmax_labels().unwrap(),
            b.argmax_labels().unwrap(),
            c.argmax_labels().unwrap(),
        );
        let fused = fuse_majority(&a, &b, &c).unwrap();
        let mut unanimous = 0usize;
        let mut violations = 0usize;
        for i in 0..fused.data.len() {
            if la.data[i] == lb.data[i] && lb.data[i] == lc.data[i] {
                unanimous += 1;
                if fused.data[i] != la.data[i] {
                    violations += 1;
                }
            }
        }
        checks.push(Check::new(
            "unanimous voxels keep their class",
            violations == 0 && unanimous >= n / 3,
            format!("{unanimous} unanimous voxels, {violations} violations"),
        ));
    }

    // Permutation invariance.
    {
        let dims = [2, 4, 4];
        let a = random_prob_map(dims, &mut rng);
        let b = random_prob_map(dims, &mut rng);
        let c = random_prob_map(dims, &mut rng);
        let reference = fuse_majority(&a, &b, &c).unwrap();
        let perms = [(&b, &a, &c), (&c, &b, &a), (&a, &c, &b), (&b, &c, &a), (&c, &a, &b)];
        let stable = perms.iter().all(|(x, y, z)| fuse_majority(x, y, z).unwrap() == reference);
        checks.push(Check::new(
            "fusion is permutation invariant",
            stable,
            "all 6 input orders agree".to_string(),
        ));
    }

    // Three-way split honors summed probability, then lowest id.
    {
        let dims = [1, 1, 1];
        let mut a = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut b = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut c = ProbMap::zeros(11, dims, [1.0; 3]);
        a.data[1] = 0.5;
        a.data[2] = 0.4;
        b.data[2] = 0.5;
        b.data[3] = 0.3;
        c.data[3] = 0.5;
        c.data[2] = 0.3;
        let split_ok = fuse_majority(&a, &b, &c).unwrap().data[0] == 2;

        let mut ta = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut tb = ProbMap::zeros(11, dims, [1.0; 3]);
        let mut tc = ProbMap::zeros(11, dims, [1.0; 3]);
        ta.data[4] = 0.6;
        tb.data[6] = 0.6;
        tc.data[9] = 0.6;
        let tie_ok = fuse_majority(&ta, &tb, &tc).unwrap().data[0] == 4;
        checks.push(Check::new(
            "three-way splits: summed probability, then lowest id",
            split_ok && tie_ok,
            format!("probability split ok: {split_ok}, exact tie ok: {tie_ok}"),
        ));
    }

    checks
}

/// Run every suite (the `verify all` command).
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = gradcheck_suite(seed);
    out.extend(metrics_suite(seed));
    out.extend(fusion_suite(seed));
    out
}
