//! U-shaped network construction and evaluation.
//!
//! Two block flavors share one wiring: densely connected blocks (each
//! 3x3 conv emits `k` channels, concatenated to all later layer inputs
//! within the block) and plainly stacked blocks (`f * 2^level` filters
//! per conv). The encoder alternates block / 2x2 average-pool
//! transitions; the decoder alternates 2x2 stride-2 transposed conv /
//! skip concatenation / block; a 1x1 head with per-slice-group softmax
//! produces class probabilities. Auxiliary 1x1 heads hang off every
//! decoder resolution below full and are only evaluated in the
//! training phase.

use serde::{Deserialize, Serialize};

use super::ops::{self, StatKind};
use super::tape::{Node, ParamId, Pass, ValId};
use super::tensor::{sc, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Dense,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    Bn,
    In,
    Ln,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnInferenceMode {
    TrainStats,
    RunningStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlabOut {
    /// Head emits `class_count * slab` channels: per-slice class groups.
    AllSlices,
    /// Head emits `class_count` channels for the center slice only.
    CenterSlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Growth rate (dense blocks).
    pub k: usize,
    /// Initial filter count (plain blocks), doubling per level.
    pub f: usize,
    /// Number of down/up resolution levels.
    pub depth: usize,
    pub layers_per_block: usize,
    /// Slices per slab (the input channel count).
    pub slab: usize,
    pub class_count: usize,
    pub norm: NormMode,
    pub bn_inference_mode: BnInferenceMode,
    pub aux_heads: bool,
    pub slab_out: SlabOut,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Dense,
            k: 48,
            f: 64,
            depth: 4,
            layers_per_block: 4,
            slab: 20,
            class_count: 11,
            norm: NormMode::None,
            bn_inference_mode: BnInferenceMode::TrainStats,
            aux_heads: true,
            slab_out: SlabOut::AllSlices,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.slab < 1 {
            return Err(Error::config("slab must be >= 1"));
        }
        if self.layers_per_block < 1 {
            return Err(Error::config("layers_per_block must be >= 1"));
        }
        if self.k < 1 || self.f < 1 {
            return Err(Error::config("k and f must be >= 1"));
        }
        if !(2..=crate::volume::CLASS_COUNT).contains(&self.class_count) {
            return Err(Error::config(format!(
                "class_count must be in 2..={}, got {}",
                crate::volume::CLASS_COUNT,
                self.class_count
            )));
        }
        Ok(())
    }

    /// Head channel count, `class_count * slab` or `class_count`.
    pub fn out_channels(&self) -> usize {
        match self.slab_out {
            SlabOut::AllSlices => self.class_count * self.slab,
            SlabOut::CenterSlice => self.class_count,
        }
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormSpec {
    pub scale: ParamId,
    pub shift: ParamId,
    pub state: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvSpec {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
    pub norm: Option<NormSpec>,
    pub elu: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockSpec {
    pub dense: bool,
    pub convs: Vec<ConvSpec>,
}

#[derive(Debug, Clone)]
pub(crate) struct UpSpec {
    pub tw: ParamId,
    pub tb: ParamId,
    pub block: BlockSpec,
    pub aux: Option<ConvSpec>,
}

#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub stem: ConvSpec,
    /// Encoder levels: block + optional 1x1 compression conv before pooling.
    pub enc: Vec<(BlockSpec, Option<ConvSpec>)>,
    pub bottleneck: BlockSpec,
    /// Decoder, deepest target level first; `ups[i]` targets level `depth-1-i`.
    pub ups: Vec<UpSpec>,
    pub head: ConvSpec,
    /// Channel count per normalization-state slot.
    pub norm_channels: Vec<usize>,
}

/// Accumulates parameter names/shapes while the plan is wired up.
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    norm_channels: Vec<usize>,
    norm: NormMode,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    /// A block conv: 3x3 same-pad, normalized (if configured) then ELU.
    fn block_conv(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvSpec {
        let w = self.param(format!("{prefix}/w"), vec![cout, cin, 3, 3]);
        let b = self.param(format!("{prefix}/b"), vec![cout]);
        let norm = if self.norm == NormMode::None {
            None
        } else {
            let scale = self.param(format!("{prefix}/scale"), vec![cout]);
            let shift = self.param(format!("{prefix}/shift"), vec![cout]);
            self.norm_channels.push(cout);
            Some(NormSpec { scale, shift, state: self.norm_channels.len() - 1 })
        };
        ConvSpec { w, b, pad: 1, norm, elu: true }
    }

    /// A raw conv (stem, transitions, heads): no norm, no activation.
    fn raw_conv(&mut self, prefix: &str, cin: usize, cout: usize, ksize: usize) -> ConvSpec {
        let w = self.param(format!("{prefix}/w"), vec![cout, cin, ksize, ksize]);
        let b = self.param(format!("{prefix}/b"), vec![cout]);
        ConvSpec { w, b, pad: ksize / 2, norm: None, elu: false }
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, cin: usize, level: usize) -> (BlockSpec, usize) {
        match cfg.arch {
            Arch::Dense => {
                let mut convs = Vec::with_capacity(cfg.layers_per_block);
                let mut c = cin;
                for j in 0..cfg.layers_per_block {
                    convs.push(self.block_conv(&format!("{prefix}/c{j}"), c, cfg.k));
                    c += cfg.k;
                }
                (BlockSpec { dense: true, convs }, c)
            }
            Arch::Plain => {
                let c = cfg.f << level;
                let mut convs = Vec::with_capacity(cfg.layers_per_block);
                let mut prev = cin;
                for j in 0..cfg.layers_per_block {
                    convs.push(self.block_conv(&format!("{prefix}/c{j}"), prev, c));
                    prev = c;
                }
                (BlockSpec { dense: false, convs }, c)
            }
        }
    }
}

fn build_plan(cfg: &ModelConfig) -> Result<(Plan, Vec<String>, Vec<Vec<usize>>)> {
    cfg.validate()?;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        norm_channels: Vec::new(),
        norm: cfg.norm,
    };
    let stem_ch = match cfg.arch {
        Arch::Dense => 2 * cfg.k,
        Arch::Plain => cfg.f,
    };
    let stem = b.raw_conv("stem", cfg.slab, stem_ch, 3);

    let mut channels = stem_ch;
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut skip_channels = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let (block, out_ch) = b.block(&format!("enc{level}"), cfg, channels, level);
        skip_channels.push(out_ch);
        // Transition down: dense compresses to 2k with a 1x1 conv to
        // bound channel growth across levels; plain pools directly.
        let compress = match cfg.arch {
            Arch::Dense => {
                let c = b.raw_conv(&format!("td{level}"), out_ch, 2 * cfg.k, 1);
                channels = 2 * cfg.k;
                Some(c)
            }
            Arch::Plain => {
                channels = out_ch;
                None
            }
        };
        enc.push((block, compress));
    }

    let (bottleneck, mut cur) = b.block("mid", cfg, channels, cfg.depth);

    let mut ups = Vec::with_capacity(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let t_out = match cfg.arch {
            Arch::Dense => 2 * cfg.k,
            Arch::Plain => cfg.f << level,
        };
        let tw = b.param(format!("up{level}/w"), vec![cur, t_out, 2, 2]);
        let tb = b.param(format!("up{level}/b"), vec![t_out]);
        let merged = t_out + skip_channels[level];
        let (block, out_ch) = b.block(&format!("dec{level}"), cfg, merged, level);
        let aux = if cfg.aux_heads && level > 0 {
            Some(b.raw_conv(&format!("aux{level}"), out_ch, cfg.out_channels(), 1))
        } else {
            None
        };
        cur = out_ch;
        ups.push(UpSpec { tw, tb, block, aux });
    }

    let head = b.raw_conv("head", cur, cfg.out_channels(), 1);
    let plan = Plan {
        stem,
        enc,
        bottleneck,
        ups,
        head,
        norm_channels: b.norm_channels,
    };
    Ok((plan, b.names, b.shapes))
}

/// Exact scalar parameter count of the architecture for a config.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    let (_, _, shapes) = build_plan(cfg)?;
    Ok(shapes.iter().map(|s| s.iter().product::<usize>() as u64).sum())
}

/// Running normalization statistics (used by batch norm), one slot per
/// normalized conv.
#[derive(Debug, Clone, PartialEq)]
pub struct Running<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStates<T> {
    pub stats: Vec<Running<T>>,
}

impl<T: Scalar> NormStates<T> {
    pub fn new<U: Scalar>(net: &Network<U>) -> Self {
        NormStates {
            stats: net
                .plan
                .norm_channels
                .iter()
                .map(|&c| Running { mean: vec![T::zero(); c], var: vec![T::one(); c], count: 0 })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> NormStates<U> {
        NormStates {
            stats: self
                .stats
                .iter()
                .map(|r| Running {
                    mean: r.mean.iter().map(|&v| U::from(v).unwrap()).collect(),
                    var: r.var.iter().map(|&v| U::from(v).unwrap()).collect(),
                    count: r.count,
                })
                .collect(),
        }
    }
}

const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub cfg: ModelConfig,
    pub(crate) plan: Plan,
    pub params: Vec<Tensor<T>>,
    pub names: Vec<String>,
}

impl<T: Scalar> Network<T> {
    /// Build and initialize: fan-in-scaled uniform conv weights, zero
    /// biases and shifts, unit scales. Deterministic under `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        Self::init_with_rng(cfg, &mut rng)
    }

    /// Like [`Network::init`] but drawing from the caller's stream, so
    /// training can continue on the same stream after initialization.
    pub fn init_with_rng(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (plan, names, shapes) = build_plan(cfg)?;
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let t = if name.ends_with("/w") && shape.len() == 4 {
                let fan_in: usize = if name.starts_with("up") {
                    // Transposed conv: [Cin, Cout, 2, 2].
                    shape[0] * shape[2] * shape[3]
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| sc::<T>(rng.range_f64(-bound, bound))).collect();
                Tensor::from_vec(shape, data)?
            } else if name.ends_with("/scale") {
                Tensor::filled(shape, T::one())
            } else {
                Tensor::zeros(shape)
            };
            params.push(t);
        }
        Ok(Network { cfg: cfg.clone(), plan, params, names })
    }

    pub fn count_params(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            names: self.names.clone(),
        }
    }

    /// Training-phase forward: records auxiliary heads and folds fresh
    /// batch statistics into the running ones (batch norm only).
    pub fn forward_train(&self, x: &Tensor<T>, states: &mut NormStates<T>) -> Result<Pass<T>> {
        let (pass, updates) = self.run(x, Phase::Train, states)?;
        let momentum = sc::<T>(BN_MOMENTUM);
        let one_minus = T::one() - momentum;
        for (slot, mean, var) in updates {
            let r = &mut states.stats[slot];
            if r.count == 0 {
                r.mean = mean;
                r.var = var;
            } else {
                for (rm, m) in r.mean.iter_mut().zip(mean) {
                    *rm = *rm * momentum + m * one_minus;
                }
                for (rv, v) in r.var.iter_mut().zip(var) {
                    *rv = *rv * momentum + v * one_minus;
                }
            }
            r.count += 1;
        }
        Ok(pass)
    }

    /// Inference-phase forward over frozen weights: no auxiliary heads,
    /// no state mutation; safe to call concurrently.
    pub fn forward_infer(&self, x: &Tensor<T>, states: &NormStates<T>) -> Result<Pass<T>> {
        let (pass, _) = self.run(x, Phase::Infer, states)?;
        Ok(pass)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: &Tensor<T>,
        phase: Phase,
        states: &NormStates<T>,
    ) -> Result<(Pass<T>, Vec<(usize, Vec<T>, Vec<T>)>)> {
        let (c, h, w) = match *x.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(format!("input must be [S,H,W], got {:?}", x.shape()))),
        };
        if c != self.cfg.slab {
            return Err(Error::shape(format!(
                "input has {c} slices, model expects {}",
                self.cfg.slab
            )));
        }
        let div = self.cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!(
                "spatial dims {h}x{w} must be divisible by 2^depth = {div}"
            )));
        }

        let mut pass = Pass::new(x.clone());
        let mut updates = Vec::new();
        let mut cur = self.apply_conv(&mut pass, &self.plan.stem, 0, phase, states, &mut updates)?;

        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (block, compress) in &self.plan.enc {
            cur = self.apply_block(&mut pass, block, cur, phase, states, &mut updates)?;
            skips.push(cur);
            if let Some(cspec) = compress {
                cur = self.apply_conv(&mut pass, cspec, cur, phase, states, &mut updates)?;
            }
            let y = ops::avg_pool2(pass.value(cur))?;
            cur = pass.push(Node::AvgPool2 { x: cur }, y);
        }

        cur = self.apply_block(&mut pass, &self.plan.bottleneck, cur, phase, states, &mut updates)?;

        for (i, up) in self.plan.ups.iter().enumerate() {
            let y = ops::tconv2(pass.value(cur), &self.params[up.tw], &self.params[up.tb])?;
            cur = pass.push(Node::TConv { x: cur, w: up.tw, b: up.tb }, y);
            let skip = skips[self.cfg.depth - 1 - i];
            let y = ops::concat(&[pass.value(cur), pass.value(skip)])?;
            cur = pass.push(Node::Concat { xs: vec![cur, skip] }, y);
            cur = self.apply_block(&mut pass, &up.block, cur, phase, states, &mut updates)?;
            if phase == Phase::Train {
                if let Some(aux) = &up.aux {
                    let a = self.apply_conv(&mut pass, aux, cur, phase, states, &mut updates)?;
                    pass.aux.push(a);
                }
            }
        }

        let logits = self.apply_conv(&mut pass, &self.plan.head, cur, phase, states, &mut updates)?;
        let probs = ops::softmax_groups(pass.value(logits), self.cfg.class_count)?;
        pass.main = pass.push(
            Node::SoftmaxGroups { x: logits, class_count: self.cfg.class_count },
            probs,
        );
        Ok((pass, updates))
    }

    fn apply_block(
        &self,
        pass: &mut Pass<T>,
        block: &BlockSpec,
        input: ValId,
        phase: Phase,
        states: &NormStates<T>,
        updates: &mut Vec<(usize, Vec<T>, Vec<T>)>,
    ) -> Result<ValId> {
        if block.dense {
            let mut cat = input;
            for conv in &block.convs {
                let y = self.apply_conv(pass, conv, cat, phase, states, updates)?;
                let merged = ops::concat(&[pass.value(cat), pass.value(y)])?;
                cat = pass.push(Node::Concat { xs: vec![cat, y] }, merged);
            }
            Ok(cat)
        } else {
            let mut cur = input;
            for conv in &block.convs {
                cur = self.apply_conv(pass, conv, cur, phase, states, updates)?;
            }
            Ok(cur)
        }
    }

    fn apply_conv(
        &self,
        pass: &mut Pass<T>,
        spec: &ConvSpec,
        x: ValId,
        phase: Phase,
        states: &NormStates<T>,
        updates: &mut Vec<(usize, Vec<T>, Vec<T>)>,
    ) -> Result<ValId> {
        let y = ops::conv2d(pass.value(x), &self.params[spec.w], &self.params[spec.b], spec.pad)?;
        let mut cur = pass.push(Node::Conv { x, w: spec.w, b: spec.b, pad: spec.pad }, y);

        if let Some(norm) = &spec.norm {
            let running = &states.stats[norm.state];
            let (kind, update, fixed): (StatKind, bool, Option<(&[T], &[T])>) = match self.cfg.norm {
                NormMode::None => unreachable!("norm spec without norm mode"),
                NormMode::In => (StatKind::PerChannel, false, None),
                NormMode::Ln => (StatKind::Whole, false, None),
                NormMode::Bn => match (phase, self.cfg.bn_inference_mode) {
                    (Phase::Train, _) => (StatKind::PerChannel, true, None),
                    (Phase::Infer, BnInferenceMode::TrainStats) => (StatKind::PerChannel, false, None),
                    (Phase::Infer, BnInferenceMode::RunningStats) => {
                        if running.count == 0 {
                            return Err(Error::invalid(
                                "running statistics uninitialized: train with batch norm first or use train_stats inference",
                            ));
                        }
                        (StatKind::FixedPerChannel, false, Some((&running.mean, &running.var)))
                    }
                },
            };
            let (y, cache, batch) = ops::norm_forward(
                pass.value(cur),
                &self.params[norm.scale],
                &self.params[norm.shift],
                kind,
                fixed,
            )?;
            if update {
                if let Some((m, v)) = batch {
                    updates.push((norm.state, m, v));
                }
            }
            cur = pass.push(
                Node::Norm { x: cur, scale: norm.scale, shift: norm.shift, cache },
                y,
            );
        }

        if spec.elu {
            let y = ops::elu(pass.value(cur));
            cur = pass.push(Node::Elu { x: cur }, y);
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            arch: Arch::Dense,
            k: 2,
            f: 4,
            depth: 1,
            layers_per_block: 1,
            slab: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tiny_dense_output_shape() {
        let cfg = tiny_cfg();
        let net = Network::<f32>::init(&cfg, 0).unwrap();
        let mut states = NormStates::new(&net);
        let x = Tensor::filled(&[1, 8, 8], 0.5);
        let pass = net.forward_train(&x, &mut states).unwrap();
        // slab_out AllSlices with S = 1: 11 channels at full resolution.
        assert_eq!(pass.main_probs().shape(), &[11, 8, 8]);
    }

    #[test]
    fn zero_input_zero_bias_gives_uniform_probs() {
        let cfg = tiny_cfg();
        let net = Network::<f64>::init(&cfg, 3).unwrap();
        let states = NormStates::new(&net);
        let x = Tensor::zeros(&[1, 8, 8]);
        let pass = net.forward_infer(&x, &states).unwrap();
        for &p in pass.main_probs().data() {
            assert!((p - 1.0 / 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aux_heads_in_train_phase_only() {
        let cfg = ModelConfig {
            arch: Arch::Dense,
            k: 2,
            depth: 4,
            layers_per_block: 1,
            slab: 1,
            ..ModelConfig::default()
        };
        let net = Network::<f32>::init(&cfg, 0).unwrap();
        let mut states = NormStates::new(&net);
        let x = Tensor::filled(&[1, 32, 32], 0.1);
        let train = net.forward_train(&x, &mut states).unwrap();
        assert_eq!(train.aux.len(), 3, "one aux head per decoder level below full");
        // Resolutions: deepest first (4x4, 8x8, 16x16).
        assert_eq!(train.value(train.aux[0]).shape(), &[11, 4, 4]);
        assert_eq!(train.value(train.aux[2]).shape(), &[11, 16, 16]);
        let infer = net.forward_infer(&x, &states).unwrap();
        assert!(infer.aux.is_empty());
    }

    #[test]
    fn dense_block_concatenative_growth() {
        let cfg = ModelConfig {
            arch: Arch::Dense,
            k: 3,
            depth: 1,
            layers_per_block: 4,
            slab: 2,
            ..ModelConfig::default()
        };
        let (plan, _, shapes) = build_plan(&cfg).unwrap();
        // enc0 conv j has input channels 2k + j*k.
        for (j, conv) in plan.enc[0].0.convs.iter().enumerate() {
            assert_eq!(shapes[conv.w], vec![3, 6 + 3 * j, 3, 3]);
        }
        // Compression conv input = 2k + layers*k = 18, output 2k = 6.
        let td = plan.enc[0].1.as_ref().unwrap();
        assert_eq!(shapes[td.w], vec![6, 18, 1, 1]);
    }

    #[test]
    fn single_conv_parameter_arithmetic() {
        // A 3x3 conv mapping 1 -> 1 channels costs 9 weights + 1 bias.
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert_eq!(w.len() + b.len(), 10);
    }

    #[test]
    fn param_count_orderings() {
        let dense = ModelConfig::default();
        let plain = ModelConfig { arch: Arch::Plain, ..ModelConfig::default() };
        let nd = count_params(&dense).unwrap();
        let np = count_params(&plain).unwrap();
        assert!(nd < np, "dense {nd} should be far below plain {np}");
        assert!(np as f64 / nd as f64 >= 10.0, "ratio {}", np as f64 / nd as f64);

        let deeper_blocks = ModelConfig { layers_per_block: 8, ..ModelConfig::default() };
        assert!(count_params(&deeper_blocks).unwrap() > nd);

        // Any growth rate up to 64 stays below the plain f=64 count.
        for k in [8, 16, 24, 32, 48, 64] {
            let d = count_params(&ModelConfig { k, ..ModelConfig::default() }).unwrap();
            assert!(d < np, "dense k={k} ({d}) should be below plain ({np})");
        }
    }

    #[test]
    fn init_is_deterministic_and_forward_reproducible() {
        let cfg = tiny_cfg();
        let a = Network::<f32>::init(&cfg, 42).unwrap();
        let b = Network::<f32>::init(&cfg, 42).unwrap();
        assert_eq!(a.params, b.params);
        let states = NormStates::new(&a);
        let x = Tensor::filled(&[1, 8, 8], 0.3);
        let p1 = a.forward_infer(&x, &states).unwrap();
        let p2 = a.forward_infer(&x, &states).unwrap();
        assert_eq!(p1.main_probs(), p2.main_probs());
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let cfg = ModelConfig { depth: 2, ..tiny_cfg() };
        let net = Network::<f32>::init(&cfg, 0).unwrap();
        let states = NormStates::new(&net);
        let x = Tensor::zeros(&[1, 10, 8]);
        assert!(net.forward_infer(&x, &states).is_err());
    }

    #[test]
    fn bn_running_stats_require_training() {
        let cfg = ModelConfig {
            norm: NormMode::Bn,
            bn_inference_mode: BnInferenceMode::RunningStats,
            ..tiny_cfg()
        };
        let net = Network::<f32>::init(&cfg, 0).unwrap();
        let mut states = NormStates::new(&net);
        let x = Tensor::filled(&[1, 8, 8], 0.5);
        let err = net.forward_infer(&x, &states).unwrap_err();
        assert!(err.to_string().contains("running statistics uninitialized"), "{err}");
        // One training pass initializes them.
        net.forward_train(&x, &mut states).unwrap();
        assert!(states.stats.iter().all(|s| s.count == 1));
        net.forward_infer(&x, &states).unwrap();
    }

    #[test]
    fn bn_train_vs_running_inference_differ() {
        let cfg = ModelConfig { norm: NormMode::Bn, ..tiny_cfg() };
        let net = Network::<f32>::init(&cfg, 7).unwrap();
        let mut states = NormStates::new(&net);
        let mut rng = crate::rng::Rng::seed_from_u64(1);
        // A few training passes on varied inputs so running stats drift
        // away from any single batch.
        for _ in 0..5 {
            let data: Vec<f32> = (0..64).map(|_| rng.range_f64(-2.0, 2.0) as f32).collect();
            let x = Tensor::from_vec(&[1, 8, 8], data).unwrap();
            net.forward_train(&x, &mut states).unwrap();
        }
        let data: Vec<f32> = (0..64).map(|_| rng.range_f64(-2.0, 2.0) as f32).collect();
        let x = Tensor::from_vec(&[1, 8, 8], data).unwrap();
        let train_mode = net.forward_infer(&x, &states).unwrap();
        let mut running_net = net;
        running_net.cfg.bn_inference_mode = BnInferenceMode::RunningStats;
        let run_mode = running_net.forward_infer(&x, &states).unwrap();
        let max_diff = train_mode
            .main_probs()
            .data()
            .iter()
            .zip(run_mode.main_probs().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6, "expected differing outputs, max diff {max_diff}");
    }

    #[test]
    fn zero_seed_gradients_are_zero() {
        let cfg = tiny_cfg();
        let net = Network::<f64>::init(&cfg, 1).unwrap();
        let mut states = NormStates::new(&net);
        let x = Tensor::filled(&[1, 8, 8], 0.2);
        let pass = net.forward_train(&x, &mut states).unwrap();
        let seed = Tensor::zeros(pass.main_probs().shape());
        let grads = tape::backward(&net.params, &pass, vec![(pass.main, seed)]).unwrap();
        for g in &grads.params {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_gradients_flow_without_aux_heads() {
        let cfg = ModelConfig { aux_heads: false, depth: 2, ..tiny_cfg() };
        let net = Network::<f64>::init(&cfg, 5).unwrap();
        let mut states = NormStates::new(&net);
        let mut rng = crate::rng::Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..256).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let x = Tensor::from_vec(&[1, 16, 16], data).unwrap();
        let pass = net.forward_train(&x, &mut states).unwrap();
        assert!(pass.aux.is_empty());
        let seed = Tensor::filled(pass.main_probs().shape(), 1.0);
        let grads = tape::backward(&net.params, &pass, vec![(pass.main, seed)]).unwrap();
        let stem_w = net.param_index("stem/w").unwrap();
        let enc_w = net.param_index("enc0/c0/w").unwrap();
        assert!(grads.params[stem_w].data().iter().any(|&v| v != 0.0));
        assert!(grads.params[enc_w].data().iter().any(|&v| v != 0.0));
    }
}
