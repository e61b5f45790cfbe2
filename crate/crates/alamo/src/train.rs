//! Loss construction with deep supervision, Adam optimization with
//! step decay, the multi-view shared-weight training loop, and
//! checkpointing.
//!
//! The loop is a single logical thread of parameter mutation and is
//! bit-reproducible under a fixed seed: per step it draws, in order,
//! the training volume, the slab crop, the two flip coins and the
//! deformation parameters from one ChaCha8 stream whose state rides
//! along in every checkpoint.

use serde::{Deserialize, Serialize};

use crate::augment::{self, DeformLimits, Slab};
use crate::error::{Error, Result};
use crate::nn::{
    backward, sc, Checkpoint, ModelConfig, Network, NormStates, Pass, Scalar, SlabOut, Tensor,
    ValId,
};
use crate::rng::Rng;
use crate::volume::{LabelMap, Volume, ViewAxis};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub max_steps: u64,
    /// Weight of each auxiliary head's cross-entropy.
    pub aux_weight: f64,
    /// Deterministic view schedule; position `step % len` trains that
    /// view. Must realize the 4:1:1 transversal:coronal:sagittal ratio.
    pub view_cycle: Vec<ViewAxis>,
    pub seed: u64,
    /// Emit a checkpoint and a validation loss every this many steps
    /// (0 disables periodic checkpoints; the final one is always written).
    pub checkpoint_every: u64,
    /// Resample training volumes to this isotropic spacing before use;
    /// `None` keeps the native grid (volumes must then be isotropic).
    pub target_spacing: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        use ViewAxis::*;
        TrainConfig {
            lr0: 1e-4,
            decay: 0.9,
            decay_every: 50_000,
            max_steps: 2_000,
            aux_weight: 0.25,
            view_cycle: vec![Transversal, Transversal, Transversal, Transversal, Coronal, Sagittal],
            seed: 0,
            checkpoint_every: 500,
            target_spacing: None,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr0 > 0.0) {
            out.push(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            out.push(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.decay_every == 0 {
            out.push("decay_every must be >= 1".into());
        }
        if self.aux_weight < 0.0 {
            out.push("aux_weight must be >= 0".into());
        }
        if let Some(t) = self.target_spacing {
            if !(t > 0.0) {
                out.push(format!("target_spacing must be > 0, got {t}"));
            }
        }
        let mut counts = [0usize; 3];
        for v in &self.view_cycle {
            match v {
                ViewAxis::Transversal => counts[0] += 1,
                ViewAxis::Coronal => counts[1] += 1,
                ViewAxis::Sagittal => counts[2] += 1,
            }
        }
        if self.view_cycle.len() != 6 || counts != [4, 1, 1] {
            out.push(format!(
                "view_cycle must be 6 entries with 4 transversal, 1 coronal, 1 sagittal, got {:?}",
                self.view_cycle
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub deform_p: f64,
    pub rotation_max: f64,
    pub shear_max: f64,
    pub projective_max: f64,
    /// Slab crop as `[s, h, w]`; `s` must match the model's slab size.
    pub slab: [usize; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            deform_p: 0.5,
            rotation_max: augment::ROTATION_BOUND,
            shear_max: augment::SHEAR_BOUND,
            projective_max: augment::PROJECTIVE_BOUND,
            slab: [20, 256, 160],
        }
    }
}

impl AugmentConfig {
    pub fn limits(&self) -> DeformLimits {
        DeformLimits {
            rotation_max: self.rotation_max,
            shear_max: self.shear_max,
            projective_max: self.projective_max,
        }
    }

    pub fn problems(&self, model: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        for (name, p) in [("flip_p", self.flip_p), ("deform_p", self.deform_p)] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if let Err(e) = self.limits().validate() {
            out.push(e.to_string());
        }
        if self.slab[0] != model.slab {
            out.push(format!(
                "augment slab[0] = {} must equal the model slab size {}",
                self.slab[0], model.slab
            ));
        }
        let div = model.spatial_divisor();
        if self.slab[1] % div != 0 || self.slab[2] % div != 0 {
            out.push(format!(
                "slab plane {}x{} must be divisible by 2^depth = {div}",
                self.slab[1], self.slab[2]
            ));
        }
        out
    }
}

/// Learning rate after `step` optimization steps:
/// `lr0 * decay^floor(step / decay_every)`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    cfg.lr0 * cfg.decay.powi((step / cfg.decay_every) as i32)
}

/// Adam first/second moment state; `t` counts completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients with
/// the offending parameter named; nothing is silently clipped.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("parameter/gradient count mismatch"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} at element {j}; aborting optimizer step"
            )));
        }
    }
    state.t += 1;
    let b1 = sc::<T>(ADAM_BETA1);
    let b2 = sc::<T>(ADAM_BETA2);
    let one = T::one();
    let bc1 = one - sc::<T>(ADAM_BETA1.powi(state.t as i32));
    let bc2 = one - sc::<T>(ADAM_BETA2.powi(state.t as i32));
    let lr_t = sc::<T>(lr);
    let eps = sc::<T>(ADAM_EPS);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for k in 0..pd.len() {
            let gk = g.data()[k];
            md[k] = b1 * md[k] + (one - b1) * gk;
            vd[k] = b2 * vd[k] + (one - b2) * gk * gk;
            let mhat = md[k] / bc1;
            let vhat = vd[k] / bc2;
            pd[k] = pd[k] - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean multi-class cross-entropy of probability maps against slab
/// labels, with the gradient seed with respect to the probabilities.
/// `probs` is `[groups * class_count, H, W]` where each group is one
/// output slice.
pub fn ce_probs<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    class_count: usize,
) -> Result<(f64, Tensor<T>)> {
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let groups = c / class_count;
    let plane = h * w;
    if labels.len() != groups * plane {
        return Err(Error::shape(format!(
            "{} labels for {} predicted positions",
            labels.len(),
            groups * plane
        )));
    }
    let n = (groups * plane) as f64;
    let mut ce = 0.0f64;
    let mut seed = Tensor::zeros(probs.shape());
    let pd = probs.data();
    let sd = seed.data_mut();
    let floor = T::min_positive_value();
    for g in 0..groups {
        for pos in 0..plane {
            let label = labels[g * plane + pos] as usize;
            if label >= class_count {
                return Err(Error::invalid(format!(
                    "label id {label} out of range for {class_count} classes"
                )));
            }
            let i = (g * class_count + label) * plane + pos;
            let p = pd[i].max(floor);
            ce -= p.to_f64().unwrap().ln();
            sd[i] = -T::one() / (sc::<T>(n) * p);
        }
    }
    Ok((ce / n, seed))
}

/// Mean cross-entropy of logits (softmax fused) against labels, with
/// `weight`-scaled gradient seed with respect to the logits.
pub fn ce_logits<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    class_count: usize,
    weight: f64,
) -> Result<(f64, Tensor<T>)> {
    let probs = crate::nn::ops::softmax_groups(logits, class_count)?;
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let groups = c / class_count;
    let plane = h * w;
    if labels.len() != groups * plane {
        return Err(Error::shape(format!(
            "{} labels for {} predicted positions",
            labels.len(),
            groups * plane
        )));
    }
    let n = (groups * plane) as f64;
    let scale = sc::<T>(weight / n);
    let mut ce = 0.0f64;
    let mut seed = probs.clone();
    let floor = T::min_positive_value();
    for v in seed.data_mut() {
        *v = *v * scale;
    }
    for g in 0..groups {
        for pos in 0..plane {
            let label = labels[g * plane + pos] as usize;
            if label >= class_count {
                return Err(Error::invalid(format!(
                    "label id {label} out of range for {class_count} classes"
                )));
            }
            let i = (g * class_count + label) * plane + pos;
            ce -= probs.data()[i].max(floor).to_f64().unwrap().ln();
            seed.data_mut()[i] = seed.data_mut()[i] - scale;
        }
    }
    Ok((ce / n, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main_ce: f64,
    pub aux_ce: Vec<f64>,
}

/// Deep-supervision loss: main cross-entropy plus `aux_weight` times
/// each auxiliary head's cross-entropy against nearest-neighbor
/// downsampled labels. Returns the gradient seeds for [`backward`].
pub fn loss_and_seeds<T: Scalar>(
    cfg: &ModelConfig,
    pass: &Pass<T>,
    slab: &Slab,
    aux_weight: f64,
) -> Result<(LossBreakdown, Vec<(ValId, Tensor<T>)>)> {
    let target: Vec<u8> = match cfg.slab_out {
        SlabOut::AllSlices => slab.labels.clone(),
        SlabOut::CenterSlice => {
            let mid = slab.s / 2;
            slab.labels[mid * slab.h * slab.w..(mid + 1) * slab.h * slab.w].to_vec()
        }
    };
    let groups = match cfg.slab_out {
        SlabOut::AllSlices => slab.s,
        SlabOut::CenterSlice => 1,
    };

    let (main_ce, main_seed) = ce_probs(pass.main_probs(), &target, cfg.class_count)?;
    let mut seeds = vec![(pass.main, main_seed)];
    let mut aux_ce = Vec::with_capacity(pass.aux.len());
    for &aux_id in &pass.aux {
        let logits = pass.value(aux_id);
        let (ah, aw) = (logits.shape()[1], logits.shape()[2]);
        let factor = slab.h / ah;
        if factor * ah != slab.h || factor * aw != slab.w {
            return Err(Error::shape(format!(
                "aux head {ah}x{aw} is not an integer downsample of {}x{}",
                slab.h, slab.w
            )));
        }
        // Nearest-neighbor downsampled labels (top-left rule).
        let mut ds = Vec::with_capacity(groups * ah * aw);
        for g in 0..groups {
            let base = match cfg.slab_out {
                SlabOut::AllSlices => g,
                SlabOut::CenterSlice => slab.s / 2,
            };
            for y in 0..ah {
                for x in 0..aw {
                    ds.push(slab.labels[(base * slab.h + y * factor) * slab.w + x * factor]);
                }
            }
        }
        let (ce, seed) = ce_logits(logits, &ds, cfg.class_count, aux_weight)?;
        aux_ce.push(ce);
        seeds.push((aux_id, seed));
    }
    let total = main_ce + aux_weight * aux_ce.iter().sum::<f64>();
    Ok((LossBreakdown { total, main_ce, aux_ce }, seeds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl TraceRow {
    pub fn csv(&self) -> String {
        match self.val_loss {
            Some(v) => format!("{},{},{},{}", self.step, self.lr, self.train_loss, v),
            None => format!("{},{},{},", self.step, self.lr, self.train_loss),
        }
    }
}

pub const TRACE_HEADER: &str = "step,lr,train_loss,val_loss";

/// In-memory training corpus (already paired; ids are positional).
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<(Volume, LabelMap)>,
    pub val: Vec<(Volume, LabelMap)>,
}

/// Everything that evolves during training; checkpoints capture it
/// completely so a resumed run continues the identical trace.
#[derive(Debug)]
pub struct TrainState {
    pub net: Network<f32>,
    pub norm: NormStates<f32>,
    pub adam: AdamState<f32>,
    pub rng: Rng,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Self> {
        // Initialization and the training draws share one stream, so a
        // single seed pins the whole run.
        let mut rng = Rng::seed_from_u64(tcfg.seed);
        let net = Network::<f32>::init_with_rng(mcfg, &mut rng)?;
        let norm = NormStates::new(&net);
        let adam = AdamState::new(&net.params);
        Ok(TrainState { net, norm, adam, rng, step: 0 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::pack_network(&self.net, &self.norm);
        ckpt.push_u64("opt/step", vec![self.step]);
        ckpt.push_u64("opt/adam_t", vec![self.adam.t]);
        for ((name, m), v) in self.net.names.iter().zip(&self.adam.m).zip(&self.adam.v) {
            ckpt.push_f32(format!("opt/m/{name}"), m.shape(), m.data().to_vec());
            ckpt.push_f32(format!("opt/v/{name}"), v.shape(), v.data().to_vec());
        }
        let (seed, pos) = self.rng.state();
        ckpt.push_u8("opt/rng_seed", seed.to_vec());
        ckpt.push_u64("opt/rng_pos", vec![pos as u64, (pos >> 64) as u64]);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (net, norm) = ckpt.unpack_network()?;
        let mut adam = AdamState::new(&net.params);
        adam.t = ckpt.u64_values("opt/adam_t")?[0];
        for (i, name) in net.names.iter().enumerate() {
            adam.m[i] = ckpt.f32_tensor(&format!("opt/m/{name}"))?;
            adam.v[i] = ckpt.f32_tensor(&format!("opt/v/{name}"))?;
            if adam.m[i].shape() != net.params[i].shape()
                || adam.v[i].shape() != net.params[i].shape()
            {
                return Err(Error::format(format!(
                    "optimizer moment shape mismatch for '{name}'"
                )));
            }
        }
        let step = ckpt.u64_values("opt/step")?[0];
        let seed_rec = match ckpt.get("opt/rng_seed") {
            Some(crate::nn::Record { data: crate::nn::RecData::U8(v), .. }) if v.len() == 32 => {
                let mut seed = [0u8; 32];
                seed.copy_from_slice(v);
                seed
            }
            _ => return Err(Error::format("missing or malformed record 'opt/rng_seed'")),
        };
        let pos = ckpt.u64_values("opt/rng_pos")?;
        if pos.len() != 2 {
            return Err(Error::format("record 'opt/rng_pos' must hold two words"));
        }
        let word_pos = (pos[0] as u128) | ((pos[1] as u128) << 64);
        let rng = Rng::from_state(seed_rec, word_pos);
        Ok(TrainState { net, norm, adam, rng, step })
    }
}

/// Callbacks for artifacts produced mid-run.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub on_trace: Option<&'a mut dyn FnMut(&TraceRow)>,
    pub on_checkpoint: Option<&'a mut dyn FnMut(u64, &Checkpoint) -> Result<()>>,
}

/// Run the training loop from `state.step` to `tcfg.max_steps`.
///
/// Per step: pick the view from the cycle, reslice a randomly chosen
/// training volume, crop a slab, flip/deform it, forward, loss,
/// backward, Adam step. Training loss is recorded every step and a
/// validation loss (deterministic center slab, main head only) every
/// `checkpoint_every` steps. Aborts if the loss goes non-finite.
pub fn train_loop(
    mut state: TrainState,
    data: &Dataset,
    tcfg: &TrainConfig,
    acfg: &AugmentConfig,
    sinks: &mut TrainSinks,
) -> Result<(TrainState, Vec<TraceRow>)> {
    tcfg.validate()?;
    let mcfg = state.net.cfg.clone();
    let problems = acfg.problems(&mcfg);
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }

    let prep = |pairs: &[(Volume, LabelMap)]| -> Result<Vec<(Volume, LabelMap)>> {
        pairs
            .iter()
            .map(|(v, l)| {
                let v = crate::volume::standardize(v)?;
                match tcfg.target_spacing {
                    Some(t) => Ok((
                        crate::volume::resample_isotropic(&v, t)?,
                        crate::volume::resample_labels(l, t)?,
                    )),
                    None => Ok((v, l.clone())),
                }
            })
            .collect()
    };
    let train_set = prep(&data.train)?;
    let val_set = prep(&data.val)?;
    let [s, h, w] = acfg.slab;
    let limits = acfg.limits();

    let mut trace = Vec::new();
    while state.step < tcfg.max_steps {
        let step = state.step;
        let view = tcfg.view_cycle[(step % tcfg.view_cycle.len() as u64) as usize];
        let pick = state.rng.below(train_set.len() as u64) as usize;
        let (vol, lab) = &train_set[pick];
        let slab = augment::crop_slab(vol, lab, view, s, h, w, &mut state.rng)?;
        let slab = augment::random_flip(&slab, acfg.flip_p, &mut state.rng);
        let params = augment::draw_params(&mut state.rng, acfg.deform_p, &limits);
        let slab = augment::projective_deform(&slab, &params)?;

        let x = Tensor::from_vec(&[s, h, w], slab.image.clone())?;
        let pass = state.net.forward_train(&x, &mut state.norm)?;
        let (loss, seeds) = loss_and_seeds(&mcfg, &pass, &slab, tcfg.aux_weight)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at step {step}: {}",
                loss.total
            )));
        }
        let grads = backward(&state.net.params, &pass, seeds)?;
        let lr = lr_at(tcfg, step);
        adam_step(&mut state.net.params, &grads.params, &mut state.adam, lr)?;
        state.step += 1;

        let at_checkpoint = tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0;
        let val_loss = if at_checkpoint && !val_set.is_empty() {
            Some(validation_loss(&state.net, &state.norm, &val_set, &mcfg, acfg)?)
        } else {
            None
        };
        let row = TraceRow { step, lr, train_loss: loss.total, val_loss };
        if let Some(cb) = sinks.on_trace.as_mut() {
            cb(&row);
        }
        trace.push(row);

        if at_checkpoint && state.step < tcfg.max_steps {
            if let Some(cb) = sinks.on_checkpoint.as_mut() {
                cb(state.step, &state.to_checkpoint())?;
            }
        }
    }

    if let Some(cb) = sinks.on_checkpoint.as_mut() {
        cb(state.step, &state.to_checkpoint())?;
    }
    Ok((state, trace))
}

/// Mean main-head cross-entropy over deterministic center slabs of the
/// validation volumes (inference phase, no augmentation, no RNG).
pub fn validation_loss(
    net: &Network<f32>,
    norm: &NormStates<f32>,
    val: &[(Volume, LabelMap)],
    mcfg: &ModelConfig,
    acfg: &AugmentConfig,
) -> Result<f64> {
    let [s, h, w] = acfg.slab;
    let mut total = 0.0;
    for (vol, lab) in val {
        let slab = augment::center_slab(vol, lab, ViewAxis::Transversal, s, h, w)?;
        let x = Tensor::from_vec(&[s, h, w], slab.image.clone())?;
        let pass = net.forward_infer(&x, norm)?;
        let target: Vec<u8> = match mcfg.slab_out {
            SlabOut::AllSlices => slab.labels.clone(),
            SlabOut::CenterSlice => {
                let mid = slab.s / 2;
                slab.labels[mid * slab.h * slab.w..(mid + 1) * slab.h * slab.w].to_vec()
            }
        };
        let (ce, _) = ce_probs(pass.main_probs(), &target, mcfg.class_count)?;
        total += ce;
    }
    Ok(total / val.len() as f64)
}
