//! Two-phase optimization: phase 1 trains the cross-modal and fused-modal
//! objectives; phase 2 freezes batch-norm statistics and adds the image-only
//! contrastive term on strongly augmented views.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::datagen::Sample;
use crate::encoders::{attention_pool, cls_feature, project, text_features, token_validity, vision_features};
use crate::fusion::{fuse_and_predict, mask_tokens, MaskStrategy};
use crate::losses::{itc_loss, mlm_loss, ntxent_i2i, total_loss, ContrastiveGrad, LossReport, LossWeights, Mat};
use crate::losses::{MAX_TAU, MIN_TAU};
use crate::model::{image_batch, token_batch, Model};
use crate::nn::{Binder, ParamSet};
use crate::perturb::{dropblock_mask, row_dropout_mask, strong_augment_pair, weak_augment, ImageDims, PerturbConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Which optional objectives enter the total. ITC is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Objectives {
    pub itc_pert_image: bool,
    pub itc_pert_text: bool,
    /// Image-only contrastive term in phase 2 (forwards the strong views).
    pub i2i: bool,
    pub mlm: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self {
            itc_pert_image: true,
            itc_pert_text: true,
            i2i: true,
            mlm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub objectives: Objectives,
    pub freeze_bn_in_phase2: bool,
    pub mask_rate: f64,
    pub mask_strategy: MaskStrategy,
    /// Lives in its own config section.
    #[serde(skip)]
    pub perturb: PerturbConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 20,
            phase2_epochs: 20,
            batch_size: 64,
            base_lr: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            weights: LossWeights::default(),
            objectives: Objectives::default(),
            freeze_bn_in_phase2: true,
            mask_rate: 0.15,
            mask_strategy: MaskStrategy::Plain,
            perturb: PerturbConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("train.batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("train.base_lr = {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay = {}", self.weight_decay)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("train.mask_rate = {}", self.mask_rate)));
        }
        self.weights.validate()?;
        self.perturb.validate()
    }
}

/// `base_lr · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule over zero steps".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule of {total_steps}")));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let x = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + x.cos()))
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: impl Fn(&str) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let lr = lr(name);
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).expect("moment");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let decay = if p.ndim() >= 2 { (lr * self.weight_decay) as f32 } else { 0.0 };
            let step = (lr / bc1) as f32;
            let inv_bc2 = (1.0 / bc2) as f32;
            let eps = self.eps as f32;
            let m = self.m.get(name).expect("moment").data();
            let v = self.v.get(name).expect("moment").data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= decay * *pi;
                *pi -= step * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Everything that determines the continuation of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Optimizer steps taken over the whole run.
    pub step: u64,
    /// 0 before any phase, then 1 or 2.
    pub phase: u8,
    pub phase1_done: bool,
    pub phase_step: u64,
    pub phase_total: u64,
    pub rng: ChaCha8Rng,
    /// Strongly augmented images forwarded so far.
    pub strong_view_forwards: u64,
}

impl TrainState {
    pub fn new(model: Model, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Self {
            model,
            optimizer: AdamW::new(config.weight_decay),
            step: 0,
            phase: 0,
            phase1_done: false,
            phase_step: 0,
            phase_total: 0,
            rng,
            strong_view_forwards: 0,
        }
    }
}

fn contrastive_node(b: &mut Binder<'_>, first: Var, second: Var, tau: Var, g: &ContrastiveGrad) -> Var {
    b.g.external(
        &[first, second, tau],
        g.value as f32,
        vec![
            g.d_first.to_tensor(),
            g.d_second.to_tensor(),
            Tensor::from_vec(&[1], vec![g.d_log_tau as f32]),
        ],
    )
}

fn mat(b: &Binder<'_>, v: Var) -> Mat {
    Mat::from_tensor(b.g.value(v))
}

fn contrastive(
    b: &mut Binder<'_>,
    first: Var,
    second: Var,
    tau_key: &str,
    loss: fn(&Mat, &Mat, f64) -> Result<ContrastiveGrad>,
) -> Result<(Var, f64)> {
    let tau = b.p(tau_key);
    let log_tau = b.g.value(tau).data()[0] as f64;
    let g = loss(&mat(b, first), &mat(b, second), log_tau)?;
    Ok((contrastive_node(b, first, second, tau, &g), g.value))
}

/// Learning rate of the next step under the per-phase cosine schedule.
pub fn current_lr(state: &TrainState, config: &TrainConfig) -> Result<f64> {
    if state.phase_total == 0 {
        return Ok(config.base_lr);
    }
    cosine_lr(state.phase_step.min(state.phase_total), state.phase_total, config.base_lr)
}

/// One AdamW update on the weighted total over `batch`.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, batch: &[&Sample]) -> Result<LossReport> {
    if batch.len() < 2 {
        return Err(Error::Input(format!("training batch of {} samples; need at least 2", batch.len())));
    }
    let lr = current_lr(state, config)?;
    let phase2 = state.phase == 2;
    let cfg = state.model.config.clone();
    let vocab = state.model.vocab_size;
    let keys: BTreeMap<&str, String> = crate::model::TEMPERATURE_TERMS
        .iter()
        .map(|t| (*t, state.model.temperature_key(t)))
        .collect();
    let dims = ImageDims::square(cfg.in_channels, cfg.image_size);
    let n = batch.len();
    let rng = &mut state.rng;

    let mut weak = Vec::with_capacity(n * dims.len());
    for s in batch {
        weak.extend(weak_augment(&s.image, dims, &config.perturb.weak, rng)?);
    }
    let images = Tensor::from_vec(&[n, cfg.in_channels, cfg.image_size, cfg.image_size], weak);
    let tokens = token_batch(batch, cfg.max_len)?;
    let fusion_dims = state.model.fusion_dims();

    let Model { params, bn, .. } = &mut state.model;
    let mut b = Binder::new(params, true);
    let lw = &config.weights;
    let mut report = LossReport::default();
    let mut parts: Vec<(Var, f32)> = Vec::new();

    let fmap = vision_features(&mut b, &cfg, bn, &images, true)?;
    let pooled = attention_pool(&mut b, &cfg, fmap, None);
    let img = project(&mut b, pooled, "vision.proj")?;
    let feats = text_features(&mut b, &cfg, vocab, &tokens, n, None)?;
    let cls = cls_feature(&mut b.g, feats);
    let txt = project(&mut b, cls, "text.proj")?;

    let (node, value) = contrastive(&mut b, img, txt, &keys["itc"], itc_loss)?;
    report.itc = value;
    parts.push((node, lw.lambda_cm as f32));

    if config.objectives.itc_pert_image {
        let p = &config.perturb;
        let mask = if p.dropblock_p > 0.0 {
            Some(dropblock_mask(b.g.shape(fmap), p.dropblock_p, p.dropblock_size, p.dropblock_rescale, rng)?)
        } else {
            None
        };
        let pooled_p = attention_pool(&mut b, &cfg, fmap, mask);
        let img_p = project(&mut b, pooled_p, "vision.proj")?;
        let (node, value) = contrastive(&mut b, img_p, txt, &keys["itc_pert_image"], itc_loss)?;
        report.itc_pert_image = value;
        parts.push((node, lw.lambda_cm as f32));
    }

    if config.objectives.itc_pert_text {
        let p = config.perturb.text_dropout_p;
        let mut cls_p = cls;
        if p > 0.0 {
            let mask = row_dropout_mask(n, cfg.text_width, p, rng)?;
            cls_p = b.g.mul_const(cls, mask);
        }
        let txt_p = project(&mut b, cls_p, "text.proj")?;
        let (node, value) = contrastive(&mut b, img, txt_p, &keys["itc_pert_text"], itc_loss)?;
        report.itc_pert_text = value;
        parts.push((node, lw.lambda_cm as f32));
    }

    if config.objectives.mlm {
        let masking = mask_tokens(&tokens, cfg.max_len, config.mask_rate, vocab, config.mask_strategy, rng)?;
        let valid = token_validity(&masking.masked_tokens, n, cfg.max_len, vocab)?;
        let feats_m = text_features(&mut b, &cfg, vocab, &masking.masked_tokens, n, None)?;
        let logits = fuse_and_predict(&mut b, &fusion_dims, fmap, feats_m, &valid)?;
        let values: Vec<f64> = b.g.value(logits).data().iter().map(|&v| v as f64).collect();
        let ce = mlm_loss(&values, vocab, &masking.targets, &masking.mask_positions)?;
        let grad = Tensor::from_vec(b.g.shape(logits), ce.d_logits.iter().map(|&v| v as f32).collect());
        let node = b.g.external(&[logits], ce.value as f32, vec![grad]);
        report.mlm = ce.value;
        parts.push((node, lw.lambda_fm as f32));
    }

    if phase2 && config.objectives.i2i {
        let mut va = Vec::with_capacity(n * dims.len());
        let mut vb = Vec::with_capacity(n * dims.len());
        for s in batch {
            let (a, bview) = strong_augment_pair(&s.image, dims, &config.perturb.strong, rng)?;
            va.extend(a);
            vb.extend(bview);
        }
        let shape = [n, cfg.in_channels, cfg.image_size, cfg.image_size];
        let mut views = Vec::with_capacity(2);
        for data in [va, vb] {
            let f = vision_features(&mut b, &cfg, bn, &Tensor::from_vec(&shape, data), true)?;
            let pooled = attention_pool(&mut b, &cfg, f, None);
            views.push(project(&mut b, pooled, "vision.proj")?);
        }
        state.strong_view_forwards += 2 * n as u64;
        let (node, value) = contrastive(&mut b, views[0], views[1], &keys["i2i"], ntxent_i2i)?;
        report.i2i = value;
        parts.push((node, lw.lambda_um as f32));
    }

    report.total = total_loss(&report, lw)?;
    let root = b.g.weighted_sum(&parts);
    let mut grads = b.g.backward(root);
    let named = b.collect_grads(&mut grads);
    drop(b);

    state.optimizer.step(&mut state.model.params, &named, |_| lr);
    let (lo, hi) = (MIN_TAU.ln() as f32, MAX_TAU.ln() as f32);
    for (name, t) in state.model.params.iter_mut() {
        if name.starts_with("temperature.") {
            for v in t.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
    state.step += 1;
    state.phase_step += 1;
    Ok(report)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: u8,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossReport,
}

/// Visiting order of the training set for one epoch, a function of
/// `(seed, phase, epoch)` only so that resumed runs see the same batches.
pub fn epoch_order(seed: u64, phase: u8, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 32) | (epoch as u64 + 16));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-step and per-epoch callbacks of [`run_phase`].
pub struct Hooks<'a> {
    pub on_step: &'a mut dyn FnMut(&StepRecord),
    pub on_epoch: &'a mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
}

/// [`run_phase`] without callbacks.
pub fn run_phase_quiet(state: &mut TrainState, config: &TrainConfig, phase: u8, data: &[Sample]) -> Result<Vec<EpochRecord>> {
    let mut hooks = Hooks {
        on_step: &mut |_| {},
        on_epoch: &mut |_, _| Ok(()),
    };
    run_phase(state, config, phase, data, &mut hooks)
}

/// Runs (or resumes) a phase to completion. Incomplete trailing batches are
/// dropped.
pub fn run_phase(
    state: &mut TrainState,
    config: &TrainConfig,
    phase: u8,
    data: &[Sample],
    hooks: &mut Hooks<'_>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let epochs = match phase {
        1 => {
            if state.phase == 2 {
                return Err(Error::Sequencing("phase 1 requested after phase 2 began".into()));
            }
            config.phase1_epochs
        }
        2 => {
            if !(state.phase1_done || state.phase == 2) {
                return Err(Error::Sequencing("phase 2 requires a completed phase 1 or a loaded phase-2 state".into()));
            }
            config.phase2_epochs
        }
        other => return Err(Error::Config(format!("unknown phase {other}"))),
    };
    let steps_per_epoch = data.len() / config.batch_size;
    if epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training samples cannot fill one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    if state.phase != phase {
        state.phase = phase;
        state.phase_step = 0;
        state.phase_total = (epochs * steps_per_epoch) as u64;
    }
    if phase == 2 && config.freeze_bn_in_phase2 {
        state.model.freeze_bn();
    }
    let mut epochs_out = Vec::new();
    while state.phase_step < state.phase_total {
        let epoch = (state.phase_step / steps_per_epoch as u64) as usize;
        let order = epoch_order(config.seed, phase, epoch, data.len());
        let mut sum = LossReport::default();
        let mut steps = 0;
        let mut k = (state.phase_step % steps_per_epoch as u64) as usize;
        while k < steps_per_epoch {
            let batch: Vec<&Sample> = order[k * config.batch_size..(k + 1) * config.batch_size]
                .iter()
                .map(|&i| &data[i])
                .collect();
            let lr = current_lr(state, config)?;
            let report = train_step(state, config, &batch)?;
            (hooks.on_step)(&StepRecord {
                step: state.step,
                phase,
                epoch,
                lr,
                losses: report,
                tau: state.model.log_tau("itc").exp(),
            });
            accumulate(&mut sum, &report);
            steps += 1;
            k += 1;
        }
        let record = EpochRecord {
            phase,
            epoch,
            steps,
            mean: scaled(&sum, 1.0 / steps.max(1) as f64),
        };
        (hooks.on_epoch)(state, &record)?;
        epochs_out.push(record);
    }
    if phase == 1 {
        state.phase1_done = true;
    }
    Ok(epochs_out)
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.itc += r.itc;
    sum.itc_pert_image += r.itc_pert_image;
    sum.itc_pert_text += r.itc_pert_text;
    sum.i2i += r.i2i;
    sum.mlm += r.mlm;
    sum.total += r.total;
}

fn scaled(r: &LossReport, k: f64) -> LossReport {
    LossReport {
        itc: r.itc * k,
        itc_pert_image: r.itc_pert_image * k,
        itc_pert_text: r.itc_pert_text * k,
        i2i: r.i2i * k,
        mlm: r.mlm * k,
        total: r.total * k,
    }
}

/// Convenience for tests and tools: samples as `[B, C, S, S]`.
pub fn batch_images(batch: &[&Sample], model: &Model) -> Result<Tensor> {
    image_batch(batch, model.config.in_channels, model.config.image_size)
}
