//! AdamW with warmup and cosine decay, the per-step objective, EMA update,
//! checkpointing and the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{batches_per_epoch, sample_epoch, DatasetBundle, JointBatch, Label};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::losses::{
    combine_losses, label_guided_clip_loss, masked_feature_distillation_loss, mim_loss, total_loss,
    ClipBatchFeatures, ClipLosses, DistillScope, LossBreakdown, LossWeights, MimOptions,
};
use crate::model::{
    decode_features, decode_pixels, ema_update, encode_visible, image_embedding, momentum_target, names,
    text_embedding, ImagePath, ModelConfig, ModelParams, MomentumParams,
};
use crate::params::ParamSet;
use crate::patcher::{sample_mask, select_visible_rows, MaskPlan};
use crate::rng::Rng;
use crate::tensor::{cast, Real, Tensor};

/// Which terms of the objective are active, and how images reach the joint space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// All three terms, contrastive branch through the bridge.
    #[default]
    Maskedclip,
    /// Pixel reconstruction plus contrastive loss on pooled encoder tokens.
    MaeClipShared,
    /// As above but through the bridge; no distillation.
    MaeClipBridge,
    MaeOnly,
    ClipOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Maskedclip,
        Variant::MaeClipShared,
        Variant::MaeClipBridge,
        Variant::MaeOnly,
        Variant::ClipOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Maskedclip => "maskedclip",
            Variant::MaeClipShared => "mae_clip_shared",
            Variant::MaeClipBridge => "mae_clip_bridge",
            Variant::MaeOnly => "mae_only",
            Variant::ClipOnly => "clip_only",
        }
    }

    pub fn uses_mim(self) -> bool {
        self != Variant::ClipOnly
    }

    pub fn uses_clip(self) -> bool {
        self != Variant::MaeOnly
    }

    pub fn uses_mfd(self) -> bool {
        self == Variant::Maskedclip
    }

    pub fn image_path(self) -> ImagePath {
        match self {
            Variant::MaeClipShared => ImagePath::EncoderOnly,
            _ => ImagePath::Bridge,
        }
    }

    /// Loss weights after gating: inactive terms get weight 0.
    pub fn weights(self, lambda_clip: f64, lambda_mfd: f64) -> LossWeights {
        LossWeights {
            lg_clip: if self.uses_clip() { lambda_clip } else { 0.0 },
            mfd: if self.uses_mfd() { lambda_mfd } else { 0.0 },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown variant `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub paired_batch: usize,
    pub unpaired_batch: usize,
    pub mask_ratio: f64,
    pub ema_decay: f64,
    pub lambda_clip: f64,
    pub lambda_mfd: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
    pub mim: MimOptions,
    pub distill_scope: DistillScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            base_lr: 1.5e-4,
            warmup_epochs: 40,
            paired_batch: 32,
            unpaired_batch: 32,
            mask_ratio: 0.75,
            ema_decay: 0.999,
            lambda_clip: 0.01,
            lambda_mfd: 0.01,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
            variant: Variant::Maskedclip,
            checkpoint_every: 0,
            max_grad_norm: None,
            mim: MimOptions::default(),
            distill_scope: DistillScope::AllPatches,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must be in (0, 1), got {}", self.ema_decay));
        }
        if !(self.lambda_clip >= 0.0 && self.lambda_mfd >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("adam betas must be in [0, 1), got {b}"));
            }
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {n}"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        self.variant.weights(self.lambda_clip, self.lambda_mfd)
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup from 0 then half-cosine decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            base_lr: cfg.base_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(self.base_lr, self.warmup_steps, step, self.total_steps)
    }
}

pub fn lr_at(base_lr: f64, warmup_steps: usize, step: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments for every parameter plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: ParamSet<T> = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros.deep_clone(),
            t: 0,
        }
    }
}

/// Layer-norm affines, biases, mask tokens and the temperature are not decayed.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with("mask_token")
        || name == names::LOG_TAU)
}

/// One AdamW update with bias correction and decoupled weight decay. Only
/// parameters present in `grads` move; the step counter advances once.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !state.m.contains(name) || !state.v.contains(name) {
            return Err(Error::KeyMismatch(format!("optimizer state lacks `{name}`")));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of `{name}`"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t): (T, T) = (cast(b1), cast(b2));
    let (one_b1, one_b2): (T, T) = (cast(1.0 - b1), cast(1.0 - b2));
    let (c1t, c2t, eps, lr_t): (T, T, T, T) = (cast(c1), cast(c2), cast(hyper.eps), cast(lr));
    for (name, g) in grads {
        let decay: T = if is_decayed(name) {
            cast(1.0 - lr * hyper.weight_decay)
        } else {
            T::one()
        };
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        let p = params.get_mut(name).expect("checked").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1t * m[i] + one_b1 * gi;
            v[i] = b2t * v[i] + one_b2 * gi * gi;
            let mhat = m[i] / c1t;
            let vhat = v[i] / c2t;
            p[i] = p[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s: T = cast(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Everything one objective evaluation needs besides the parameters.
#[derive(Clone, Debug)]
pub struct StepInputs<T: Real> {
    /// Paired images then unpaired images as `B*N x D_px` patch rows.
    pub patches: Tensor<T>,
    pub num_paired: usize,
    /// Token ids of the paired captions.
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<Label>,
    /// One plan per image, same order as `patches`.
    pub plans: Vec<MaskPlan>,
    /// Momentum-encoder features for every patch, needed when distillation is on.
    pub targets: Option<Tensor<T>>,
}

impl<T: Real> StepInputs<T> {
    pub fn num_images(&self) -> usize {
        self.plans.len()
    }

    fn paired_patches(&self, n: usize) -> Result<Tensor<T>> {
        let d = self.patches.cols();
        let rows = self.num_paired * n;
        Tensor::new(vec![rows, d], self.patches.data()[..rows * d].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    pub weights: LossWeights,
    pub mim: MimOptions,
    pub distill_scope: DistillScope,
}

impl ObjectiveSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        ObjectiveSpec {
            variant: cfg.variant,
            weights: cfg.weights(),
            mim: cfg.mim,
            distill_scope: cfg.distill_scope,
        }
    }
}

/// Graph handles of each computed term. Terms that are gated off are `None`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub mim: Option<Var>,
    pub clip: Option<ClipLosses>,
    pub mfd: Option<Var>,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, weights: LossWeights) -> Result<LossBreakdown> {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar_value(v).as_f64());
        let mut b = total_loss(
            val(self.mim),
            val(self.clip.map(|c| c.combined)),
            val(self.mfd),
            weights,
        )?;
        b.i2t = val(self.clip.map(|c| c.i2t));
        b.t2i = val(self.clip.map(|c| c.t2i));
        Ok(b)
    }
}

/// Build the weighted objective on `g`. The masked branch runs on every
/// image, the contrastive branch on the paired images only.
pub fn objective<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    inputs: &StepInputs<T>,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveVars> {
    let n = cfg.grid.num_patches();
    let want_mim = spec.variant.uses_mim();
    let want_mfd = spec.variant.uses_mfd() && spec.weights.mfd > 0.0;
    let want_clip = spec.variant.uses_clip() && spec.weights.lg_clip > 0.0 && inputs.num_paired > 0;
    if inputs.patches.rows() != inputs.num_images() * n {
        return Err(Error::invalid(format!(
            "{} patch rows for {} images of {n} patches",
            inputs.patches.rows(),
            inputs.num_images()
        )));
    }

    let (mut mim, mut mfd, mut clip) = (None, None, None);
    if want_mim || want_mfd {
        let visible = select_visible_rows(&inputs.patches, &inputs.plans)?;
        let visible = g.constant(visible);
        let latents = encode_visible(g, p, cfg, visible, &inputs.plans)?;
        if want_mim {
            let pred = decode_pixels(g, p, cfg, latents, &inputs.plans)?;
            mim = Some(mim_loss(g, pred, &inputs.patches, &inputs.plans, spec.mim)?);
        }
        if want_mfd {
            let targets = inputs
                .targets
                .as_ref()
                .ok_or_else(|| Error::invalid("distillation needs momentum targets"))?;
            let pred = decode_features(g, p, cfg, latents, &inputs.plans)?;
            mfd = Some(masked_feature_distillation_loss(
                g,
                pred,
                targets,
                &inputs.plans,
                spec.distill_scope,
            )?);
        }
    }
    if want_clip {
        if inputs.tokens.len() != inputs.num_paired || inputs.labels.len() != inputs.num_paired {
            return Err(Error::invalid("paired tokens and labels must match the paired images"));
        }
        let paired = g.constant(inputs.paired_patches(n)?);
        let img = image_embedding(g, p, cfg, paired, spec.variant.image_path())?;
        let txt = text_embedding(g, p, cfg, &inputs.tokens)?;
        let log_tau = p.get(names::LOG_TAU)?;
        let tau = g.exp(log_tau)?;
        let f = ClipBatchFeatures::new(g, img, txt, tau, &inputs.labels)?;
        clip = Some(label_guided_clip_loss(g, &f)?);
    }
    let total = combine_losses(g, mim, clip.map(|c| c.combined), mfd, spec.weights)?;
    Ok(ObjectiveVars { mim, clip, mfd, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// Seconds spent in the step; not part of the written log.
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "step,lr,mim,i2t,t2i,lg_clip,mfd,total";

impl StepRecord {
    /// One CSV line; floats use the shortest representation that round-trips.
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.lr, l.mim, l.i2t, l.t2i, l.lg_clip, l.mfd, l.total
        )
    }
}

/// Model, shadow encoder, optimizer state and position in the run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ModelParams<f32>,
    pub momentum: MomentumParams<f32>,
    pub adam: AdamState<f32>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
}

/// Seed-derived randomness streams, one per purpose.
pub mod streams {
    pub const INIT: &str = "init";
    pub const EPOCH: &str = "epoch";
    pub const MASK: &str = "mask";
}

impl TrainState {
    pub fn new(config: TrainConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, streams::INIT, 0);
        let model = ModelParams::init(model_config, &mut rng)?;
        let momentum = MomentumParams::from_online(&model, config.ema_decay);
        let adam = AdamState::new(&model.params);
        Ok(TrainState {
            config,
            model,
            momentum,
            adam,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self, bundle: &DatasetBundle) -> Result<usize> {
        batches_per_epoch(
            bundle.paired.len(),
            self.config.paired_batch,
            bundle.unpaired.len(),
            self.config.unpaired_batch,
        )
    }

    pub fn is_finished(&self) -> bool {
        self.epoch as usize >= self.config.epochs
    }

    /// Assemble the batch tensors, sample masks and compute momentum targets.
    pub fn prepare(&self, bundle: &DatasetBundle, batch: &JointBatch) -> Result<StepInputs<f32>> {
        let cfg = &self.model.config;
        if bundle.grid != cfg.grid {
            return Err(Error::invalid("bundle image geometry does not match the model"));
        }
        let images = batch
            .paired
            .iter()
            .map(|&i| &bundle.paired[i].image)
            .chain(batch.unpaired.iter().map(|&i| &bundle.unpaired[i].image));
        let patches = bundle.patches(images)?;
        let mut rng = Rng::derive(self.config.seed, streams::MASK, self.step);
        let n = cfg.grid.num_patches();
        let plans = (0..batch.num_images())
            .map(|_| sample_mask(n, self.config.mask_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tokens = batch
            .paired
            .iter()
            .map(|&i| bundle.vocab.tokenize(&bundle.paired[i].text))
            .collect();
        let targets = if self.config.variant.uses_mfd() && self.config.lambda_mfd > 0.0 {
            Some(momentum_target(&self.momentum, cfg, &patches)?)
        } else {
            None
        };
        Ok(StepInputs {
            patches,
            num_paired: batch.paired.len(),
            tokens,
            labels: batch.labels.clone(),
            plans,
            targets,
        })
    }

    /// Forward, backward, AdamW, temperature clamp, then EMA.
    pub fn train_step(&mut self, bundle: &DatasetBundle, batch: &JointBatch, lr: f64) -> Result<StepRecord> {
        let start = Instant::now();
        let inputs = self.prepare(bundle, batch)?;
        let spec = ObjectiveSpec::from_config(&self.config);
        let mut g = Graph::new();
        let bound = g.bind(&self.model.params, true);
        let vars = objective(&mut g, &bound, &self.model.config, &inputs, &spec)?;
        let losses = vars.breakdown(&g, spec.weights)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite { op: "total loss".into() });
        }
        let grads = g.backward(vars.total)?;
        let mut grads = bound.collect(&grads);
        drop(g);
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        adamw_step(&mut self.model.params, &grads, &mut self.adam, &self.config.adam(), lr)?;
        self.model.clamp_tau();
        ema_update(&mut self.momentum, &self.model, self.config.ema_decay)?;
        let record = StepRecord {
            step: self.step,
            lr,
            losses,
            wall_time: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(record)
    }

    /// Batches of the current epoch, regenerated from the seed.
    pub fn epoch_batches(&self, bundle: &DatasetBundle) -> Result<Vec<JointBatch>> {
        let mut rng = Rng::derive(self.config.seed, streams::EPOCH, self.epoch);
        sample_epoch(bundle, self.config.paired_batch, self.config.unpaired_batch, &mut rng)
    }

    /// Run the next step of the schedule, rolling over epochs as needed.
    pub fn next_step(&mut self, bundle: &DatasetBundle) -> Result<Option<StepRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let per_epoch = self.steps_per_epoch(bundle)?;
        let schedule = Schedule::new(&self.config, per_epoch);
        let batches = self.epoch_batches(bundle)?;
        let batch = &batches[self.batch_in_epoch as usize];
        let record = self.train_step(bundle, batch, schedule.lr_at(self.step as usize))?;
        self.batch_in_epoch += 1;
        if self.batch_in_epoch as usize == per_epoch {
            self.batch_in_epoch = 0;
            self.epoch += 1;
        }
        Ok(Some(record))
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model.config,
            "train": self.config,
            "step": self.step,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "adam_t": self.adam.t,
        })
    }

    fn tensors(&self) -> Result<ParamSet<f32>> {
        let mut all = ParamSet::new();
        for (n, t) in self.model.params.iter() {
            all.insert(n, (**t).clone())?;
        }
        for (prefix, set) in [
            ("momentum.", &self.momentum.params),
            ("adam.m.", &self.adam.m),
            ("adam.v.", &self.adam.v),
        ] {
            for (n, t) in set.iter() {
                all.insert(format!("{prefix}{n}"), (**t).clone())?;
            }
        }
        Ok(all)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.metadata(), &self.tensors()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = checkpoint::decode::<f32>(bytes)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{k}`")))
        };
        let parse_err = |k: &str, e: serde_json::Error| Error::Format(format!("checkpoint metadata `{k}`: {e}"));
        let model_config: ModelConfig = serde_json::from_value(field("model")?).map_err(|e| parse_err("model", e))?;
        let config: TrainConfig = serde_json::from_value(field("train")?).map_err(|e| parse_err("train", e))?;
        let num = |k: &str| -> Result<u64> {
            field(k)?
                .as_u64()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata `{k}` is not an integer")))
        };
        let mut split: BTreeMap<&str, ParamSet<f32>> = BTreeMap::new();
        for (name, t) in tensors.iter() {
            let (kind, rest) = ["adam.m.", "adam.v.", "momentum."]
                .into_iter()
                .find_map(|p| name.strip_prefix(p).map(|r| (p, r)))
                .unwrap_or(("", name));
            split.entry(kind).or_default().insert(rest, (**t).clone())?;
        }
        let mut take = |k: &str| split.remove(k).unwrap_or_default();
        let model = ModelParams {
            config: model_config,
            params: take(""),
        };
        checkpoint::check_shapes(&model)?;
        let momentum = MomentumParams {
            params: take("momentum."),
            decay: config.ema_decay,
        };
        let adam = AdamState {
            m: take("adam.m."),
            v: take("adam.v."),
            t: num("adam_t")?,
        };
        for (label, set) in [("momentum", &momentum.params), ("adam.m", &adam.m), ("adam.v", &adam.v)] {
            let reference = if label == "momentum" {
                model.params.subset(&[names::ENCODER, names::BRIDGE])
            } else {
                model.params.clone()
            };
            for (n, t) in reference.iter() {
                match set.get(n) {
                    Some(s) if s.shape() == t.shape() => {}
                    _ => return Err(Error::KeyMismatch(format!("checkpoint {label} entry for `{n}` missing or misshaped"))),
                }
            }
            if set.len() != reference.len() {
                return Err(Error::KeyMismatch(format!("checkpoint has unexpected {label} entries")));
            }
        }
        config.validate()?;
        Ok(TrainState {
            config,
            model,
            momentum,
            adam,
            step: num("step")?,
            epoch: num("epoch")?,
            batch_in_epoch: num("batch_in_epoch")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load a checkpoint and confirm it matches the expected model shape.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let state = Self::load(path)?;
        checkpoint::check_config(expected, &state.model.config)?;
        Ok(state)
    }
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            checkpoint: dir.join("checkpoint.mclp"),
            log: dir.join("train_log.csv"),
        }
    }
}

/// Run the remaining schedule, writing the step log and checkpoints.
/// `on_step` sees every record as it is produced.
pub fn train_loop(
    state: &mut TrainState,
    bundle: &DatasetBundle,
    paths: &RunPaths,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let per_epoch = state.steps_per_epoch(bundle)?;
    let file = std::fs::File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
    let mut log = std::io::BufWriter::new(file);
    let io = |e| Error::io(&paths.log, e);
    writeln!(log, "{LOG_HEADER}").map_err(io)?;
    let mut records = Vec::new();
    while !state.is_finished() {
        let record = state.next_step(bundle)?.expect("not finished");
        writeln!(log, "{}", record.csv_line()).map_err(io)?;
        on_step(&record);
        records.push(record);
        let epoch_done = state.batch_in_epoch == 0;
        let every = state.config.checkpoint_every;
        if epoch_done && every > 0 && (state.epoch as usize).is_multiple_of(every) && !state.is_finished() {
            state.save(&paths.checkpoint)?;
        }
    }
    log.flush().map_err(io)?;
    state.save(&paths.checkpoint)?;
    debug_assert!(records.len() <= per_epoch * state.config.epochs);
    Ok(records)
}

/// Parse a step log back into records (wall time is not stored).
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format(format!("{} does not start with the log header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!("malformed log line `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("`{s}`: {e}")));
            let step = f[0].parse::<u64>().map_err(|e| Error::Format(e.to_string()))?;
            Ok(StepRecord {
                step,
                lr: num(f[1])?,
                losses: LossBreakdown {
                    mim: num(f[2])?,
                    i2t: num(f[3])?,
                    t2i: num(f[4])?,
                    lg_clip: num(f[5])?,
                    mfd: num(f[6])?,
                    total: num(f[7])?,
                    weights: LossWeights::default(),
                },
                wall_time: 0.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let s = Schedule {
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 30,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(5), 0.5);
        assert_eq!(s.lr_at(10), 1.0);
        assert!((s.lr_at(20) - 0.5).abs() < 1e-9);
        assert!(s.lr_at(29) > 0.0 && s.lr_at(29) < 0.01);
    }

    #[test]
    fn adam_hand_run() {
        let mut p: ParamSet<f64> = [("w".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        let mut st = AdamState::new(&p);
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        adamw_step(&mut p, &grads, &mut st, &hyper, 0.1).unwrap();
        // mhat = vhat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_and_decay_only() {
        let init: ParamSet<f64> = [
            ("a.weight".to_string(), Tensor::full(vec![2, 2], 3.0)),
            ("a.bias".to_string(), Tensor::full(vec![1, 2], 3.0)),
        ]
        .into_iter()
        .collect();
        let zero: BTreeMap<String, Tensor<f64>> =
            init.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec()))).collect();
        let mut hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = init.deep_clone();
        adamw_step(&mut p, &zero, &mut AdamState::new(&init), &hyper, 0.1).unwrap();
        assert_eq!(p, init);
        hyper.weight_decay = 0.05;
        adamw_step(&mut p, &zero, &mut AdamState::new(&init), &hyper, 0.1).unwrap();
        assert!(p.get("a.weight").unwrap().data().iter().all(|v| *v == 3.0 * (1.0 - 0.1 * 0.05)));
        assert!(p.get("a.bias").unwrap().data().iter().all(|v| *v == 3.0));
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let init: ParamSet<f64> = [("w".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        let hyper = TrainConfig::default().adam();
        let mut st = AdamState::new(&init);
        let mut p = init.deep_clone();
        let nan = BTreeMap::from([("w".to_string(), Tensor::scalar(f64::NAN))]);
        let err = adamw_step(&mut p, &nan, &mut st, &hyper, 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        let unknown = BTreeMap::from([("z".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(adamw_step(&mut p, &unknown, &mut st, &hyper, 0.1), Err(Error::KeyMismatch(_))));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn no_decay_set() {
        for n in ["encoder.norm.gamma", "encoder.norm.beta", "x.bias", "image_decoder.mask_token", "log_tau"] {
            assert!(!is_decayed(n), "{n}");
        }
        for n in ["encoder.patch_embed.weight", "text.token_embed", "image_proj.weight"] {
            assert!(is_decayed(n), "{n}");
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.epochs, c.base_lr, c.warmup_epochs, c.mask_ratio, c.ema_decay),
            (200, 1.5e-4, 40, 0.75, 0.999)
        );
        assert_eq!((c.lambda_clip, c.lambda_mfd, c.weight_decay, c.beta1, c.beta2), (0.01, 0.01, 0.05, 0.9, 0.95));
        c.validate().unwrap();
        let bad = TrainConfig {
            warmup_epochs: 200,
            ..c.clone()
        };
        assert!(bad.validate().is_err());
        assert!("mae_clip_bridge".parse::<Variant>().unwrap() == Variant::MaeClipBridge);
        assert!("bogus".parse::<Variant>().is_err());
        let weights = Variant::MaeClipBridge.weights(0.01, 0.01);
        assert_eq!(weights.mfd, 0.0);
        assert_eq!(Variant::MaeOnly.weights(0.01, 0.01), LossWeights { lg_clip: 0.0, mfd: 0.0 });
    }
}
