use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{
    dpo_gradient, projection_gradient, reference_log_probs, sft_gradient, BatchGradient, DpoScope,
    Side,
};
use super::optim::{Optimizer, OptimizerConfig};
use super::trace::TrainTrace;
use crate::error::{Error, Result};
use crate::model::{
    encode_image, sequence_log_prob_with, ModelParams, ParamSet, Policy, ProjectionPair,
    VisualProjection,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::world::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_interval: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 400,
            batch_size: 16,
            log_interval: 20,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_interval: usize,
    pub scope: DpoScope,
    pub optimizer: OptimizerConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 1e-2,
            steps: 64,
            batch_size: 16,
            log_interval: 4,
            scope: DpoScope::FullModel,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoupledMode {
    NegOnly,
    PosOnly,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    #[default]
    Sft,
    PretrainStage,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoupledConfig {
    pub mode: DecoupledMode,
    pub init_source: InitSource,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub log_interval: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DecoupledConfig {
    fn default() -> Self {
        Self {
            mode: DecoupledMode::Both,
            init_source: InitSource::Sft,
            lr: 1e-2,
            epochs: 1,
            batch_size: 16,
            log_interval: 4,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl DecoupledConfig {
    /// Optimizer steps for `n` training examples.
    pub fn steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size.max(1))
    }
}

fn check_common(stage: &str, lr: f64, steps: usize, batch: usize, interval: usize) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("{stage}.lr must be finite and non-negative, got {lr}")));
    }
    if steps == 0 || batch == 0 || interval == 0 {
        return Err(Error::Config(format!(
            "{stage}: step or epoch count, batch_size and log_interval must be positive"
        )));
    }
    Ok(())
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        check_common("sft", self.lr, self.steps, self.batch_size, self.log_interval)
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("dpo.beta must be positive, got {}", self.beta)));
        }
        check_common("dpo", self.lr, self.steps, self.batch_size, self.log_interval)
    }
}

impl DecoupledConfig {
    pub fn validate(&self) -> Result<()> {
        check_common("dcd", self.lr, self.epochs, self.batch_size, self.log_interval)
    }
}

/// Epoch-wise shuffled mini-batches; the final batch of an epoch may be short.
pub struct Batches {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: Rng,
}

impl Batches {
    pub fn new(n: usize, batch_size: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            batch_size,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

fn require_data(stage: &str, data: &[Example<'_>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{stage}: training data is empty")));
    }
    Ok(())
}

fn check_finite<S: Scalar>(step: usize, loss: S) -> Result<()> {
    let loss = loss.widen();
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

fn select<'a>(data: &[Example<'a>], idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter().map(|&i| data[i]).collect()
}

/// Mean held-out `(log π(y_w | ψ), log π(y_l | φ))` over `probes`.
pub fn probe_log_probs<S: Scalar>(
    model: &ModelParams<S>,
    positive: &VisualProjection<S>,
    negative: &VisualProjection<S>,
    probes: &[Example<'_>],
) -> Result<(f64, f64)> {
    if probes.is_empty() {
        return Ok((0.0, 0.0));
    }
    let parts: Vec<Result<(f64, f64)>> = probes
        .par_iter()
        .map(|e| {
            let vis_w = encode_image(e.v, positive)?;
            let vis_l = encode_image(e.v, negative)?;
            Ok((
                sequence_log_prob_with(model, &vis_w, e.x, e.y_w)?.widen(),
                sequence_log_prob_with(model, &vis_l, e.x, e.y_l)?.widen(),
            ))
        })
        .collect();
    let (mut w, mut l) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        w += a;
        l += b;
    }
    let n = probes.len() as f64;
    Ok((w / n, l / n))
}

/// Supervised fine-tuning of θ and ψ on `(x, v, y_w)`.
pub fn sft_train<S: Scalar>(
    policy: &Policy<S>,
    data: &[Example<'_>],
    probes: &[Example<'_>],
    config: &SftConfig,
    rng: &Rng,
) -> Result<(Policy<S>, TrainTrace)> {
    config.validate()?;
    require_data("sft", data)?;
    let mut policy = policy.clone();
    let mut batches = Batches::new(data.len(), config.batch_size, rng.derive("batches"));
    let mut model_opt = Optimizer::new(config.optimizer.clone());
    let mut proj_opt = Optimizer::new(config.optimizer.clone());
    let mut trace = TrainTrace::default();
    for step in 0..config.steps {
        let batch = select(data, &batches.next_batch());
        let g = sft_gradient(&policy, &batch)?;
        check_finite(step, g.loss)?;
        if step % config.log_interval == 0 {
            let (w, l) = probe_log_probs(&policy.model, &policy.projection, &policy.projection, probes)?;
            trace.push(step, g.loss.widen(), w, l);
        }
        model_opt.step(policy.model.tensors_mut(), &g.model, config.lr);
        proj_opt.step(policy.projection.tensors_mut(), &g.projection, config.lr);
    }
    Ok((policy, trace))
}

/// DPO against a frozen reference. Reference likelihoods are computed once
/// from `reference` before the first update.
pub fn train_dpo<S: Scalar>(
    policy: &Policy<S>,
    reference: &Policy<S>,
    data: &[Example<'_>],
    probes: &[Example<'_>],
    config: &DpoConfig,
    rng: &Rng,
) -> Result<(Policy<S>, TrainTrace)> {
    config.validate()?;
    require_data("dpo", data)?;
    let ref_logps = reference_log_probs(reference, data)?;
    let mut policy = policy.clone();
    let beta = S::of(config.beta);
    let mut batches = Batches::new(data.len(), config.batch_size, rng.derive("batches"));
    let mut model_opt = Optimizer::new(config.optimizer.clone());
    let mut proj_opt = Optimizer::new(config.optimizer.clone());
    let mut trace = TrainTrace::default();
    for step in 0..config.steps {
        let idx = batches.next_batch();
        let batch = select(data, &idx);
        let refs: Vec<(S, S)> = idx.iter().map(|&i| ref_logps[i]).collect();
        let g = dpo_gradient(&policy, &refs, &batch, beta, config.scope)?;
        check_finite(step, g.loss)?;
        if step % config.log_interval == 0 {
            let (w, l) = probe_log_probs(&policy.model, &policy.projection, &policy.projection, probes)?;
            trace.push(step, g.loss.widen(), w, l);
        }
        if config.scope == DpoScope::FullModel {
            model_opt.step(policy.model.tensors_mut(), &g.model, config.lr);
        }
        proj_opt.step(policy.projection.tensors_mut(), &g.projection, config.lr);
    }
    Ok((policy, trace))
}

/// Trains a fresh projection on DESCRIBE positives with θ frozen, the
/// analogue of a pretrain-stage projector.
pub fn pretrain_projection<S: Scalar>(
    model: &ModelParams<S>,
    describe: &[Example<'_>],
    config: &SftConfig,
    rng: &Rng,
) -> Result<VisualProjection<S>> {
    config.validate()?;
    require_data("pretrain", describe)?;
    let mut proj = VisualProjection::init(&model.config, &mut rng.derive("init"));
    let mut batches = Batches::new(describe.len(), config.batch_size, rng.derive("batches"));
    let mut opt = Optimizer::new(config.optimizer.clone());
    for step in 0..config.steps {
        let batch = select(describe, &batches.next_batch());
        let g = projection_gradient(model, &proj, &batch, Side::Positive)?;
        check_finite(step, g.loss)?;
        opt.step(proj.tensors_mut(), &g.projection, config.lr);
    }
    Ok(proj)
}

/// Initial (ψ, φ) pair; both sides are bitwise copies of the chosen source.
pub fn init_projection_from<S: Scalar>(
    source: InitSource,
    sft_projection: &VisualProjection<S>,
    pretrain_projection: Option<&VisualProjection<S>>,
    model: &ModelParams<S>,
    rng: &Rng,
) -> Result<ProjectionPair<S>> {
    let base = match source {
        InitSource::Sft => sft_projection.clone(),
        InitSource::PretrainStage => pretrain_projection
            .ok_or_else(|| {
                Error::MissingDependency("pretrain-stage projection for init_source = pretrain_stage".into())
            })?
            .clone(),
        InitSource::Random => VisualProjection::init(&model.config, &mut rng.derive("random_projection")),
    };
    Ok(ProjectionPair::identical(&base))
}

/// Decoupled projection learning: φ minimizes the NLL of `y_l`, ψ the NLL
/// of `y_w`, both through the frozen θ. Both sides see the same batches.
pub fn train_decoupled<S: Scalar>(
    model: &ModelParams<S>,
    pair: &ProjectionPair<S>,
    data: &[Example<'_>],
    probes: &[Example<'_>],
    config: &DecoupledConfig,
    rng: &Rng,
) -> Result<(ProjectionPair<S>, TrainTrace)> {
    config.validate()?;
    require_data("dcd", data)?;
    let theta_before = model.checksum();
    let mut pair = pair.clone();
    let train_neg = config.mode != DecoupledMode::PosOnly;
    let train_pos = config.mode != DecoupledMode::NegOnly;
    let mut batches = Batches::new(data.len(), config.batch_size, rng.derive("batches"));
    let mut neg_opt = Optimizer::new(config.optimizer.clone());
    let mut pos_opt = Optimizer::new(config.optimizer.clone());
    let mut trace = TrainTrace::default();
    for step in 0..config.steps(data.len()) {
        let batch = select(data, &batches.next_batch());
        let run = |on: bool, proj: &VisualProjection<S>, side| -> Result<Option<BatchGradient<S>>> {
            on.then(|| projection_gradient(model, proj, &batch, side)).transpose()
        };
        let neg = run(train_neg, &pair.negative, Side::Negative)?;
        let pos = run(train_pos, &pair.positive, Side::Positive)?;
        let loss = neg.as_ref().map_or(S::zero(), |g| g.loss) + pos.as_ref().map_or(S::zero(), |g| g.loss);
        check_finite(step, loss)?;
        if step % config.log_interval == 0 {
            let (w, l) = probe_log_probs(model, &pair.positive, &pair.negative, probes)?;
            trace.push(step, loss.widen(), w, l);
        }
        if let Some(g) = neg {
            neg_opt.step(pair.negative.tensors_mut(), &g.projection, config.lr);
        }
        if let Some(g) = pos {
            pos_opt.step(pair.positive.tensors_mut(), &g.projection, config.lr);
        }
    }
    if model.checksum() != theta_before {
        return Err(Error::ContractBreach(
            "language-model weights changed during decoupled projection training".into(),
        ));
    }
    Ok((pair, trace))
}
