//! Scalar losses and their batch gradients.
//!
//! Each sample is differentiated on its own tape and the per-sample
//! gradients are summed in sample order, which is the same as a padded batch
//! with PAD positions masked out of the loss, and stays deterministic when
//! the per-sample work runs in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Array, Tape, Var};
use crate::error::Result;
use crate::model::{
    response_nll, sequence_log_prob, visual_on_tape, BoundModel, ImageFeature, ModelParams,
    ParamSet, Policy, VisualProjection,
};
use crate::scalar::Scalar;
use crate::world::Example;

/// Which response a projection loss scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `y_w` through ψ.
    Positive,
    /// `y_l` through φ.
    Negative,
}

/// Trainable parameter set of the DPO baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpoScope {
    /// Language model and projection.
    #[default]
    FullModel,
    ProjectionOnly,
}

/// Loss of a batch and its gradient. Groups that were frozen have empty
/// gradient lists.
#[derive(Debug, Clone)]
pub struct BatchGradient<S> {
    pub loss: S,
    pub model: Vec<Array<S>>,
    pub projection: Vec<Array<S>>,
}

impl<S: Scalar> BatchGradient<S> {
    fn scale(&mut self, factor: S) {
        self.loss *= factor;
        for g in self.model.iter_mut().chain(self.projection.iter_mut()) {
            g.scale_in_place(factor);
        }
    }

    fn add(&mut self, other: &BatchGradient<S>) {
        self.loss += other.loss;
        for (a, b) in self.model.iter_mut().zip(&other.model) {
            a.add_assign(b);
        }
        for (a, b) in self.projection.iter_mut().zip(&other.projection) {
            a.add_assign(b);
        }
    }

    /// Euclidean norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.model
            .iter()
            .chain(&self.projection)
            .flat_map(|g| g.data())
            .map(|x| x.widen() * x.widen())
            .sum::<f64>()
            .sqrt()
    }
}

/// Differentiates `f` for one sample. `f` receives the bound model and the
/// visual prefix and returns a scalar root.
fn sample_gradient<S, F>(
    model: &ModelParams<S>,
    projection: &VisualProjection<S>,
    train_model: bool,
    v: &ImageFeature,
    f: F,
) -> Result<BatchGradient<S>>
where
    S: Scalar,
    F: for<'t> FnOnce(&mut Tape<'t, S>, &BoundModel, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound_model = model.bind(&mut tape, train_model);
    let bound_proj = projection.bind(&mut tape, true);
    let visual = visual_on_tape(&mut tape, &bound_proj, v)?;
    let root = f(&mut tape, &bound_model, visual)?;
    let loss = tape.value(root).item();
    let mut grads = tape.backward(root)?;
    let mut collect = |vars: Vec<Var>, tensors: Vec<&Array<S>>| -> Vec<Array<S>> {
        vars.into_iter()
            .zip(tensors)
            .map(|(var, t)| grads.take_or_zeros(var, t.shape()))
            .collect()
    };
    let model_grads = if train_model {
        collect(bound_model.vars(), model.tensors())
    } else {
        Vec::new()
    };
    let projection_grads = collect(bound_proj.vars(), projection.tensors());
    Ok(BatchGradient {
        loss,
        model: model_grads,
        projection: projection_grads,
    })
}

/// Runs `per_sample` over `batch` (possibly in parallel) and sums the
/// results in batch order.
fn sum_in_order<S, T, F>(batch: &[T], per_sample: F) -> Result<BatchGradient<S>>
where
    S: Scalar,
    T: Sync,
    F: Fn(&T) -> Result<BatchGradient<S>> + Sync + Send,
{
    let parts: Vec<Result<BatchGradient<S>>> = batch.par_iter().map(per_sample).collect();
    let mut parts = parts.into_iter();
    let mut total = parts.next().expect("non-empty batch")?;
    for part in parts {
        total.add(&part?);
    }
    Ok(total)
}

fn token_count(batch: &[Example<'_>], side: Side) -> usize {
    batch
        .iter()
        .map(|e| match side {
            Side::Positive => e.y_w.len(),
            Side::Negative => e.y_l.len(),
        })
        .sum()
}

/// Mean per-token NLL of `y_w` over the batch, trained jointly in θ and ψ.
pub fn sft_gradient<S: Scalar>(policy: &Policy<S>, batch: &[Example<'_>]) -> Result<BatchGradient<S>> {
    let config = &policy.model.config;
    let mut g = sum_in_order(batch, |e| {
        sample_gradient(&policy.model, &policy.projection, true, e.v, |tape, m, vis| {
            response_nll(tape, m, config, vis, e.x, e.y_w)
        })
    })?;
    g.scale(S::one() / S::of(token_count(batch, Side::Positive) as f64));
    Ok(g)
}

/// Mean per-token NLL of `y_w` under `policy`.
pub fn sft_loss<S: Scalar>(policy: &Policy<S>, batch: &[Example<'_>]) -> Result<S> {
    let mut total = S::zero();
    for e in batch {
        total -= sequence_log_prob(&policy.model, &policy.projection, e.x, e.v, e.y_w)?;
    }
    Ok(total / S::of(token_count(batch, Side::Positive) as f64))
}

/// `−log σ(β·(ratio_w − ratio_l))` where each ratio is
/// `log π_θ(y) − log π_ref(y)`.
pub fn dpo_loss_from_ratios<S: Scalar>(ratio_w: S, ratio_l: S, beta: S) -> S {
    kernels::softplus(-(beta * (ratio_w - ratio_l)))
}

/// DPO loss of one preference pair.
pub fn dpo_loss<S: Scalar>(
    policy: &Policy<S>,
    reference: &Policy<S>,
    example: &Example<'_>,
    beta: S,
) -> Result<S> {
    let lp = |p: &Policy<S>, y: &[usize]| sequence_log_prob(&p.model, &p.projection, example.x, example.v, y);
    let ratio_w = lp(policy, example.y_w)? - lp(reference, example.y_w)?;
    let ratio_l = lp(policy, example.y_l)? - lp(reference, example.y_l)?;
    Ok(dpo_loss_from_ratios(ratio_w, ratio_l, beta))
}

/// Reference log-likelihoods `(log π_ref(y_w), log π_ref(y_l))` per example.
pub fn reference_log_probs<S: Scalar>(
    reference: &Policy<S>,
    examples: &[Example<'_>],
) -> Result<Vec<(S, S)>> {
    examples
        .par_iter()
        .map(|e| {
            let lp = |y: &[usize]| sequence_log_prob(&reference.model, &reference.projection, e.x, e.v, y);
            Ok((lp(e.y_w)?, lp(e.y_l)?))
        })
        .collect()
}

/// Mean DPO loss over the batch. `reference[i]` belongs to `batch[i]`.
pub fn dpo_gradient<S: Scalar>(
    policy: &Policy<S>,
    reference: &[(S, S)],
    batch: &[Example<'_>],
    beta: S,
    scope: DpoScope,
) -> Result<BatchGradient<S>> {
    debug_assert_eq!(reference.len(), batch.len());
    let config = &policy.model.config;
    let train_model = scope == DpoScope::FullModel;
    let items: Vec<(&Example<'_>, (S, S))> = batch.iter().zip(reference.iter().copied()).collect();
    let mut g = sum_in_order(&items, |(e, (ref_w, ref_l))| {
        sample_gradient(&policy.model, &policy.projection, train_model, e.v, |tape, m, vis| {
            let nll_w = response_nll(tape, m, config, vis, e.x, e.y_w)?;
            let nll_l = response_nll(tape, m, config, vis, e.x, e.y_l)?;
            // softplus(β·(nll_w − nll_l) + β·(ref_w − ref_l))
            let diff = tape.sub(nll_w, nll_l)?;
            let scaled = tape.scale(diff, beta);
            let shifted = tape.add_scalar(scaled, beta * (*ref_w - *ref_l));
            Ok(tape.softplus(shifted))
        })
    })?;
    g.scale(S::one() / S::of(batch.len() as f64));
    Ok(g)
}

fn projection_loss<S: Scalar>(
    model: &ModelParams<S>,
    projection: &VisualProjection<S>,
    example: &Example<'_>,
    y: &[usize],
) -> Result<S> {
    let lp = sequence_log_prob(model, projection, example.x, example.v, y)?;
    Ok(-lp / S::of(y.len() as f64))
}

/// Mean per-token NLL of `y_l` given the φ embedding; θ is only read.
pub fn neg_projection_loss<S: Scalar>(
    model: &ModelParams<S>,
    negative: &VisualProjection<S>,
    example: &Example<'_>,
) -> Result<S> {
    projection_loss(model, negative, example, example.y_l)
}

/// Mean per-token NLL of `y_w` given the ψ embedding; θ is only read.
pub fn pos_projection_loss<S: Scalar>(
    model: &ModelParams<S>,
    positive: &VisualProjection<S>,
    example: &Example<'_>,
) -> Result<S> {
    projection_loss(model, positive, example, example.y_w)
}

/// Batch gradient of the projection loss for `side`. θ is bound as a
/// constant, so no gradient reaches it and `model` in the result is empty.
pub fn projection_gradient<S: Scalar>(
    model: &ModelParams<S>,
    projection: &VisualProjection<S>,
    batch: &[Example<'_>],
    side: Side,
) -> Result<BatchGradient<S>> {
    let config = &model.config;
    let mut g = sum_in_order(batch, |e| {
        let y = match side {
            Side::Positive => e.y_w,
            Side::Negative => e.y_l,
        };
        sample_gradient(model, projection, false, e.v, |tape, m, vis| {
            response_nll(tape, m, config, vis, e.x, y)
        })
    })?;
    g.scale(S::one() / S::of(token_count(batch, side) as f64));
    Ok(g)
}
