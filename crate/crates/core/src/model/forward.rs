//! Forward passes of the toy multimodal model.
//!
//! The input sequence is `[visual tokens; prompt x; response prefix]` with
//! learned absolute position embeddings. Logits at position `p` predict the
//! token at `p + 1`.

use super::params::{
    BoundModel, BoundProjection, ImageFeature, ModelParams, VisualEmbedding, VisualProjection,
};
use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Token = usize;
pub type TokenSequence = Vec<Token>;

/// Applies `proj` to `v` (a pure function of weights and input).
pub fn encode_image<S: Scalar>(
    v: &ImageFeature,
    proj: &VisualProjection<S>,
) -> Result<VisualEmbedding<S>> {
    let mut tape = Tape::new();
    let bound = proj.bind(&mut tape, false);
    let image = tape.constant(v.to_array());
    let out = bound.apply(&mut tape, image)?;
    Ok(VisualEmbedding(tape.value(out).clone()))
}

fn check_context<S: Scalar>(
    params: &ModelParams<S>,
    visual: usize,
    prompt: usize,
    response: usize,
) -> Result<()> {
    let max = params.config.max_context;
    if visual + prompt + response > max {
        return Err(Error::ContextOverflow {
            visual,
            prompt,
            response,
            max,
        });
    }
    Ok(())
}

/// Runs the transformer over `visual` followed by `tokens` and returns the
/// `T×V` logits for every position.
pub fn transformer_logits<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &BoundModel,
    config: &super::ModelConfig,
    visual: Var,
    tokens: &[Token],
) -> Result<Var> {
    let n_visual = tape.value(visual).shape()[0];
    let total = n_visual + tokens.len();
    if total > config.max_context {
        return Err(Error::ContextOverflow {
            visual: n_visual,
            prompt: tokens.len(),
            response: 0,
            max: config.max_context,
        });
    }
    let mut h = if tokens.is_empty() {
        visual
    } else {
        let emb = tape.embedding(model.token_embedding, tokens)?;
        tape.concat_rows(visual, emb)?
    };
    let positions: Vec<usize> = (0..total).collect();
    let pos = tape.embedding(model.position_embedding, &positions)?;
    h = tape.add(h, pos)?;

    let eps = config.layer_norm_eps;
    for block in &model.blocks {
        let n = tape.layer_norm(h, block.attn_norm_gain, block.attn_norm_bias, eps)?;
        let q = block.query.apply(tape, n)?;
        let k = block.key.apply(tape, n)?;
        let v = block.value.apply(tape, n)?;
        let att = tape.causal_attention(q, k, v, config.heads)?;
        let att = block.output.apply(tape, att)?;
        h = tape.add(h, att)?;

        let n = tape.layer_norm(h, block.mlp_norm_gain, block.mlp_norm_bias, eps)?;
        let m = block.mlp_in.apply(tape, n)?;
        let m = tape.gelu(m);
        let m = block.mlp_out.apply(tape, m)?;
        h = tape.add(h, m)?;
    }
    let n = tape.layer_norm(h, model.final_norm_gain, model.final_norm_bias, eps)?;
    model.lm_head.apply(tape, n)
}

/// Summed negative log-likelihood of `y` given the visual prefix and `x`,
/// built on `tape` so it can be differentiated. `y` must be non-empty.
pub fn response_nll<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &BoundModel,
    config: &super::ModelConfig,
    visual: Var,
    x: &[Token],
    y: &[Token],
) -> Result<Var> {
    debug_assert!(!y.is_empty());
    let n_visual = tape.value(visual).shape()[0];
    let mut inputs = Vec::with_capacity(x.len() + y.len());
    inputs.extend_from_slice(x);
    inputs.extend_from_slice(&y[..y.len() - 1]);
    let logits = transformer_logits(tape, model, config, visual, &inputs)?;
    let rows = n_visual + inputs.len();
    let mut targets = vec![None; rows];
    let first = n_visual + x.len() - 1;
    for (t, &tok) in y.iter().enumerate() {
        if tok >= config.vocab_size {
            return Err(Error::InvalidToken {
                id: tok,
                vocab: config.vocab_size,
            });
        }
        targets[first + t] = Some(tok);
    }
    tape.cross_entropy(logits, &targets)
}

/// Visual prefix for `v` under `proj`, placed on `tape`.
pub fn visual_on_tape<S: Scalar>(
    tape: &mut Tape<'_, S>,
    proj: &BoundProjection,
    v: &ImageFeature,
) -> Result<Var> {
    let image = tape.constant(v.to_array());
    proj.apply(tape, image)
}

/// Next-token logits after `y_prefix`, conditioned on `vis` and `x`.
pub fn forward_logits<S: Scalar>(
    params: &ModelParams<S>,
    vis: &VisualEmbedding<S>,
    x: &[Token],
    y_prefix: &[Token],
) -> Result<Array<S>> {
    let n_visual = vis.tokens();
    check_context(params, n_visual, x.len(), y_prefix.len())?;
    let expected = [params.config.visual_tokens, params.config.d_model];
    if vis.0.shape() != expected {
        return Err(Error::shape("forward_logits", vis.0.shape(), &expected));
    }
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let visual = tape.param(&vis.0, false);
    let mut tokens = Vec::with_capacity(x.len() + y_prefix.len());
    tokens.extend_from_slice(x);
    tokens.extend_from_slice(y_prefix);
    let logits = transformer_logits(&mut tape, &model, &params.config, visual, &tokens)?;
    let last = n_visual + tokens.len() - 1;
    Ok(Array::vector(tape.value(logits).row(last).to_vec()))
}

/// `Σ_t log p(y_t | v, x, y_<t)` including the final EOS; zero for empty `y`.
pub fn sequence_log_prob<S: Scalar>(
    params: &ModelParams<S>,
    proj: &VisualProjection<S>,
    x: &[Token],
    v: &ImageFeature,
    y: &[Token],
) -> Result<S> {
    if y.is_empty() {
        return Ok(S::zero());
    }
    let vis = encode_image(v, proj)?;
    sequence_log_prob_with(params, &vis, x, y)
}

/// [`sequence_log_prob`] with a precomputed visual embedding.
pub fn sequence_log_prob_with<S: Scalar>(
    params: &ModelParams<S>,
    vis: &VisualEmbedding<S>,
    x: &[Token],
    y: &[Token],
) -> Result<S> {
    if y.is_empty() {
        return Ok(S::zero());
    }
    check_context(params, vis.tokens(), x.len(), y.len() - 1)?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let visual = tape.param(&vis.0, false);
    let nll = response_nll(&mut tape, &model, &params.config, visual, x, y)?;
    Ok(-tape.value(nll).item())
}
