//! Autoregressive decoding: greedy, noise-contrastive (VCD), decoupled
//! contrastive (DCD) and the other-image negative.
//!
//! Every contrastive strategy runs the same loop: at each step both logit
//! streams are evaluated on the one shared prefix, combined, and the argmax
//! (lowest id on ties) is appended.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::{
    encode_image, forward_logits, ImageFeature, ModelParams, ProjectionPair, Token, TokenSequence,
    VisualEmbedding, VisualProjection,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::world::vocab::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Vcd,
    Dcd,
    OtherImage,
}

/// Which projection conditions the positive stream of DCD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivePath {
    /// The projection from supervised fine-tuning.
    #[default]
    SftProj,
    /// ψ as trained by the decoupled stage.
    TrainedPosProj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Weight of the negative stream.
    pub alpha: f64,
    /// Noise std of the VCD distorted image.
    pub sigma: f64,
    pub max_len: usize,
    pub positive_path: PositivePath,
    /// Samples from `softmax(logits / T)` instead of taking the argmax.
    pub temperature: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            alpha: 1.0,
            sigma: 1.0,
            max_len: 16,
            positive_path: PositivePath::SftProj,
            temperature: None,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            max_len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("decode.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("decode.sigma must be >= 0, got {}", self.sigma)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("decode.max_len must be at least 1".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("decode.temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// `(1+α)·logit_w − α·logit_l`, evaluated as `logit_w + α·(logit_w − logit_l)`
/// so that equal streams or `α = 0` return `logit_w` exactly.
pub fn contrastive_combine<S: Scalar>(logit_w: &Array<S>, logit_l: &Array<S>, alpha: S) -> Result<Array<S>> {
    if logit_w.shape() != logit_l.shape() {
        return Err(Error::Shape {
            op: "contrastive_combine",
            lhs: logit_w.shape().to_vec(),
            rhs: logit_l.shape().to_vec(),
        });
    }
    if alpha == S::zero() {
        return Ok(logit_w.clone());
    }
    let data = logit_w
        .data()
        .iter()
        .zip(logit_l.data())
        .map(|(&w, &l)| w + alpha * (w - l))
        .collect();
    Array::from_vec(logit_w.shape().to_vec(), data)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<S: Scalar>(logits: &[S]) -> Token {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

fn choose<S: Scalar>(logits: &Array<S>, temperature: Option<f64>, rng: &mut Rng) -> Token {
    match temperature {
        None => argmax(logits.data()),
        Some(t) => {
            let scaled: Vec<f64> = logits.data().iter().map(|x| x.widen() / t).collect();
            let mut probs = vec![0.0; scaled.len()];
            crate::autodiff::kernels::softmax_row(&scaled, &mut probs);
            rng.weighted_index(&probs).unwrap_or_else(|| argmax(&scaled))
        }
    }
}

/// Generated tokens and the step counter of one response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeState {
    pub tokens: TokenSequence,
    pub step: usize,
    pub finished: bool,
}

impl DecodeState {
    fn push(&mut self, token: Token, max_len: usize) {
        self.tokens.push(token);
        self.step += 1;
        self.finished = token == EOS || self.step >= max_len;
    }
}

/// The shared decoding loop. `logit_w` and `logit_l` map the current
/// prefix to next-token logits; both are always called with the same prefix.
pub fn contrastive_decode<S, W, L>(
    max_len: usize,
    alpha: S,
    temperature: Option<f64>,
    rng: &mut Rng,
    mut logit_w: W,
    mut logit_l: Option<L>,
) -> Result<TokenSequence>
where
    S: Scalar,
    W: FnMut(&[Token]) -> Result<Array<S>>,
    L: FnMut(&[Token]) -> Result<Array<S>>,
{
    let mut state = DecodeState::default();
    while !state.finished {
        let prefix = state.tokens.as_slice();
        let w = logit_w(prefix)?;
        let combined = match logit_l.as_mut() {
            Some(l) => contrastive_combine(&w, &l(prefix)?, alpha)?,
            None => w,
        };
        let token = choose(&combined, temperature, rng);
        state.push(token, max_len);
    }
    Ok(state.tokens)
}

/// Longest response that still fits in the context window.
fn length_limit<S: Scalar>(model: &ModelParams<S>, vis: &VisualEmbedding<S>, x: &[Token], max_len: usize) -> Result<usize> {
    let room = model.config.max_context.saturating_sub(vis.tokens() + x.len());
    if room == 0 {
        return Err(Error::ContextOverflow {
            visual: vis.tokens(),
            prompt: x.len(),
            response: 1,
            max: model.config.max_context,
        });
    }
    Ok(max_len.min(room))
}

/// Decodes with `vis_w` as the positive stream and, when given, `vis_l` as
/// the negative one.
pub fn decode_embeddings<S: Scalar>(
    model: &ModelParams<S>,
    x: &[Token],
    vis_w: &VisualEmbedding<S>,
    vis_l: Option<&VisualEmbedding<S>>,
    config: &DecodeConfig,
    rng: &Rng,
) -> Result<TokenSequence> {
    config.validate()?;
    let max_len = length_limit(model, vis_w, x, config.max_len)?;
    let mut sample_rng = rng.derive("sampling");
    contrastive_decode(
        max_len,
        S::of(config.alpha),
        config.temperature,
        &mut sample_rng,
        |prefix| forward_logits(model, vis_w, x, prefix),
        vis_l.map(|vl| move |prefix: &[Token]| forward_logits(model, vl, x, prefix)),
    )
}

/// Argmax decoding under a single projection.
pub fn greedy_decode<S: Scalar>(
    model: &ModelParams<S>,
    proj: &VisualProjection<S>,
    x: &[Token],
    v: &ImageFeature,
    config: &DecodeConfig,
) -> Result<TokenSequence> {
    let vis = encode_image(v, proj)?;
    decode_embeddings(model, x, &vis, None, config, &Rng::new(0))
}

/// `v + ε` with `ε ~ N(0, σ²)` per coordinate.
pub fn perturb_image(v: &ImageFeature, sigma: f64, rng: &mut Rng) -> ImageFeature {
    if sigma == 0.0 {
        return v.clone();
    }
    ImageFeature(v.0.iter().map(|&x| x + sigma * rng.normal()).collect())
}

/// Contrasts `v` with one noisy copy of `v`, drawn once per response.
pub fn decode_vcd<S: Scalar>(
    model: &ModelParams<S>,
    proj: &VisualProjection<S>,
    x: &[Token],
    v: &ImageFeature,
    config: &DecodeConfig,
    rng: &Rng,
) -> Result<TokenSequence> {
    let noisy = perturb_image(v, config.sigma, &mut rng.derive("vcd_noise"));
    let vis_w = encode_image(v, proj)?;
    let vis_l = encode_image(&noisy, proj)?;
    decode_embeddings(model, x, &vis_w, Some(&vis_l), config, rng)
}

/// Contrasts the positive projection with φ; both embeddings are computed
/// once per response.
pub fn decode_dcd<S: Scalar>(
    model: &ModelParams<S>,
    sft_projection: &VisualProjection<S>,
    pair: &ProjectionPair<S>,
    x: &[Token],
    v: &ImageFeature,
    config: &DecodeConfig,
) -> Result<TokenSequence> {
    let positive = match config.positive_path {
        PositivePath::SftProj => sft_projection,
        PositivePath::TrainedPosProj => &pair.positive,
    };
    let vis_w = encode_image(v, positive)?;
    let vis_l = encode_image(v, &pair.negative)?;
    decode_embeddings(model, x, &vis_w, Some(&vis_l), config, &Rng::new(0))
}

/// Contrasts `v` with the image of a different sample.
pub fn decode_other_image<S: Scalar>(
    model: &ModelParams<S>,
    proj: &VisualProjection<S>,
    x: &[Token],
    v: &ImageFeature,
    v_other: &ImageFeature,
    config: &DecodeConfig,
) -> Result<TokenSequence> {
    let vis_w = encode_image(v, proj)?;
    let vis_l = encode_image(v_other, proj)?;
    decode_embeddings(model, x, &vis_w, Some(&vis_l), config, &Rng::new(0))
}

/// What a decoder may see of an evaluation item.
#[derive(Debug, Clone, Copy)]
pub struct DecodeRequest<'a> {
    /// Stable per-item key (sample id) for seeding per-response noise.
    pub key: u64,
    pub x: &'a [Token],
    pub v: &'a ImageFeature,
    /// Image of another sample, for the other-image negative.
    pub other: &'a ImageFeature,
}

/// A response generator. Implementations never see the scene.
pub trait Decoder: Sync {
    fn decode(&self, request: &DecodeRequest<'_>) -> Result<TokenSequence>;
}

/// Model-backed decoder for any [`Strategy`].
#[derive(Debug, Clone)]
pub struct ModelDecoder<'a, S> {
    pub model: &'a ModelParams<S>,
    /// Projection for greedy, VCD and other-image; the SFT projection for DCD.
    pub projection: &'a VisualProjection<S>,
    /// Required for DCD.
    pub pair: Option<&'a ProjectionPair<S>>,
    pub config: DecodeConfig,
    pub seed: u64,
}

impl<S: Scalar> Decoder for ModelDecoder<'_, S> {
    fn decode(&self, r: &DecodeRequest<'_>) -> Result<TokenSequence> {
        let rng = Rng::new(self.seed).derive_indexed("response", r.key);
        match self.config.strategy {
            Strategy::Greedy => {
                let vis = encode_image(r.v, self.projection)?;
                decode_embeddings(self.model, r.x, &vis, None, &self.config, &rng)
            }
            Strategy::Vcd => decode_vcd(self.model, self.projection, r.x, r.v, &self.config, &rng),
            Strategy::OtherImage => {
                decode_other_image(self.model, self.projection, r.x, r.v, r.other, &self.config)
            }
            Strategy::Dcd => {
                let pair = self
                    .pair
                    .ok_or_else(|| Error::MissingDependency("DCD decoding needs a projection pair".into()))?;
                decode_dcd(self.model, self.projection, pair, r.x, r.v, &self.config)
            }
        }
    }
}

/// One decoded response as exported to JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub sample_id: u64,
    pub strategy: Strategy,
    pub alpha: f64,
    pub tokens: TokenSequence,
    pub text: String,
}

pub fn write_decode_records(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests;
