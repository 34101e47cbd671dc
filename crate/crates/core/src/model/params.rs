use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, ProjectionKind};
use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Image feature vector `v` as produced by the synthetic renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageFeature(pub Vec<f64>);

impl ImageFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_array<S: Scalar>(&self) -> Array<S> {
        Array::from_vec(vec![1, self.0.len()], self.0.iter().map(|&x| S::of(x)).collect())
            .expect("row vector")
    }
}

/// Anything that owns trainable tensors in a fixed, named order.
pub trait ParamSet<S: Scalar> {
    fn named_tensors(&self) -> Vec<(String, &Array<S>)>;

    /// Same order as [`ParamSet::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Array<S>>;

    fn tensors(&self) -> Vec<&Array<S>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over shapes and exact bit patterns, hex encoded.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for x in t.data() {
                hasher.update(x.widen().to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Bitwise equality of every tensor.
    fn bits_eq(&self, other: &Self) -> bool
    where
        Self: Sized,
    {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }
}

/// `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Linear<S> {
    pub weight: Array<S>,
    pub bias: Array<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(input: usize, output: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Array::randn(&[input, output], std, rng),
            bias: Array::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array::zeros(&[input, output]),
            bias: Array::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: tape.param(&self.weight, trainable),
            bias: tape.param(&self.bias, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }

    fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Pre-norm transformer block: causal self-attention then a GELU MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Block<S> {
    pub attn_norm_gain: Array<S>,
    pub attn_norm_bias: Array<S>,
    pub query: Linear<S>,
    pub key: Linear<S>,
    pub value: Linear<S>,
    pub output: Linear<S>,
    pub mlp_norm_gain: Array<S>,
    pub mlp_norm_bias: Array<S>,
    pub mlp_in: Linear<S>,
    pub mlp_out: Linear<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub query: BoundLinear,
    pub key: BoundLinear,
    pub value: BoundLinear,
    pub output: BoundLinear,
    pub mlp_norm_gain: Var,
    pub mlp_norm_bias: Var,
    pub mlp_in: BoundLinear,
    pub mlp_out: BoundLinear,
}

impl<S: Scalar> Block<S> {
    fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, h, std) = (config.d_model, config.mlp_hidden, config.init_std);
        Self {
            attn_norm_gain: Array::full(&[d], S::one()),
            attn_norm_bias: Array::zeros(&[d]),
            query: Linear::init(d, d, std, rng),
            key: Linear::init(d, d, std, rng),
            value: Linear::init(d, d, std, rng),
            output: Linear::init(d, d, std, rng),
            mlp_norm_gain: Array::full(&[d], S::one()),
            mlp_norm_bias: Array::zeros(&[d]),
            mlp_in: Linear::init(d, h, std, rng),
            mlp_out: Linear::init(h, d, std, rng),
        }
    }

    fn zeros(config: &ModelConfig) -> Self {
        let (d, h) = (config.d_model, config.mlp_hidden);
        Self {
            attn_norm_gain: Array::zeros(&[d]),
            attn_norm_bias: Array::zeros(&[d]),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            mlp_norm_gain: Array::zeros(&[d]),
            mlp_norm_bias: Array::zeros(&[d]),
            mlp_in: Linear::zeros(d, h),
            mlp_out: Linear::zeros(h, d),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array<S>)>) {
        let mut push = |n: &str, a: &'a Array<S>| out.push((format!("{prefix}.{n}"), a));
        push("attn_norm.gain", &self.attn_norm_gain);
        push("attn_norm.bias", &self.attn_norm_bias);
        for (n, l) in [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ] {
            push(&format!("{n}.weight"), &l.weight);
            push(&format!("{n}.bias"), &l.bias);
        }
        push("mlp_norm.gain", &self.mlp_norm_gain);
        push("mlp_norm.bias", &self.mlp_norm_bias);
        push("mlp_in.weight", &self.mlp_in.weight);
        push("mlp_in.bias", &self.mlp_in.bias);
        push("mlp_out.weight", &self.mlp_out.weight);
        push("mlp_out.bias", &self.mlp_out.bias);
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array<S>> {
        vec![
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
            &mut self.output.weight,
            &mut self.output.bias,
            &mut self.mlp_norm_gain,
            &mut self.mlp_norm_bias,
            &mut self.mlp_in.weight,
            &mut self.mlp_in.bias,
            &mut self.mlp_out.weight,
            &mut self.mlp_out.bias,
        ]
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, trainable: bool) -> BoundBlock {
        BoundBlock {
            attn_norm_gain: tape.param(&self.attn_norm_gain, trainable),
            attn_norm_bias: tape.param(&self.attn_norm_bias, trainable),
            query: self.query.bind(tape, trainable),
            key: self.key.bind(tape, trainable),
            value: self.value.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
            mlp_norm_gain: tape.param(&self.mlp_norm_gain, trainable),
            mlp_norm_bias: tape.param(&self.mlp_norm_bias, trainable),
            mlp_in: self.mlp_in.bind(tape, trainable),
            mlp_out: self.mlp_out.bind(tape, trainable),
        }
    }
}

impl BoundBlock {
    fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.attn_norm_gain);
        out.push(self.attn_norm_bias);
        for l in [self.query, self.key, self.value, self.output] {
            out.extend(l.vars());
        }
        out.push(self.mlp_norm_gain);
        out.push(self.mlp_norm_bias);
        out.extend(self.mlp_in.vars());
        out.extend(self.mlp_out.vars());
    }
}

/// Language-model weights θ: token and position embeddings, transformer
/// blocks, final layer norm and LM head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub token_embedding: Array<S>,
    pub position_embedding: Array<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm_gain: Array<S>,
    pub final_norm_bias: Array<S>,
    pub lm_head: Linear<S>,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_norm_gain: Var,
    pub final_norm_bias: Var,
    pub lm_head: BoundLinear,
}

impl BoundModel {
    /// Leaf handles in [`ParamSet::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            b.vars(&mut out);
        }
        out.push(self.final_norm_gain);
        out.push(self.final_norm_bias);
        out.extend(self.lm_head.vars());
        out
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Scaled-Gaussian initialization; layer-norm gains start at one and all
    /// biases at zero.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, std) = (config.vocab_size, config.d_model, config.init_std);
        let token_embedding = Array::randn(&[v, d], std, rng);
        let position_embedding = Array::randn(&[config.max_context, d], std, rng);
        let blocks = (0..config.layers).map(|_| Block::init(config, rng)).collect();
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
            final_norm_gain: Array::full(&[d], S::one()),
            final_norm_bias: Array::zeros(&[d]),
            lm_head: Linear::init(d, v, std, rng),
        })
    }

    /// All-zero skeleton with the right shapes, used when loading.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        Ok(Self {
            config: config.clone(),
            token_embedding: Array::zeros(&[v, d]),
            position_embedding: Array::zeros(&[config.max_context, d]),
            blocks: (0..config.layers).map(|_| Block::zeros(config)).collect(),
            final_norm_gain: Array::zeros(&[d]),
            final_norm_bias: Array::zeros(&[d]),
            lm_head: Linear::zeros(d, v),
        })
    }

    /// Deep, independent copy used as the frozen reference policy.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, trainable: bool) -> BoundModel {
        BoundModel {
            token_embedding: tape.param(&self.token_embedding, trainable),
            position_embedding: tape.param(&self.position_embedding, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            final_norm_gain: tape.param(&self.final_norm_gain, trainable),
            final_norm_bias: tape.param(&self.final_norm_bias, trainable),
            lm_head: self.lm_head.bind(tape, trainable),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let mut out = ModelParams::<T>::zeros(&self.config).expect("validated config");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

impl<S: Scalar> ParamSet<S> for ModelParams<S> {
    fn named_tensors(&self) -> Vec<(String, &Array<S>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("blocks.{i}"), &mut out);
        }
        out.push(("final_norm.gain".into(), &self.final_norm_gain));
        out.push(("final_norm.bias".into(), &self.final_norm_bias));
        out.push(("lm_head.weight".into(), &self.lm_head.weight));
        out.push(("lm_head.bias".into(), &self.lm_head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array<S>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out.push(&mut self.lm_head.weight);
        out.push(&mut self.lm_head.bias);
        out
    }
}

/// Maps an image feature to `visual_tokens × d_model` prefix embeddings.
/// One layer is a linear map; two layers put a GELU between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct VisualProjection<S> {
    pub visual_tokens: usize,
    pub d_model: usize,
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> VisualProjection<S> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let out = config.visual_tokens * config.d_model;
        let std = config.init_std;
        let layers = match config.projection {
            ProjectionKind::Mlp => vec![
                Linear::init(config.image_dim, config.projection_hidden, std, rng),
                Linear::init(config.projection_hidden, out, std, rng),
            ],
            ProjectionKind::Linear => vec![Linear::init(config.image_dim, out, std, rng)],
        };
        Self {
            visual_tokens: config.visual_tokens,
            d_model: config.d_model,
            layers,
        }
    }

    /// Zero-weight projection with the given layer widths.
    pub fn zeros(visual_tokens: usize, d_model: usize, widths: &[usize]) -> Self {
        let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self {
            visual_tokens,
            d_model,
            layers,
        }
    }

    /// Input width followed by every layer's output width.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.image_dim()];
        w.extend(self.layers.iter().map(|l| l.output_dim()));
        w
    }

    pub fn image_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim())
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, trainable: bool) -> BoundProjection {
        BoundProjection {
            visual_tokens: self.visual_tokens,
            d_model: self.d_model,
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> VisualProjection<T> {
        VisualProjection {
            visual_tokens: self.visual_tokens,
            d_model: self.d_model,
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

impl<S: Scalar> ParamSet<S> for VisualProjection<S> {
    fn named_tensors(&self) -> Vec<(String, &Array<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), &l.weight));
            out.push((format!("layers.{i}.bias"), &l.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array<S>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BoundProjection {
    pub visual_tokens: usize,
    pub d_model: usize,
    pub layers: Vec<BoundLinear>,
}

impl BoundProjection {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }

    /// `visual_tokens × d_model` embedding of a `1×image_dim` input.
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<'_, S>, image: Var) -> Result<Var> {
        let expected = tape.value(self.layers[0].weight).shape()[0];
        let got = tape.value(image).len();
        if got != expected {
            return Err(Error::Dimension {
                what: "image feature",
                expected,
                got,
            });
        }
        let mut h = image;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            h = layer.apply(tape, h)?;
        }
        tape.reshape(h, &[self.visual_tokens, self.d_model])
    }
}

/// Positive (ψ) and negative (φ) projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct ProjectionPair<S> {
    pub positive: VisualProjection<S>,
    pub negative: VisualProjection<S>,
}

impl<S: Scalar> ProjectionPair<S> {
    /// Both sides start as bitwise copies of `source`.
    pub fn identical(source: &VisualProjection<S>) -> Self {
        Self {
            positive: source.clone(),
            negative: source.clone(),
        }
    }
}

/// `visual_tokens × d_model` prefix produced by a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding<S>(pub Array<S>);

impl<S: Scalar> VisualEmbedding<S> {
    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Language model θ together with the projection that feeds it.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<S> {
    pub model: ModelParams<S>,
    pub projection: VisualProjection<S>,
}

impl<S: Scalar> Policy<S> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let model = ModelParams::init(config, &mut rng.derive("model"))?;
        let projection = VisualProjection::init(config, &mut rng.derive("projection"));
        Ok(Self { model, projection })
    }

    /// Deep copy used as the frozen reference policy.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }
}
