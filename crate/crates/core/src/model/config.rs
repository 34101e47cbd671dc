use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How image features are mapped to visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// `Linear -> GELU -> Linear`, the LLaVA-1.5 projector shape.
    Mlp,
    Linear,
}

/// Dimensions of the toy multimodal model. Defaults are a desk-scale choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub visual_tokens: usize,
    pub image_dim: usize,
    pub max_context: usize,
    pub projection: ProjectionKind,
    pub projection_hidden: usize,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 256,
            visual_tokens: 4,
            image_dim: 16,
            max_context: 64,
            projection: ProjectionKind::Mlp,
            projection_hidden: 64,
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 4 {
            return fail(format!("model.vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 {
            return fail("model.d_model, model.layers and model.heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.visual_tokens == 0 || self.image_dim == 0 || self.mlp_hidden == 0 {
            return fail(
                "model.visual_tokens, model.image_dim and model.mlp_hidden must be positive".into(),
            );
        }
        if self.max_context <= self.visual_tokens {
            return fail(format!(
                "model.max_context ({}) must exceed model.visual_tokens ({})",
                self.max_context, self.visual_tokens
            ));
        }
        if self.projection == ProjectionKind::Mlp && self.projection_hidden == 0 {
            return fail("model.projection_hidden must be positive for an mlp projection".into());
        }
        if !(self.init_std >= 0.0) || !(self.layer_norm_eps > 0.0) {
            return fail("model.init_std must be >= 0 and model.layer_norm_eps > 0".into());
        }
        Ok(())
    }
}
