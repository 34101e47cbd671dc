//! The toy multimodal language model: a visual projection feeding a small
//! causal transformer.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, ProjectionKind};
pub use forward::{
    encode_image, forward_logits, response_nll, sequence_log_prob, sequence_log_prob_with,
    transformer_logits, visual_on_tape, Token, TokenSequence,
};
pub use params::{
    Block, BoundBlock, BoundLinear, BoundModel, BoundProjection, ImageFeature, Linear,
    ModelParams, ParamSet, Policy, ProjectionPair, VisualEmbedding, VisualProjection,
};

#[cfg(test)]
mod tests;
