//! A desk-scale laboratory for decoupled contrastive decoding: a small
//! reverse-mode autodiff engine, a toy multimodal transformer, a synthetic
//! scene world with an exact hallucination oracle, preference training
//! stages, contrastive decoders and an evaluation harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common concrete instantiations.

pub mod autodiff;
pub mod decoding;
mod digest;
mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rng;
mod scalar;
pub mod training;
pub mod world;

pub use digest::sha256_hex;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Array64 = autodiff::Array<f64>;
pub type Array32 = autodiff::Array<f32>;
pub type Tape64<'a> = autodiff::Tape<'a, f64>;
pub type Tape32<'a> = autodiff::Tape<'a, f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type VisualProjection64 = model::VisualProjection<f64>;
pub type VisualProjection32 = model::VisualProjection<f32>;
pub type ProjectionPair64 = model::ProjectionPair<f64>;
pub type ProjectionPair32 = model::ProjectionPair<f32>;
pub type Policy64 = model::Policy<f64>;
pub type Policy32 = model::Policy<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
