//! The synthetic vision-language universe: object scenes, rendered image
//! features, templated questions and procedurally hallucinated negatives.

mod dataset;
mod sample;
mod scene;
pub mod vocab;

pub use dataset::{build_dataset, Dataset, DatasetConfig, Manifest, Split, TaskMix};
pub use sample::{examples, Example, HallucinationPolicy, ObjectMentions, PreferenceSample, TaskKind, World};
pub use scene::{Catalog, Scene};
pub use vocab::Vocabulary;
