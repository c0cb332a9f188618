//! Transformer detectors for missing-sentence and discordant-sentence
//! detection, in sentence mode (over precomputed sentence embeddings) and
//! token mode (over a flat `[CLS]`/`[SEP]` token sequence).

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod train;
pub mod vocab;

pub use config::{InputMode, TransformerConfig};
pub use data::{Example, Featurizer};
pub use error::{DetectorError, Result};
pub use model::{DetectorModel, ModelInput};
pub use scalar::Scalar;
pub use train::{train, TrainConfig};
pub use vocab::Vocab;
