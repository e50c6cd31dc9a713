//! Semantic-shift fusion head for composed image retrieval.
//!
//! The crate operates on precomputed token-level features. A text modifier is
//! split by learned per-token gates into an upgrading part and a degrading
//! part; the degrading part gates the reference image into a visual prototype;
//! the prototype and the upgrading text are fused by a one-layer transformer
//! encoder and combined with the global features into the query embedding.
//!
//! Module map:
//! - [`numerics`]: tensors and the reverse-mode tape used for training
//! - [`datamodel`]: feature store, SSNF file format, synthetic fixtures
//! - [`decompose`]: text and image gating
//! - [`compose`]: modality embeddings, fusion, pooling, combiner, full forward
//! - [`losses`]: batch contrastive loss and the KL regularizer
//! - [`trainer`]: AdamW loop, step schedule, checkpoints
//! - [`retrieval`]: gallery index, ranking, recall metrics, sensitivity probe
//! - [`heatmap`]: image-gate grids as PGM files

pub mod compose;
pub mod datamodel;
pub mod decompose;
pub mod error;
pub mod heatmap;
pub mod losses;
pub mod numerics;
pub mod retrieval;
pub mod trainer;

pub use compose::{ComposedQuery, ModelConfig, SsnParameters, Variant};
pub use datamodel::{FeatureStore, Role, Split, TokenFeatures, Triplet};
pub use decompose::{DecomposedText, GateVector, VisualPrototype};
pub use error::{Result, SsnError};
pub use numerics::{Scalar, Tape, Tensor, Var};
pub use retrieval::{GalleryIndex, RankedList, RecallReport};
pub use trainer::{Checkpoint, TrainConfig};
