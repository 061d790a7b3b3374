//! Concept-aware adversarial perturbations that disrupt hierarchical
//! geographic inference by multimodal reasoning models.
//!
//! The protection path is: plan a block grid matching the image's aspect
//! ratio, cut the image into encoder-sized blocks, assign each block the
//! annotated geographic concepts it overlaps, pick the bank embedding that is
//! furthest (minimax cosine) from all of them, decode that embedding into an
//! `ε`-bounded perturbation, and reassemble at the original resolution.

pub mod annotation;
pub mod concepts;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod tiling;
pub mod training;

pub use annotation::{AnnotationJob, Difficulty, MultimodalClient, ScriptedClient};
pub use concepts::{AnnotationFile, BBox, BlockConceptMap, ConceptAnnotation, Level};
pub use decoder::{Decoder, DecoderConfig};
pub use embedding::{EmbeddingBank, Encoder, PriorSelection, ToyEncoder, ToyEncoderSpec};
pub use error::{Error, Result};
pub use evaluation::{BenchmarkTable, Geocoder, Granularity, LocationCodes, PprResult, TargetModel};
pub use imaging::{ImageBuffer, PerturbationField};
pub use pipeline::{protect, ProtectReport, ProtectRequest};
pub use tiling::{plan_grid, BlockSet, GridSpec};
pub use training::{TrainConfig, TrainRecord};
