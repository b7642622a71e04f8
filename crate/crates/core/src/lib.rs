//! Context-dependent convolutional matching of phrase pairs.
//!
//! A source sentence with one phrase tagged and a candidate target phrase
//! are encoded by gated convolutional stacks, compared by an MLP, and
//! trained with a ranking hinge loss over easy, medium and difficult
//! negatives. Bilingual word embeddings for initialization are pretrained
//! from word alignments and local context windows.
//!
//! Everything numeric is generic over [`Scalar`]; [`Cdcm64`] and [`Cdcm32`]
//! are the usual instantiations.

pub mod convnet;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod linalg;
pub mod matcher;
pub mod model;
mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use corpus::{AlignedSentencePair, ContextualExample, CurriculumPools, Difficulty, PhraseTable, Span, TrainingTriple};
pub use embeddings::{BilingualEmbeddings, EmbeddingTable, Vocabulary};
pub use model::{Cdcm, MatchingModel, ModelConfig};
pub use trainer::{GradientSet, TrainConfig};

pub type Cdcm64 = Cdcm<f64>;
pub type Cdcm32 = Cdcm<f32>;
pub type MatchingModel64 = MatchingModel<f64>;
pub type MatchingModel32 = MatchingModel<f32>;
pub type EmbeddingTable64 = EmbeddingTable<f64>;
pub type EmbeddingTable32 = EmbeddingTable<f32>;
pub type GradientSet64 = GradientSet<f64>;
