//! Audio-visual feature fusion for deepfake detection.
//!
//! The pipeline has two stages. Stage 1 learns a joint audio-visual
//! representation from real clips only: paired log-mel and frame-stack
//! inputs are tokenized, encoded by per-modality transformers, aligned
//! with a contrastive objective, and reconstructed through complementary
//! slice masking where each modality's hidden slices are filled in from
//! the other modality. Stage 2 freezes nothing: it reuses the encoders
//! and cross-modal translators as a feature extractor and trains a small
//! classifier head on real/fake labels.
//!
//! Crate layout:
//! - [`config`]: run configuration, derived geometry, presets.
//! - [`tensor`]: a small reverse-mode autodiff tape over `ndarray`,
//!   generic over f32/f64.
//! - [`tokenizer`]: patch embedding front-ends (pure reshapes).
//! - [`masking`]: complementary slice masks and fusion plans.
//! - [`data`]: tensor/manifest file formats, log-mel extraction, clip
//!   sampling, batch assembly, and the synthetic benchmark corpus.
//! - [`backbone`]: parameter store, encoder/decoder/translator/critic/
//!   classifier graph builders, checkpoint IO.
//! - [`losses`]: contrastive, reconstruction, adversarial, and
//!   classification objectives.
//! - [`training`]: AdamW, LR schedules, stage steps, the training loop.
//! - [`eval`]: windowed inference, ranking metrics, evaluation
//!   protocols, audio perturbations, embedding export.

pub mod backbone;
pub mod config;
pub mod data;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod tensor;
pub mod tokenizer;
pub mod training;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
