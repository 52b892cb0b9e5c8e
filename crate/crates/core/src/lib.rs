//! Content- and style-conditioned creativity assessment for drawings.
//!
//! The pipeline scores a drawing by comparing its frozen image embedding
//! against learnable per-level text embeddings, after nudging the image
//! embedding with two lightweight conditioners: one driven by the drawing's
//! predicted content category, one by an ink-intensity style proxy. Only the
//! rating tokens and the two tuners train; the encoder pair stays frozen.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`dataset`]: manifests, annotations, rating normalization, the record
//!   store
//! * [`imaging`]: decode, inversion, channel statistics, resizing, ink
//!   intensity
//! * [`backbone`]: frozen encoder bundles (toy and exported weights)
//! * [`model`]: prompt banks, rating tokens, tuners, the scoring head
//! * [`training`]: losses, manual backward pass, Adam, the training loop
//! * [`evaluation`]: rank correlations and per-split reports
//! * [`analysis`]: style/rating correlation and binned summaries
//! * [`synthetic`]: deterministic synthetic datasets for tests and smoke
//!   runs

pub mod analysis;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod model;
pub mod synthetic;
pub mod training;
pub mod types;
pub mod util;

pub use error::{CscaError, Result};
pub use types::{
    AblationFlags, ContentLabel, CreativityLevel, DrawingRecord, RunConfig, Split,
};
