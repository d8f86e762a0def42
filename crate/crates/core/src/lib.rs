//! Semantic masked autoencoding for point clouds.
//!
//! Tokens come from farthest-point-sampled patches embedded by a
//! mini-PointNet. A bank of learnable prototypes attends over the encoded
//! tokens of the complete cloud, groups tokens into components, and drives
//! a masking strategy that hides whole components before the usual masked
//! reconstruction. The same prototypes are reused as prompts when
//! fine-tuning a classifier.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod masking;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod pcsm;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{Error, Result};
