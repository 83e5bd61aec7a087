//! Multi-modal object re-identification with spatial-frequency token
//! selection, hierarchical masked aggregation and background-aware losses.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: float64 tensors and a define-by-run gradient tape
//! - [`wavelet`]: multi-level 2-D Haar transform
//! - [`vit`]: shared vision transformer backbone
//! - [`sfts`]: spatial (attention rollout) and frequency (wavelet) token selection
//! - [`hma`]: masked per-modality and cross-modal aggregation
//! - [`losses`]: background consistency, object-centric refinement, CE and triplet
//! - [`data`]: synthetic tri-modal corpus, Netpbm I/O, augmentation, PK sampling
//! - [`eval`]: retrieval metrics and selection diagnostics
//! - [`train`]: optimizer, schedule, checkpoints and the training loop

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hma;
pub mod losses;
pub mod model;
pub mod sfts;
pub mod tensor;
pub mod train;
pub mod visualize;
pub mod vit;
pub mod wavelet;

pub use error::{Error, Result};
