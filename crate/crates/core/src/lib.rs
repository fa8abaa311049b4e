//! Multi-prompt fooling images for contrastive image-text scorers, and a
//! grayscale-sensitivity detector for them.
//!
//! The crate is organised bottom-up:
//!
//! * [`embedding`]: image/text encoder backends, preprocessing, grayscale
//!   conversion and the cosine score.
//! * [`losses`]: alignment, variance and pixel-guard losses with their
//!   analytic gradients.
//! * [`forge`]: the momentum-SGD forging loop, the master-image check,
//!   bound sweeps and ablations.
//! * [`detect`]: grayscale sensitivity, the dual-threshold rule, calibration
//!   and confusion matrices.
//! * [`harness`]: experiment configs, run directories and CSV/JSON emission
//!   behind the `masterimg` CLI.

pub mod detect;
pub mod embedding;
pub mod error;
pub mod forge;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod rng;

pub use error::{Error, Result};
