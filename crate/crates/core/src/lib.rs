//! Joint dereverberation and blind source separation in the STFT domain.
//!
//! The crate provides WPE dereverberation, ILRMA separation with IP or ISS
//! updates, and the unified-filter ILRMA-T family (IP, ISS-JOINT, ISS-SEQ),
//! together with a synthetic reverberant mixture generator, objective
//! metrics and a batch command-line front end.

pub mod cli;
pub mod config;
pub mod error;
pub mod ilrma_t;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nmf;
pub mod pipeline;
pub mod separation;
pub mod sim;
pub mod stft;
pub mod wav;
pub mod wpe;

pub use config::{AlgorithmVariant, ReferenceMode, RunConfig};
pub use error::{Error, Result};
pub use ilrma_t::{run, run_observed, CostTrace, FilterRule, RunOutput, Separator};
pub use model::{build_stacked, demix, extract_warev, ExtendedDemixer, StackedObservation, TapConfig};
pub use nmf::NmfVarianceModel;
pub use stft::{analyze, synthesize, Spectrogram, StftConfig};
