//! Disarranged-zone learning.
//!
//! Scores contrast-flow video clips by how well a small sequence model can
//! spot temporally displaced frames. The pipeline: dense optical flow over
//! the clip, a high-variance "effective zone" picked from the flow field,
//! a seeded frame shuffle, and a GRU encoder-decoder trained to flag the
//! shuffled positions. Recovery accuracy on fresh shuffles is the score;
//! clips where the model cannot tell shuffled frames apart (stalled
//! contrast, little coherent motion) score low.
//!
//! Modules mirror the pipeline stages: [`video_io`] for clip formats,
//! [`optical_flow`] for the flow kernels, [`zone`] for effective-point
//! selection and features, [`disarrange`] for shuffles and order
//! diagnostics, [`model`] for the GRU and its training loop, [`scoring`]
//! for the end score, [`metrics`] for ROC/AUC/AP, and [`synth`] for the
//! synthetic contrast-injection corpus used in tests and demos.

pub mod disarrange;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optical_flow;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod video_io;
pub mod zone;

pub use error::{Error, Result};
