//! Affect-aware spoken dialogue response generation at desk scale.
//!
//! The pipeline runs from waveforms to mel features, through turn-level and
//! dialogue-level attention over speech, a strided convolutional adapter,
//! speech-guided cross-modal attention over the text history, and a small
//! causal decoder trained jointly on a text path and a speech path. A
//! separate controller maps the dialogue's energy trend to a response style.

pub mod affect_context;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod fusion_gen;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth_control;
pub mod tensor;

pub use error::{Error, Result};
