//! Command-line pipeline around the `karyo` library: synthetic cohort
//! generation, training, known-location measurement, combined detection,
//! agreement evaluation, and fully convolutional weight conversion.
//!
//! The command implementations live here (rather than in the binary) so
//! integration tests can drive the exact production paths.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{
    cmd_detect, cmd_evaluate, cmd_fcn_convert, cmd_measure, cmd_synth, cmd_train, TrainMode,
};
pub use config::{Profile, RunConfig};
