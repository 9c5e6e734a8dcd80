//! Segmentation-free nuclear area measurement.
//!
//! The crate trains a small convolutional classifier to predict the
//! area-histogram bin of the nucleus at the center of an image patch and
//! reconstructs continuous areas as probability-weighted bin centroids. A
//! 21st background class turns the same network into a detector once the
//! fully connected layers are converted to convolutions and the network is
//! applied densely with shift-and-stitch. A synthetic cohort generator
//! provides histology-like images with exact ground truth.

pub mod augment;
pub mod binning;
pub mod detect;
pub mod error;
pub mod image;
pub mod network;
pub mod ops;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use binning::{px_to_um2, AreaBinning, AreaMeasurement, MeasurementSource, RegionStats};
pub use error::{Error, Result};
pub use network::{ArchitectureConfig, Network, NetworkParams};
pub use report::{agreement_stats, AgreementStats};

pub use ops::Mode;
pub use tensor::{Scalar, Tensor};
