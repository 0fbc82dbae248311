//! Building blocks for studying how gradient attributions shift under
//! adversarial perturbation: a small dense-tensor type, a from-scratch
//! feedforward classifier, iterative sign attacks, integrated-gradients
//! attributions, and binary detectors trained on attribution descriptors.

pub mod attack;
pub mod attribution;
pub mod data;
pub mod detector;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
