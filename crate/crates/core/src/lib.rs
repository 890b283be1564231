//! Post-hoc calibration for binary segmentation with per-pixel temperatures.
//!
//! A small convolutional network predicts a temperature map from the image,
//! the segmentation logits and their globally temperature-scaled
//! probability and entropy. It is trained only on pixels that are labelled
//! or predicted as foreground, and at inference its temperatures are used
//! on predicted foreground while the global temperature is kept elsewhere.
//! Thresholding is unaffected by any positive temperature, so predictions
//! never change.
//!
//! The crate also provides the calibration metrics (ECE, MCE, SCE, ACE), a
//! tensor file container, and a synthetic data generator with known correct
//! temperatures.

pub mod calib;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod record;
pub mod tensor;
pub mod ts;

pub use error::{Error, Result};
