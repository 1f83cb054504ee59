//! Expert-calibrated fine-grained classification: CAM-guided masking of a
//! frozen expert encoder plus uncertainty-driven logit fusion.

pub mod backbone;
pub mod data;
pub mod error;
pub mod expert;
pub mod harness;
pub mod loss;
pub mod lpkem;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod udcm;

pub use error::{Error, Result};
