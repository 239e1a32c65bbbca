//! Two-stage active learning (entropy filter, then agreement-diversity
//! refinement) driving semi-supervised co-training of two segmentation
//! networks on a synthetic ultrasound-like dataset.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pool;
pub mod sampler;
pub mod segnet;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
