//! Point attention for dense 6D pose estimation on point clouds.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`tensor`]), rigid-body geometry and ICP ([`geometry`]), the point
//! attention module ([`pam`]), dense pose regression and a classification
//! variant ([`posenet`]), ADD/ADD-S losses ([`losses`]), evaluation metrics
//! ([`metrics`]), synthetic data and file IO ([`data`]), and the training
//! and ablation harness ([`harness`]).

pub mod checkpoint;
pub mod data;
mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod pam;
pub mod par;
pub mod posenet;
pub mod tensor;

pub use error::{Error, Result};
