//! Unsupervised domain adaptation for semantic segmentation.
//!
//! The crate bundles a small dense layer library ([`nn`]), dataset handling
//! and a procedural two-domain benchmark ([`datamodel`]), the multi-scale
//! segmentation network ([`model`]), the self-training engine ([`uda`]),
//! evaluation ([`eval`]) and experiment orchestration ([`harness`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datamodel;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod uda;

pub use error::{Error, Result};
