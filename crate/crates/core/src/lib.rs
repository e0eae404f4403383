//! Dynamic sparse training for small transformer encoders.
//!
//! The training objective adds two topology-driven penalties to the task
//! loss: a degree-weighted L1 term on the feed-forward matrices and a
//! row-group `l1^0.5` term on the concatenated attention projections. After
//! every epoch, attention heads whose parameter blocks are close in `l∞`
//! are merged into a dominating head and removed.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod headprune;
pub mod model;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
