//! Transform-invariant low-rank texture recovery.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod experiments;
pub mod imaging;
pub mod inner;
pub mod linalg;
pub mod outer;
pub mod projector;
pub mod svd_warm;
pub mod transform;

pub use error::{Result, TiltError};
