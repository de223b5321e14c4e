//! Fair sufficient representation learning.
//!
//! A representation `R(X)` is trained to carry the information in `X` about
//! a target `Y` while staying independent of a sensitive attribute `A`, with
//! distance covariance measuring both dependences and an energy distance
//! pulling `R(X)` toward a standard Gaussian. A classifier is then trained
//! on the frozen representation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod batch;
pub mod datagen;
pub mod dataio;
pub mod dependence;
pub mod downstream;
pub mod error;
pub mod experiment;
mod io;
pub mod matrix;
pub mod metrics;
pub mod mlp;
pub mod par;
pub mod representation;

pub use batch::{Column, SampleBatch};
pub use error::{Error, Result};
pub use matrix::SampleMatrix;
