// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod decompose;
pub mod dgp;
pub mod error;
pub mod experiment;
pub mod methods;
pub mod nn;
pub mod report;

pub use error::{Error, Result};
