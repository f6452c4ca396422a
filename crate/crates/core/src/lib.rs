#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod census;
pub mod cli;
pub mod closed_form;
pub mod dgm;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod glmm;
pub mod quadrature;
pub mod randomization;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
