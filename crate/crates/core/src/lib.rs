//! Function-vector extraction, steering and logit-lens diagnostics for small
//! decoder-only transformers.

pub mod battery;
pub mod container;
pub mod error;
pub mod fixture;
pub mod fv;
pub mod lens;
pub mod model;
pub mod patching;
pub mod pipeline;
pub mod seed;
pub mod stats;
pub mod table;
pub mod transfer;

pub use error::{Error, Result};
