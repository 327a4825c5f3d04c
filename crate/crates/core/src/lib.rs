#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datasets;
pub mod detectors;
pub mod dual;
pub mod erm;
pub mod error;
pub mod exec;
pub mod gda;
pub mod harness;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tolerances;
pub mod transform;
pub mod verify;

pub use error::{Error, Result};
