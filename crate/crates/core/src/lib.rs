// `!(x > 0)` also rejects NaN, which is the point at every use.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cost;
pub mod error;
pub mod gao;
pub mod local;
pub mod reference;
pub mod ring_reference;
pub mod rng;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
