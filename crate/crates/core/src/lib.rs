#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapter;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod numerics;
pub mod planner;
pub mod scenegen;
pub mod textenc;
pub mod trainer;
pub mod trajectory;
pub mod util;

pub use error::{Error, Result};
