// `!(x > 0.0)` guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod ssm;

pub use error::{Error, Result};
pub mod blocks;
pub mod fusion;
pub mod hierarchy;
pub mod nn;
pub mod pipeline;
pub mod survstats;
