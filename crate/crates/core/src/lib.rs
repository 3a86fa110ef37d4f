#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bias;
pub mod cli;
pub mod dantzig;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod glm;
pub mod lasso;
pub mod linalg;
pub mod lipschitz;
pub mod normal;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
