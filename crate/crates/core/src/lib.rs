pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod forest;
pub mod hermitian;
pub mod mds;
pub mod model;
pub mod proximity;
pub mod seed;

mod codec;

pub use error::{QcmlError, Result};
