//! Desk-scale laboratory for debiasing conditional GANs with FICS:
//! fairness intervention at training time plus corrective (rejection)
//! sampling at generation time, over synthetic datasets with exact
//! attribute oracles.

pub mod adam;
pub mod cs;
pub mod data;
pub mod error;
pub mod eval;
pub mod fi;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod persist;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{FicsError, Result};
pub use tensor::Tensor;
