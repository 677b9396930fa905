//! Black-box prompt optimization: a frozen model is reached only through
//! forward passes, and prompts are searched in a random low-dimensional
//! subspace with CMA-ES followed by a simplex trust-region refinement.

pub mod bench;
pub mod cmaes;
pub mod cobyla;
pub mod config;
pub mod corpus;
pub mod error;
pub mod initseek;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod scheduler;
pub mod subspace;
pub mod task;
pub mod verbalizer;

pub use error::{Error, OracleError, Result};
