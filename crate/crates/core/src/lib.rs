//! Atomic sub-problems for NLI and defeasible NLI.

pub mod agreement;
pub mod backends;
pub mod decomposer;
pub mod defeasible;
pub mod error;
pub mod grouping;
pub mod model;
pub mod nli;
pub mod prompts;
pub mod validator;

pub use error::{Error, Result};
