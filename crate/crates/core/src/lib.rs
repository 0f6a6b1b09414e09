//! Meta-learned instance-adaptive Tsallis entropy minimization for
//! unsupervised domain adaptation of a linear text classifier.

pub mod cli;
pub mod data;
pub mod error;
pub mod meta;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod tsallis;

pub use error::{MtemError, Result};
