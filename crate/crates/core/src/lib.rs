//! Active preference learning with neural reward models.
//!
//! A reward network is trained on pairwise preferences, a Laplace posterior is
//! placed over its linear head, and duels are chosen by dueling Thompson
//! sampling. A preferential Gaussian-process optimizer serves as baseline, and
//! the [`harness`] module runs both against benchmark oracles.

pub mod acquisition;
pub mod api;
pub mod discrete;
pub mod error;
pub mod gp;
pub mod harness;
pub mod laplace;
pub mod math;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod reward;

pub use error::{Error, Result};
