pub mod conjugate;
pub mod equilibrium;
pub mod error;
pub mod json;
mod kink;
pub mod optim;
pub mod oracle;
pub mod scenario;
pub mod solver;
pub mod utility;

pub use error::{Error, Result};
