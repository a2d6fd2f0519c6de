//! Small, dependency-free optimization kernels shared by the solvers.

pub mod nelder_mead;
pub mod newton;
pub mod scalar;

pub use nelder_mead::{nelder_mead, NelderMeadOptions, NelderMeadResult};
pub use newton::{maximize_constrained, NewtonOptions, NewtonResult};
