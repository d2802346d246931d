//! Dynamic fixed point (DFP) tensors, blocked INT16 kernels with INT32
//! accumulation, and mixed-precision training built on them.

pub mod arith;
pub mod dft1;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{DfpError, Result};
