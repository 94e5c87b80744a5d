//! Hand-written layers with explicit forward traces and backward passes.
//!
//! Every layer works on `f64` so the same code path serves training and the
//! finite-difference gradient checks.

pub mod act;
pub mod conv;
pub mod dense;
pub mod init;
pub mod pool;
pub mod upsample;

pub use conv::{Conv2d, TransposedConv2d};
pub use dense::Dense;
