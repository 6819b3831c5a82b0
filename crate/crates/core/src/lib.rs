//! Desk-scale sparse mixture-of-experts algorithms.
//!
//! Everything here is sized for a laptop: tensors are flat `f64` buffers,
//! autodiff is a recorded op tape, and parallelism is a cost model rather
//! than actual communication. The point is to make routing, auxiliary
//! losses, and numeric-format behavior observable and testable, not fast.

pub mod graph;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod ops;
pub mod precision;
pub mod routing;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
