pub mod analysis;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use error::{HcnnError, Result};
pub use tensor::{BoundaryMode, Element, Tensor};
