#![no_std]
extern crate alloc;

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{kurtosis, matmul, sparsity_of, Matrix, Real, Vector};
pub mod codec;
pub use codec::{BitmaskBlock, BlockLayout, Dtype, FootprintReport, SparseMatrix};
pub mod kernels;
pub use kernels::FlopCounter;
pub mod compress;
pub mod data;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod runtime;
pub mod bench;
pub mod train;
