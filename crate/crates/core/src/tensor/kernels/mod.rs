//! Raw compute kernels over contiguous NCHW buffers.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod shuffle;
