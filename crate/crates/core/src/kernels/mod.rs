//! Slice-level compute kernels shared by the pure tensor ops and the tape.

pub mod attention;
pub mod conv;
pub mod gemm;
pub mod norm;
pub mod pointwise;
pub mod pool;
