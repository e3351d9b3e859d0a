//! Attack engines and their optimizer kernels.

pub mod kernels;
