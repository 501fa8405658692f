//! Slice-level forward/backward kernels shared by the layer types.
//!
//! Everything here is generic over [`Real`](crate::real::Real) so the same
//! code path can be checked in double precision.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
