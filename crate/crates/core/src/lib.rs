//! Detection core: EKF model, fixed-point circuit semantics, kernels,
//! commitments and the proof backend.

pub mod fixedpoint;
pub mod model;
pub mod stats;
pub mod commitments;
pub mod kernels;
pub mod proof;
pub mod wire;
