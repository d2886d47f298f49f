//! Risk-averting error criteria (RAE, NRAE, ANRAT), a small MLP with
//! weighted backpropagation, Hessian-based convexity probes and the
//! training harness built on them.

pub mod convexity;
pub mod criteria;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hexfloat;
pub mod network;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
