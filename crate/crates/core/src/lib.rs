//! Finite-buffer network stability toolkit.
//!
//! Networks are modelled as ODE systems driven by smooth local transmission
//! policies. The crate simulates the queue dynamics, evaluates Jacobian-based
//! stability conditions, searches for equilibria and certifies their existence
//! with sampled Poincaré–Miranda boxes, and evaluates closed-form admissible
//! arrival ranges for one-hop shared-buffer systems.
//!
//! Every numerical routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`.

pub mod casestudy;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod network;
pub mod policy;
pub mod scalar;
pub mod stability;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network = network::NetworkInstance<f64>;
pub type Policy = policy::Policy<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type Network32 = network::NetworkInstance<f32>;
pub type Policy32 = policy::Policy<f32>;
