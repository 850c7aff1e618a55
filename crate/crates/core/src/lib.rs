//! Simulation and difference imaging of piezoresistive inclusions in a
//! circular electrical impedance tomography phantom.
//!
//! The pipeline runs bottom-up through the modules:
//!
//! - [`mesh`]: structured triangular disk meshes with boundary electrodes.
//! - [`forward`]: complete electrode model assembly and solve, measurement
//!   protocols.
//! - [`sensitivity`]: adjoint Jacobian of protocol voltages with respect to
//!   element conductivity.
//! - [`inverse`]: one-step linearised reconstruction with a graph Laplacian
//!   prior and an optional non-positivity constraint.
//! - [`material`]: percolation, piezoresistive and equivalent-circuit models
//!   of the conductive cement, including impedance spectrum fitting.
//! - [`phantom`]: tank conductivity fields, load/failure scenarios and noisy
//!   synthetic measurements.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forward;
pub mod inverse;
pub mod material;
pub mod mesh;
pub mod phantom;
pub mod sensitivity;

pub use error::{Error, Result};
