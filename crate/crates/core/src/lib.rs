//! Hamiltonian identification from noisy trajectories.
//!
//! A scalar Hamiltonian is parameterized as a small tanh network. Its
//! canonical flow is integrated with the implicit midpoint rule (explicit
//! predictor followed by fixed-point iteration), and training gradients come
//! from the adjoint system integrated backward with the same rule, so memory
//! stays constant in the rollout length.
//!
//! Module map:
//!
//! - [`model`]: the network Hamiltonian, its state derivatives, Hessian blocks
//!   and parameter pullbacks, plus checkpoint files.
//! - [`integrators`]: partitioned Runge–Kutta tableaux, the symplecticity
//!   check, implicit midpoint, symplectic Euler and the Gauss–Legendre
//!   reference solver.
//! - [`adjoint`]: the backward costate solve with in-place gradient
//!   accumulation, and a taped backprop-through-solver baseline.
//! - [`systems`]: closed-form benchmark Hamiltonians.
//! - [`data`]: dataset generation, storage and minibatch sampling.
//! - [`train`]: loss, optimizer, training loop and evaluation.
//! - [`profile`]: memory/runtime comparison of the two gradient engines.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod data;
mod error;
pub mod integrators;
pub mod memory;
pub mod model;
mod phase;
pub mod profile;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
pub use phase::{
    AdjointState, Coords, Hamiltonian, HamiltonianField, PhasePoint, StateGradient, VectorField,
};

/// Sizes the global worker pool used for batch and dataset parallelism.
/// Call once, before any parallel work.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidConfig("threads must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(())
}
