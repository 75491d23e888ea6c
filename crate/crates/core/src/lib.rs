//! Neuroevolution versus gradient descent on small tanh networks.
//!
//! * [`model`]: architectures, the sine-fitting loss and exact gradients.
//! * [`dynamics`]: Metropolis mutation steps, plain/clipped gradient descent
//!   and the two Langevin steppers.
//! * [`ensemble`]: trajectories, ensembles on a shared scaled-time grid, the
//!   `Delta(t)` distance and the periodic-reset protocol.
//! * [`analysis`]: drift/diffusion estimation, Boltzmann stationarity,
//!   acceptance-rate limits and gradient checking.

pub mod analysis;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod model;

pub use error::{Error, Result};
