//! Simulation and quasi-likelihood EM estimation for a one-dimensional
//! OU-type process with Markov-switching drift and normal inverse Gaussian
//! noise.
//!
//! The pieces, bottom-up:
//!
//! * [`nig`]: NIG densities, sampling and the small-time Cauchy limit.
//! * [`ctmc`]: generator matrices and the discretized regime chain.
//! * [`sim`]: Euler simulation on a fine grid, thinned to observations.
//! * [`quasi_likelihood`]: the Cauchy quasi-likelihood objective and its derivatives.
//! * [`smoother`]: forward filter and approximate pairwise backward smoother.
//! * [`em`]: the modified EM iteration.
//! * [`experiment`]: replicated fits, CSV/JSON output and the CLI plumbing.

pub mod config;
pub mod ctmc;
pub mod em;
pub mod error;
pub mod experiment;
pub mod io;
pub mod nig;
pub mod numeric;
pub mod quasi_likelihood;
pub mod sim;
pub mod smoother;
pub mod special;

pub use error::{Error, Result};
