//! Particle-based numerics for measure-valued diffusions on the Wasserstein
//! space `P2` of square-integrable probability measures on `R^d`.
//!
//! The central object is an SDE whose coefficients depend on the pushforward
//! of the full initial measure under the solution flow,
//!
//! ```text
//! dX_t = b(t, X_t, L_t) dt + sigma(t, X_t, L_t) dW_t,   L_t = mu o (X_t^.)^{-1},
//! ```
//!
//! driven by a single Brownian path shared by every initial point (common
//! noise), so the pushforward measure `L_t` is itself a diffusion on `P2`.
//! Measures are represented as equal-weight particle ensembles, for which the
//! pushforward is exactly computable.
//!
//! Modules map closely onto the moving parts of that construction:
//!
//! - [`measures`]: particle ensembles and the measure operations everything
//!   else consumes (pushforward, perturbation, moments).
//! - [`wasserstein`]: exact W2 distances and optimal couplings between
//!   equal-size ensembles, with a brute-force oracle.
//! - [`coefficients`]: the drift/diffusion interface, built-in families, and
//!   a numerical probe of the dissipativity hypothesis.
//! - [`solver`]: Euler-Maruyama time stepping of the image dynamics, the
//!   Picard fixed-point construction, and flow-composition checks.
//! - [`calculus`]: Lions-derivative calculus on cylindrical functionals,
//!   generator evaluation, square fields, martingale tests, and first-order
//!   derivative flows.
//! - [`feynman_kac`]: Monte Carlo evaluation of the probabilistic solution
//!   of the associated PDEs on `R^d x P2`.
//! - [`ergodicity`]: exponential-contraction and Dirac-collapse experiments.
//! - [`rng`]: reproducible counter-based Gaussian streams.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the companion `p2flow`
//! crate carries IO, file formats and the command-line harness.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod calculus;
pub mod coefficients;
pub mod error;
pub mod ergodicity;
pub mod feynman_kac;
pub mod functionals;
pub mod mat;
pub mod math;
pub mod measures;
pub mod rng;
pub mod solver;
pub mod stats;
pub mod wasserstein;

pub use error::{Error, Result};
pub use mat::Mat;
pub use measures::{ParticleEnsemble, TaggedEnsemble};
