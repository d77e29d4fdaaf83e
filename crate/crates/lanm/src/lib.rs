//! A desk-scale laboratory for identifiable latent additive-noise causal models.
//!
//! The crate covers the full loop of a latent-variable identifiability study:
//!
//! * [`scm`] — synthetic data from segment-indexed latent structural causal
//!   models: exponential-family noise, additive-noise structural equations,
//!   optional post-nonlinear distortion, random invertible mixing.
//! * [`autodiff`] — a minimal reverse-mode tape over dense 2-D `f64` tensors,
//!   enough for small MLPs, Gaussian log-densities, and the ELBO.
//! * [`model`] — a masked autoregressive conditional-Gaussian variational
//!   model whose per-node masks encode the latent causal graph.
//! * [`train`] — deterministic Adam-based ELBO maximization.
//! * [`oracles`] — numeric certification of the identifiability assumptions
//!   and the observational-equivalence counterexample.
//! * [`eval`] — recovery metrics (MPC with optimal matching, SHD, affine and
//!   rank-correlation fits) and per-node identifiability verdicts.
//! * [`io`] / [`config`] — binary array format, dataset and checkpoint
//!   directories, and the strict experiment configuration schema.
//!
//! Everything is seeded and single-threaded by default; re-running any
//! pipeline with the same configuration reproduces its outputs bit for bit.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod scm;
pub mod train;

pub use error::{Error, Result};
pub use autodiff::{GradCheckReport, Gradients, NodeId, OpKind, Tape, Tensor};
