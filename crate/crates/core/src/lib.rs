//! Differentiable rendering of 3D Gaussian scenes, adversarial masking of
//! their color coefficients against face-embedding verifiers, and the
//! retrieval/verification/fidelity harness used to score the result.
//!
//! The pipeline is `scene -> camera -> renderer -> embedder -> attack`, with
//! [`eval`] consuming embeddings and renders. Every stage is deterministic for
//! fixed seeds and has an analytic backward pass that can be checked against
//! central finite differences ([`renderer::fd_gradient`]).

pub mod attack;
pub mod camera;
pub mod cli;
pub mod config;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod renderer;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
