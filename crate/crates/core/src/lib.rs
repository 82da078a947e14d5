//! Latent force toolkit core.
//!
//! Implements sparse variational Gaussian process inference over latent
//! forces driving user-specified ODEs and a 1D reaction-diffusion PDE.
//! Everything is built around a reverse-mode tape ([`graph::Graph`]) so that
//! the evidence lower bound can be differentiated through the equation
//! solvers. A spectral neural operator ([`lfo`]) amortizes latent force
//! inference across many generated instances.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, the CLI
//! and anything that needs wall clocks or threads lives in the companion
//! `lft` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod fem1d;
pub mod gradcheck;
pub mod graph;
pub mod interp;
pub mod kernels;
pub mod lfm;
pub mod lfo;
pub mod matrix;
pub mod metrics;
pub mod odesolve;
pub mod opt;
pub mod params;
pub mod rng;
pub mod svgp;
pub mod synth;
pub mod tridiag;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use matrix::Matrix;
pub use params::{ParamRef, ParamStore};
pub use rng::Rng;
