//! p-Laplacian self-attention.
//!
//! The softmax weights of every head are multiplied by
//! `||v(x) - v(y)||^(p-2)`; `p = 2` recovers standard attention. Besides the
//! attention layers this crate carries the energy functional whose gradient
//! flow motivates them, spectral diagnostics for the resulting operators,
//! and a small trainable model with a hand-written backward pass.

pub mod attention;
pub mod energy_flow;
pub mod error;
pub mod io;
pub mod numerics;
pub mod rng;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ComplexVector, RealMatrix, TokenSequence};
