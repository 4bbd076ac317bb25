//! Spectral-measure construction and dispersive decay experiments for the
//! three-dimensional massless Dirac operator `H = -iα·∇ + V`.

pub mod algebra;
pub mod cli;
pub mod error;
pub mod evolution;
pub mod fft;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod potential;
pub mod resolvent;
pub mod threshold;

pub use error::{Error, Result};
