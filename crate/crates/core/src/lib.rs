//! Spectral stochastic-fluid laboratory.
//!
//! Simulates randomly forced Stokes and Navier-Stokes systems on the torus in a
//! real Fourier basis, tracks Lagrangian particles together with their tangent
//! cocycles, and measures Lyapunov exponents, passive-scalar statistics and
//! Lie-bracket spanning ranks.

pub mod control;
pub mod error;
pub mod fluid;
pub mod hormander;
pub mod forcing;
pub mod lagrangian;
pub mod lyapunov;
pub mod scalar;
pub mod spectral;
pub mod stats;
pub mod yaglom;

pub use error::{Error, Result};
