//! Numerical laboratory for Riesz transforms and function spaces on the Bessel half-line.

pub mod atoms;
pub mod domain;
pub mod experiments;
pub mod factorization;
pub mod error;
pub mod haar;
pub mod kernel;
pub mod operators;
pub mod oscillation;
pub mod quad;

pub use error::{Error, Result};
