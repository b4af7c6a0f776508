//! Almost-sure finiteness of perpetual integral functionals of transient
//! one-dimensional diffusions.

pub mod boundary;
pub mod catalogue;
pub mod criterion;
pub mod diffusion;
mod error;
pub mod expr;
pub mod extended;
mod ladder;
mod ode;
pub mod quadrature;
pub mod sim;
pub mod timechange;

pub use error::Error;
