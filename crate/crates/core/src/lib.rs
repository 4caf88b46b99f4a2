//! Numerical toolkit for brake orbits of time-periodic Tonelli systems on
//! flat tori with exact magnetic forms.

pub mod bangert;
pub mod dynamics;
pub mod error;
pub mod index;
pub mod expr;
pub mod legendre;
pub mod linalg;
pub mod loopspace;
pub mod modification;
pub mod model;
pub mod sampling;
pub mod system;

pub use error::{Error, Result};
