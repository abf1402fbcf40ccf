//! Periodic homogenization of diffusivity on perforated cells and a
//! finite-element simulator for an MMP-driven invasion model.

pub mod diffusivity;
pub mod error;
pub mod expr;
pub mod fem;
pub mod homog;
pub mod invasion;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
