//! Coupled structural sparsification for transformer language models.

pub mod autograd;
pub mod error;
pub mod importance;
pub mod model;
pub mod numerics;
pub mod sparsifier;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
