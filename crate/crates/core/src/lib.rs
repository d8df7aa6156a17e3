//! Transformer machine translation with a Barlow Twins context-enhancement
//! stage for the shared encoder, plus language-agnosticism probes.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Pooling, Tensor};
