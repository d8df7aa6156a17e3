//! Transformer encoder/decoder, mask-aware pooling and the projection head.

mod config;
mod params;
mod transformer;

pub use crate::numerics::Pooling;
pub use config::ModelConfig;
pub use params::{ParamGroup, ParamStore};
pub use transformer::{positional_encoding, AttentionKind, Latent, Model, Session, Side};
