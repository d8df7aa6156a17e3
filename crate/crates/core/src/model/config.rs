use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Pooling;

/// Architecture of the encoder–decoder, pooling and projection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of blocks in the encoder and in the decoder.
    pub depth: usize,
    /// Model width `h`.
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Output width `d` of the projection network.
    pub proj_dim: usize,
    pub pooling: Pooling,
    /// Word-embedding width `n`; an input projection is added when it differs from `dim`.
    pub embed_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub source_vocab: usize,
    pub target_vocab: usize,
}

impl ModelConfig {
    /// Small defaults suitable for the synthetic corpora.
    pub fn small(source_vocab: usize, target_vocab: usize) -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            proj_dim: 32,
            pooling: Pooling::Mean,
            embed_dim: 64,
            dropout: 0.0,
            max_len: 16,
            source_vocab,
            target_vocab,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1..=24).contains(&self.depth) {
            return fail(format!("depth {} outside [1, 24]", self.depth));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.ffn_dim == 0 || self.proj_dim == 0 || self.embed_dim == 0 {
            return fail("ffn_dim, proj_dim and embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} leaves no room for BOS/EOS", self.max_len));
        }
        if self.source_vocab < 5 || self.target_vocab < 5 {
            return fail("vocabularies must contain at least one non-reserved token".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = ModelConfig::small(10, 10);
        assert!(ok.validate().is_ok());
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ok.clone();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.heads = 3));
        assert!(bad(|c| c.depth = 0));
        assert!(bad(|c| c.depth = 25));
        assert!(bad(|c| c.dropout = 1.0));
        assert!(bad(|c| c.proj_dim = 0));
    }
}
