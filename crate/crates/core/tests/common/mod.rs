#![allow(dead_code)]

use ce_nmt::data::synthetic::CipherPair;
use ce_nmt::data::{EncodedCorpus, ParallelCorpus, Vocabulary};
use ce_nmt::model::ModelConfig;
use ce_nmt::training::{CEConfig, TrainConfig};

/// The substitution-cipher pair with vocabularies and encoded splits.
pub struct Toy {
    pub train: ParallelCorpus,
    pub test: ParallelCorpus,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub encoded: EncodedCorpus,
    pub encoded_test: EncodedCorpus,
    pub config: ModelConfig,
}

impl Toy {
    pub fn new(train: usize, test: usize) -> Self {
        let (train, test) = CipherPair::default().splits(train, test);
        let source_vocab = Vocabulary::build(train.sources(), 1, 1000).unwrap();
        let target_vocab = Vocabulary::build(train.targets(), 1, 1000).unwrap();
        let config = ModelConfig::small(source_vocab.len(), target_vocab.len());
        let encoded = EncodedCorpus::new(&train, &source_vocab, &target_vocab, config.max_len);
        let encoded_test = EncodedCorpus::new(&test, &source_vocab, &target_vocab, config.max_len);
        Self {
            train,
            test,
            source_vocab,
            target_vocab,
            encoded,
            encoded_test,
            config,
        }
    }

    pub fn references(&self) -> Vec<Vec<String>> {
        self.test.targets().map(<[String]>::to_vec).collect()
    }
}

/// Stage-1 and fine-tuning budget for the toy pair.
pub fn translation_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 32,
        lr: 1e-3,
        warmup: 200,
        clip_norm: Some(1.0),
        shuffle: true,
    }
}

pub fn ce_config(epochs: u64) -> CEConfig {
    CEConfig {
        lambda: 5e-3,
        epochs,
        batch_size: 64,
        proj_dim: 32,
        lr: 1e-3,
        warmup: 100,
        ..CEConfig::default()
    }
}
