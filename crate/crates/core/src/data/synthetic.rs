//! Small synthetic language pairs for end-to-end checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{ParallelCorpus, SentencePair};

/// A word-for-word substitution cipher between two artificial languages.
///
/// `cipher_words` source words `s{i}` map through a fixed random permutation
/// onto target words `t{j}`; `shared_words` words `n{i}` are spelled the same
/// in both languages and map to themselves.
#[derive(Debug, Clone)]
pub struct CipherPair {
    pub cipher_words: usize,
    pub shared_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CipherPair {
    fn default() -> Self {
        Self {
            cipher_words: 40,
            shared_words: 10,
            min_len: 3,
            max_len: 10,
            seed: 0,
        }
    }
}

impl CipherPair {
    fn lexicon(&self) -> (Vec<String>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut perm: Vec<usize> = (0..self.cipher_words).collect();
        perm.shuffle(&mut rng);
        let mut src: Vec<String> = (0..self.cipher_words).map(|i| format!("s{i}")).collect();
        let mut tgt: Vec<String> = perm.iter().map(|j| format!("t{j}")).collect();
        for i in 0..self.shared_words {
            src.push(format!("n{i}"));
            tgt.push(format!("n{i}"));
        }
        (src, tgt)
    }

    /// Target translation of a source word, if it belongs to the lexicon.
    pub fn translate_word(&self, word: &str) -> Option<String> {
        let (src, tgt) = self.lexicon();
        src.iter().position(|w| w == word).map(|i| tgt[i].clone())
    }

    /// `count` random sentence pairs drawn with `stream` as an extra seed so
    /// train and test splits share the lexicon but not the sentences.
    pub fn sample(&self, count: usize, stream: u64) -> ParallelCorpus {
        let (src, tgt) = self.lexicon();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (stream.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let pairs = (0..count)
            .map(|_| {
                let len = rng.random_range(self.min_len..=self.max_len);
                let words: Vec<usize> = (0..len).map(|_| rng.random_range(0..src.len())).collect();
                SentencePair {
                    source: words.iter().map(|&w| src[w].clone()).collect(),
                    target: words.iter().map(|&w| tgt[w].clone()).collect(),
                    source_lang: "src".into(),
                    target_lang: "tgt".into(),
                }
            })
            .collect();
        ParallelCorpus::new(pairs).expect("min_len >= 1")
    }

    /// Train and test splits.
    pub fn splits(&self, train: usize, test: usize) -> (ParallelCorpus, ParallelCorpus) {
        (self.sample(train, 0), self.sample(test, 1))
    }
}

/// Pairs whose target is an exact copy of the source.
pub fn identity_copy(words: usize, count: usize, min_len: usize, max_len: usize, seed: u64) -> ParallelCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..count)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let s: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..words))).collect();
            SentencePair {
                source: s.clone(),
                target: s,
                source_lang: "src".into(),
                target_lang: "tgt".into(),
            }
        })
        .collect();
    ParallelCorpus::new(pairs).expect("min_len >= 1")
}
