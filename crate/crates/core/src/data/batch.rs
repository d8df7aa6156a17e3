use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::ParallelCorpus;
use super::vocab::{encode_sentence, Vocabulary, PAD};

/// Corpus after vocabulary lookup: `BOS … EOS` id sequences per side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub source: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
}

impl EncodedCorpus {
    pub fn new(corpus: &ParallelCorpus, source_vocab: &Vocabulary, target_vocab: &Vocabulary, max_len: usize) -> Self {
        Self {
            source: corpus
                .sources()
                .map(|s| encode_sentence(s, source_vocab, max_len))
                .collect(),
            target: corpus
                .targets()
                .map(|s| encode_sentence(s, target_vocab, max_len))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Batch made of the given pair indices, in order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let src: Vec<&[usize]> = indices.iter().map(|&i| self.source[i].as_slice()).collect();
        let tgt: Vec<&[usize]> = indices.iter().map(|&i| self.target[i].as_slice()).collect();
        Batch {
            source: PaddedIds::new(&src),
            target: PaddedIds::new(&tgt),
        }
    }
}

/// A PAD-filled `[batch × len]` id matrix and its validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedIds {
    pub fn new(rows: &[&[usize]]) -> Self {
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows.len() * len];
        for (b, r) in rows.iter().enumerate() {
            ids[b * len..b * len + r.len()].copy_from_slice(r);
        }
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Self {
            ids,
            mask,
            batch: rows.len(),
            len,
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// Drops the last column (decoder input) or the first (gold output).
    pub fn shifted(&self, drop_first: bool) -> PaddedIds {
        let len = self.len - 1;
        let skip = usize::from(drop_first);
        let mut ids = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            ids.extend_from_slice(&self.row(b)[skip..skip + len]);
        }
        let mask = ids.iter().map(|&i| i != PAD).collect();
        PaddedIds {
            ids,
            mask,
            batch: self.batch,
            len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: PaddedIds,
    pub target: PaddedIds,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.source.batch
    }
}

/// Yields batches of `batch_size` pairs (the last may be smaller), padded
/// per batch. Order is the corpus order, or a seeded permutation of it.
pub fn batch_iter(
    corpus: &EncodedCorpus,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| corpus.batch(&idx))
}
