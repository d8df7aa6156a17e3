//! Parallel corpora, vocabularies, batching and embedding files.

mod batch;
mod corpus;
mod embeddings;
pub mod synthetic;
mod vocab;

pub use batch::{batch_iter, Batch, EncodedCorpus, PaddedIds};
pub use corpus::{read_lines, tokenize, ParallelCorpus, SentencePair};
pub use embeddings::{
    embeddings_for_vocab, load_pretrained_embeddings, subtract_centroid, write_embeddings, Coverage, EmbeddingFile,
};
pub use vocab::{encode_sentence, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
