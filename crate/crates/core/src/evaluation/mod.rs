//! Language-agnosticism probes, BLEU, greedy decoding and diagnostic
//! exports.

mod bleu;
mod decode;
mod diagnostics;
mod probe;
mod protocol;

pub use bleu::{bleu, bleu_stats, BleuStats};
pub use decode::{bilingual_embeddings, greedy_decode, sentence_embeddings, shared_word_embeddings, translate};
pub use diagnostics::{
    attention_file_count, correlation_csv, export_diagnostics, read_correlation_csv, DiagnosticsConfig,
    DiagnosticsReport,
};
pub use probe::{train_probe, Evaluation, ProbeClassifier, ProbeConfig, Split, MIN_PER_CLASS};
pub use protocol::{run_centroid_protocol, run_protocol, ProtocolResult, Variant};
