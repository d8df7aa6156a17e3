use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{EncodedCorpus, Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::losses::CrossCorrelation;
use crate::model::{AttentionKind, Model, Side};
use crate::numerics::Tensor;
use crate::training::{ce_forward, translation_forward, Checkpoint};

use super::decode::sentence_embeddings;

/// Which probe data to export and how much of it.
#[derive(Debug, Clone)]
pub struct DiagnosticsConfig {
    pub batch_size: usize,
    /// Number of consecutive probe batches for correlation matrices.
    pub correlation_batches: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            correlation_batches: 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DiagnosticsReport {
    pub correlation: Vec<PathBuf>,
    pub attention: Vec<PathBuf>,
    pub sentence_embeddings: PathBuf,
    pub word_embeddings: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn header(prefix: &[&str], stem: &str, n: usize) -> String {
    let mut cols: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    cols.extend((0..n).map(|i| format!("{stem}{i}")));
    cols.join(",") + "\n"
}

fn push_values(line: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(line, ",{v:e}");
    }
    line.push('\n');
}

/// `d×d` correlation matrix as CSV: a header `c0,…` and one line per row.
pub fn correlation_csv(c: &CrossCorrelation) -> String {
    let d = c.dim();
    let mut out = header(&[], "c", d);
    for i in 0..d {
        let row: Vec<String> = (0..d).map(|j| format!("{:e}", c.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses [`correlation_csv`] output.
pub fn read_correlation_csv(path: &Path) -> Result<CrossCorrelation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().skip(1) {
        for cell in line.split(',') {
            values.push(cell.parse::<f64>().map_err(|e| Error::Ingest {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        rows += 1;
    }
    Ok(CrossCorrelation {
        values: Tensor::new(vec![rows, rows], values)?,
    })
}

/// Writes correlation matrices (when the checkpoint has a projection head),
/// per-layer per-head attention maps of one probe batch, and sentence and
/// word embeddings, all as CSV with header rows.
pub fn export_diagnostics(
    checkpoint: &Checkpoint,
    corpus: &EncodedCorpus,
    vocabs: (&Vocabulary, &Vocabulary),
    out_dir: &Path,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    if corpus.is_empty() {
        return Err(Error::Config("empty probe corpus".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = checkpoint.model();
    let cfg = &model.config;
    let bs = config.batch_size.max(2).min(corpus.len());
    let mut report = DiagnosticsReport::default();

    if model.has_projection() && corpus.len() >= 2 {
        let n = corpus.len() / bs;
        for k in 0..config.correlation_batches.min(n.max(1)) {
            let idx: Vec<usize> = (k * bs..((k + 1) * bs).min(corpus.len())).collect();
            let batch = corpus.batch(&idx);
            let mut session = model.session(&[]);
            let f = ce_forward(&mut session, &batch, cfg.pooling, crate::losses::DEFAULT_LAMBDA)?;
            let c = CrossCorrelation {
                values: session.graph.value(f.correlation).clone(),
            };
            let path = out_dir.join(format!("correlation_batch{k}.csv"));
            report.correlation.push(write(&path, &correlation_csv(&c))?);
        }
    }

    let probe: Vec<usize> = (0..bs).collect();
    let batch = corpus.batch(&probe);
    let mut session = model.session(&[]);
    if model.has_decoder() {
        translation_forward(&mut session, &batch)?;
    } else {
        session.encode(&batch.source, Side::Source)?;
    }
    for &(kind, layer, node) in session.attention_nodes() {
        let (spec, probs) = session
            .graph
            .attention_probs(node)
            .ok_or_else(|| Error::Config("attention node without probabilities".into()))?;
        let (tq, tk) = (spec.query_len, spec.key_len);
        for head in 0..spec.heads {
            let mut text = header(&["batch", "query"], "k", tk);
            for b in 0..spec.batch {
                for i in 0..tq {
                    let start = ((b * spec.heads + head) * tq + i) * tk;
                    let _ = write!(text, "{b},{i}");
                    push_values(&mut text, &probs[start..start + tk]);
                }
            }
            let path = out_dir.join(format!("attention_{}_layer{layer}_head{head}.csv", kind.label()));
            report.attention.push(write(&path, &text)?);
        }
    }

    let n = corpus.len().min(256);
    let src: Vec<Vec<usize>> = corpus.source[..n].to_vec();
    let tgt: Vec<Vec<usize>> = corpus.target[..n].to_vec();
    let mut text = header(&["index", "language"], "e", cfg.dim);
    for (lang, side, rows) in [("source", Side::Source, &src), ("target", Side::Target, &tgt)] {
        let e = sentence_embeddings(&model, rows, side, cfg.pooling, 64)?;
        for i in 0..n {
            let _ = write!(text, "{i},{lang}");
            push_values(&mut text, e.row(i));
        }
    }
    report.sentence_embeddings = write(&out_dir.join("sentence_embeddings.csv"), &text)?;

    let mut text = header(&["token", "language"], "e", cfg.embed_dim);
    for (lang, table, vocab) in [("source", "embed.src", vocabs.0), ("target", "embed.tgt", vocabs.1)] {
        let t = model.params.require(table)?;
        for (i, tok) in vocab.tokens().iter().enumerate().skip(RESERVED.len()) {
            if i >= t.rows() {
                break;
            }
            let _ = write!(text, "{},{lang}", csv_field(tok));
            push_values(&mut text, t.row(i));
        }
    }
    report.word_embeddings = write(&out_dir.join("word_embeddings.csv"), &text)?;
    Ok(report)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Expected number of attention files for a model with a decoder.
pub fn attention_file_count(model: &Model) -> usize {
    let kinds = [
        AttentionKind::EncoderSelf,
        AttentionKind::DecoderSelf,
        AttentionKind::DecoderCross,
    ];
    model.config.depth * model.config.heads * kinds.len()
}
