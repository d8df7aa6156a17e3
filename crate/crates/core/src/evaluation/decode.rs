use crate::data::{PaddedIds, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Model, Pooling, Side};
use crate::numerics::Tensor;

/// Greedy decoding of one batch of encoded source sentences. Each output
/// row holds the generated ids after BOS, up to and including EOS when one
/// was produced.
pub fn greedy_decode(model: &Model, sources: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
    if !model.has_decoder() {
        return Err(Error::Checkpoint("greedy decoding needs decoder parameters".into()));
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let source = PaddedIds::new(sources);
    let vocab = model.config.target_vocab;
    let limit = model.config.max_len - 1;
    let mut session = model.session(&[]);
    let latent = session.encode(&source, Side::Source)?;
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
    let mut done = vec![false; sources.len()];
    for t in 0..limit {
        let rows: Vec<Vec<usize>> = out
            .iter()
            .map(|o| std::iter::once(BOS).chain(o.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        let prefix = PaddedIds::new(&refs);
        let logits = session.decode(&latent, &prefix)?;
        let values = session.graph.value(logits).data();
        for (b, o) in out.iter_mut().enumerate() {
            if done[b] {
                continue;
            }
            let row = &values[(b * prefix.len + t) * vocab..(b * prefix.len + t + 1) * vocab];
            // PAD and BOS are never valid outputs
            let mut best = EOS;
            for (i, &v) in row.iter().enumerate().skip(EOS) {
                if v > row[best] {
                    best = i;
                }
            }
            o.push(best);
            done[b] = best == EOS;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

/// Translates encoded source sentences in batches and maps the output back
/// to target tokens.
pub fn translate(
    model: &Model,
    sources: &[Vec<usize>],
    target_vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch_size.max(1)) {
        let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        for ids in greedy_decode(model, &refs)? {
            out.push(target_vocab.decode(&ids));
        }
    }
    Ok(out)
}

/// Pooled encoder outputs σ `[M × h]` of encoded sentences of one language.
pub fn sentence_embeddings(
    model: &Model,
    sentences: &[Vec<usize>],
    side: Side,
    pooling: Pooling,
    batch_size: usize,
) -> Result<Tensor> {
    let h = model.config.dim;
    let mut data = Vec::with_capacity(sentences.len() * h);
    for chunk in sentences.chunks(batch_size.max(1)) {
        let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let ids = PaddedIds::new(&refs);
        let mut session = model.session(&[]);
        let latent = session.encode(&ids, side)?;
        let sigma = session.pool(&latent, pooling)?;
        data.extend_from_slice(session.graph.value(sigma).data());
    }
    Tensor::new(vec![sentences.len(), h], data)
}

/// Source and target sentence embeddings stacked, with labels 0 (source)
/// and 1 (target).
pub fn bilingual_embeddings(
    model: &Model,
    source: &[Vec<usize>],
    target: &[Vec<usize>],
    pooling: Pooling,
) -> Result<(Tensor, Vec<usize>)> {
    let s = sentence_embeddings(model, source, Side::Source, pooling, 64)?;
    let t = sentence_embeddings(model, target, Side::Target, pooling, 64)?;
    let mut data = s.data().to_vec();
    data.extend_from_slice(t.data());
    let labels = std::iter::repeat_n(0, source.len())
        .chain(std::iter::repeat_n(1, target.len()))
        .collect();
    Ok((
        Tensor::new(vec![source.len() + target.len(), model.config.dim], data)?,
        labels,
    ))
}

/// Rows of both embedding tables for tokens spelled the same in both
/// vocabularies (reserved tokens excluded), labelled 0 (source) and 1
/// (target), and the shared tokens themselves.
pub fn shared_word_embeddings(
    model: &Model,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> Result<(Tensor, Vec<usize>, Vec<String>)> {
    let src = model.params.require("embed.src")?;
    let tgt = model.params.require("embed.tgt")?;
    let mut data = Vec::new();
    let mut shared = Vec::new();
    let mut tgt_rows = Vec::new();
    for (i, tok) in source_vocab
        .tokens()
        .iter()
        .enumerate()
        .skip(crate::data::RESERVED.len())
    {
        if let Some(j) = target_vocab.id(tok) {
            data.extend_from_slice(src.row(i));
            tgt_rows.push(j);
            shared.push(tok.clone());
        }
    }
    for j in tgt_rows {
        data.extend_from_slice(tgt.row(j));
    }
    let n = shared.len();
    let labels = std::iter::repeat_n(0, n).chain(std::iter::repeat_n(1, n)).collect();
    Ok((Tensor::new(vec![2 * n, model.config.embed_dim], data)?, labels, shared))
}
