use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Splits on Unicode whitespace, optionally lowercasing.
pub fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub source_lang: String,
    pub target_lang: String,
}

/// Line-aligned sentence pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    /// Rejects pairs with an empty side.
    pub fn new(pairs: Vec<SentencePair>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|p| p.source.is_empty() || p.target.is_empty()) {
            return Err(Error::Degenerate(format!("sentence pair {i} has an empty side")));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }

    /// Reads two line-aligned UTF-8 files.
    pub fn from_files(source: &Path, target: &Path, langs: (&str, &str), lowercase: bool) -> Result<Self> {
        let src = read_lines(source)?;
        let tgt = read_lines(target)?;
        if src.len() != tgt.len() {
            return Err(Error::Ingest {
                path: target.into(),
                line: src.len().min(tgt.len()) + 1,
                message: format!(
                    "line count mismatch: {} has {} lines, {} has {}",
                    source.display(),
                    src.len(),
                    target.display(),
                    tgt.len()
                ),
            });
        }
        let mut pairs = Vec::with_capacity(src.len());
        for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
            let (source_toks, target_toks) = (tokenize(s, lowercase), tokenize(t, lowercase));
            for (toks, path) in [(&source_toks, source), (&target_toks, target)] {
                if toks.is_empty() {
                    return Err(Error::Ingest {
                        path: path.into(),
                        line: i + 1,
                        message: "empty sentence".into(),
                    });
                }
            }
            pairs.push(SentencePair {
                source: source_toks,
                target: target_toks,
                source_lang: langs.0.to_string(),
                target_lang: langs.1.to_string(),
            });
        }
        Ok(Self { pairs })
    }

    /// Writes the corpus back out as two line-aligned files.
    pub fn write_files(&self, source: &Path, target: &Path) -> Result<()> {
        let join = |side: &dyn Fn(&SentencePair) -> &[String]| -> String {
            self.pairs.iter().map(|p| side(p).join(" ") + "\n").collect()
        };
        fs::write(source, join(&|p| &p.source)).map_err(|e| Error::io(source, e))?;
        fs::write(target, join(&|p| &p.target)).map_err(|e| Error::io(target, e))
    }
}

/// Lines of a UTF-8 file; a trailing newline does not add an empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut rest: &[u8] = &bytes;
    while !rest.is_empty() {
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        let mut line = &rest[..end];
        if line.last() == Some(&b'\r') {
            line = &line[..line.len() - 1];
        }
        let text = std::str::from_utf8(line).map_err(|e| Error::Ingest {
            path: path.into(),
            line: lines.len() + 1,
            message: format!("invalid UTF-8: {e}"),
        })?;
        lines.push(text.to_string());
        rest = rest.get(end + 1..).unwrap_or(&[]);
    }
    Ok(lines)
}
