use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::vocab::{Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How much of a vocabulary a pre-trained embedding file covered.
/// Counts exclude the reserved entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    pub hits: usize,
    pub misses: usize,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Parsed `"<count> <dim>"` text embedding file.
#[derive(Debug, Clone)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub rows: HashMap<String, Vec<f64>>,
    /// Population standard deviation of each dimension over all rows.
    pub scale: Vec<f64>,
}

impl EmbeddingFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Format {
            path: path.into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| err(1, format!("bad header `{header}`: {e}")))
        };
        if head.len() != 2 {
            return Err(err(1, format!("header must be `<count> <dim>`, got `{header}`")));
        }
        let (count, dim) = (parse_usize(head[0])?, parse_usize(head[1])?);
        if dim == 0 {
            return Err(err(1, "dimension must be positive".into()));
        }
        let mut rows = HashMap::with_capacity(count);
        let mut order = Vec::with_capacity(count);
        for (i, line) in lines {
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let token = fields.next().unwrap_or_default().to_string();
            let values: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(i + 1, format!("bad value `{f}`")))
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(err(
                    i + 1,
                    format!("expected {dim} values for `{token}`, found {}", values.len()),
                ));
            }
            order.push(token.clone());
            rows.insert(token, values);
        }
        if order.len() != count {
            return Err(err(
                1,
                format!("header announces {count} rows, file has {}", order.len()),
            ));
        }
        let scale = column_std(rows.values(), dim);
        Ok(Self { dim, rows, scale })
    }
}

fn column_std<'a>(rows: impl Iterator<Item = &'a Vec<f64>> + Clone, dim: usize) -> Vec<f64> {
    let n = rows.clone().count();
    if n == 0 {
        return vec![1.0 / (dim as f64).sqrt(); dim];
    }
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    var.into_iter().map(f64::sqrt).collect()
}

/// Builds a `[V×n]` table for `vocab`: rows present in the file are copied,
/// the rest are drawn from a seeded normal with the file's per-dimension scale.
pub fn load_pretrained_embeddings(path: &Path, vocab: &Vocabulary, n: usize, seed: u64) -> Result<(Tensor, Coverage)> {
    let file = EmbeddingFile::read(path)?;
    embeddings_for_vocab(&file, vocab, n, seed, path)
}

pub fn embeddings_for_vocab(
    file: &EmbeddingFile,
    vocab: &Vocabulary,
    n: usize,
    seed: u64,
    path: &Path,
) -> Result<(Tensor, Coverage)> {
    if file.dim != n {
        return Err(Error::Format {
            path: path.into(),
            line: 1,
            message: format!("embedding dimension {} does not match model dimension {n}", file.dim),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Normal<f64>> = file
        .scale
        .iter()
        .map(|&s| Normal::new(0.0, s.max(1e-12)).expect("finite scale"))
        .collect();
    let mut data = Vec::with_capacity(vocab.len() * n);
    let mut coverage = Coverage { hits: 0, misses: 0 };
    for (id, token) in vocab.tokens().iter().enumerate() {
        let reserved = id < RESERVED.len();
        match file.rows.get(token) {
            Some(row) => {
                data.extend_from_slice(row);
                if !reserved {
                    coverage.hits += 1;
                }
            }
            None => {
                data.extend(normals.iter().map(|d| d.sample(&mut rng)));
                if !reserved {
                    coverage.misses += 1;
                }
            }
        }
    }
    Ok((Tensor::new(vec![vocab.len(), n], data)?, coverage))
}

/// Writes a table in the `"<count> <dim>"` text format (shortest
/// round-tripping decimal for each value).
pub fn write_embeddings(path: &Path, tokens: &[String], table: &Tensor) -> Result<()> {
    let mut out = format!("{} {}\n", tokens.len(), table.cols());
    for (i, t) in tokens.iter().enumerate() {
        out.push_str(t);
        for v in table.row(i) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Subtracts the column-wise mean from every row.
pub fn subtract_centroid(embeddings: &Tensor) -> Tensor {
    let (m, n) = (embeddings.rows(), embeddings.cols());
    let mut mean = vec![0.0; n];
    for r in 0..m {
        for (acc, v) in mean.iter_mut().zip(embeddings.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let data = embeddings
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v - mean[i % n])
        .collect();
    Tensor::raw(embeddings.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn hand_parsed_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.txt", "2 3\na 1 0 0\nb 0 1 0\n");
        let vocab = Vocabulary::from_tokens(["a"]);
        let (table, cov) = load_pretrained_embeddings(&p, &vocab, 3, 0).unwrap();
        assert_eq!(table.row(4), &[1.0, 0.0, 0.0]);
        assert_eq!(cov, Coverage { hits: 1, misses: 0 });
    }

    #[test]
    fn full_coverage_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(["x", "y", "z"]);
        let values: Vec<f64> = (0..vocab.len() * 4).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        let table = Tensor::new(vec![vocab.len(), 4], values).unwrap();
        let p = dir.path().join("e.txt");
        write_embeddings(&p, vocab.tokens(), &table).unwrap();
        let (loaded, cov) = load_pretrained_embeddings(&p, &vocab, 4, 1).unwrap();
        assert_eq!(cov.ratio(), 1.0);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded), bits(&table));
    }

    #[test]
    fn no_overlap_is_seeded_random() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.txt", "2 2\nq 1 2\nr 3 5\n");
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let (t1, cov) = load_pretrained_embeddings(&p, &vocab, 2, 42).unwrap();
        let (t2, _) = load_pretrained_embeddings(&p, &vocab, 2, 42).unwrap();
        assert_eq!(cov, Coverage { hits: 0, misses: 2 });
        assert_eq!(cov.ratio(), 0.0);
        assert_eq!(t1, t2);
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(["a"]);
        let p = write(dir.path(), "dim.txt", "1 3\na 1 2 3\n");
        assert!(matches!(
            load_pretrained_embeddings(&p, &vocab, 4, 0).unwrap_err(),
            Error::Format { .. }
        ));
        let p = write(dir.path(), "row.txt", "2 2\na 1 2\nb 1 x\n");
        match load_pretrained_embeddings(&p, &vocab, 2, 0).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "short.txt", "1 2\na 1\n");
        assert!(load_pretrained_embeddings(&p, &vocab, 2, 0).is_err());
    }

    #[test]
    fn centroid_examples() {
        let t = |rows: &[Vec<f64>]| Tensor::from_rows(rows).unwrap();
        assert_eq!(subtract_centroid(&t(&[vec![3., 4.]])).data(), &[0., 0.]);
        let c = t(&[vec![1., 0.], vec![-1., 0.]]);
        assert_eq!(subtract_centroid(&c), c);
        assert_eq!(
            subtract_centroid(&t(&[vec![2., 2.], vec![0., 0.]])).data(),
            &[1., 1., -1., -1.]
        );
    }

    proptest! {
        #[test]
        fn centroid_subtraction_is_idempotent(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20)
        ) {
            let x = Tensor::from_rows(&rows).unwrap();
            let once = subtract_centroid(&x);
            let twice = subtract_centroid(&once);
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
        }
    }
}
