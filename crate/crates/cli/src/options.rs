//! Command-line flags and the `key = value` config file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use ce_nmt::Pooling;
use clap::{CommandFactory, Parser, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Build vocabularies and corpus statistics.
    Prepare,
    /// Translation pre-training.
    Train,
    /// Context enhancement of the shared encoder.
    Ce,
    /// Translation fine-tuning from a context-enhanced checkpoint.
    Finetune,
    /// All three stages in order.
    Pipeline,
    /// Evaluate a checkpoint.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Bleu,
    Classify,
    Centroid,
    Diagnostics,
}

fn pooling(s: &str) -> Result<Pooling, String> {
    s.parse().map_err(|e: ce_nmt::Error| e.to_string())
}

/// Every flag except `--config` may also be set in the config file, using
/// the flag name with `_` in place of `-`. Flags win over file values.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "ce-nmt", version, about, args_override_self = true)]
#[command(after_help = "Environment: CE_NMT_LOG = quiet | info | debug (default info).\n\
Exit codes: 0 ok, 2 usage or input error, 3 embedding collapse, 4 divergence.")]
pub struct Options {
    /// What to run.
    #[arg(value_enum)]
    pub command: Option<Command>,

    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,

    // corpus and artifacts
    /// Source side of a line-aligned parallel corpus.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Target side of a line-aligned parallel corpus.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub source_lang: Option<String>,
    #[arg(long)]
    pub target_lang: Option<String>,
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub lowercase: Option<bool>,
    /// Minimum token frequency for the vocabularies.
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Maximum vocabulary size, reserved tokens included.
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Directory with `source.vocab` and `target.vocab` to use instead of
    /// building them from the corpus.
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Baseline checkpoint for `eval --mode classify`.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Pre-trained word embeddings (text format, one table for both sides).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<EvalMode>,

    // model
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    /// mean or max
    #[arg(long, value_parser = pooling)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,

    // translation stages
    /// Pre-training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub finetune_steps: Option<u64>,
    #[arg(long)]
    pub translation_batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip_norm: Option<f64>,

    // context enhancement
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Context-enhancement batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ce_lr: Option<f64>,
    #[arg(long)]
    pub ce_warmup: Option<usize>,
    #[arg(long)]
    pub eval_batches: Option<usize>,
    /// Watch sentence embeddings for collapse.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub monitor: Option<bool>,
    #[arg(long)]
    pub collapse_patience: Option<usize>,

    // stage selection
    /// Start context enhancement from a fresh encoder instead of a pre-trained one.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub skip_pretrain: Option<bool>,
    /// Fine-tune with the pre-trained decoder instead of a fresh one.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub reuse_decoder: Option<bool>,
    /// Record wall-clock milliseconds in the metrics log.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub wall_clock: Option<bool>,

    // probe
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
}

/// Keys accepted in the config file.
pub fn config_keys() -> Vec<String> {
    Options::command()
        .get_arguments()
        .filter_map(|a| a.get_long())
        .filter(|l| !matches!(*l, "config" | "help" | "version"))
        .map(|l| l.replace('-', "_"))
        .collect()
}

/// Turns config file lines into `--key=value` arguments.
pub fn config_args(path: &Path) -> Result<Vec<OsString>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let keys = config_keys();
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), i + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if !keys.iter().any(|k| k == key) {
            return Err(format!("{}:{}: unknown key `{key}`", path.display(), i + 1));
        }
        args.push(format!("--{}={value}", key.replace('_', "-")).into());
    }
    Ok(args)
}

/// Parses the command line, then re-parses with the config file's values in
/// front so that flags override them.
pub fn parse(argv: Vec<OsString>) -> Result<Options, clap::Error> {
    let first = Options::try_parse_from(&argv)?;
    let Some(path) = &first.config else {
        return Ok(first);
    };
    let file = config_args(path).map_err(|m| Options::command().error(clap::error::ErrorKind::InvalidValue, m))?;
    let mut merged = vec![argv[0].clone()];
    merged.extend(file);
    merged.extend(argv.into_iter().skip(1));
    Options::try_parse_from(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<OsString> {
        std::iter::once("ce-nmt")
            .chain(list.iter().copied())
            .map(Into::into)
            .collect()
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(
            &path,
            "# toy run\nlambda = 0.1\nepochs = 7 # short\nskip_pretrain = true\npooling = max\n",
        )
        .unwrap();
        let cfg = path.to_str().unwrap();
        let o = parse(args(&["ce", "--config", cfg, "--lambda", "0.005"])).unwrap();
        assert_eq!(o.command, Some(Command::Ce));
        assert_eq!(o.lambda, Some(0.005));
        assert_eq!(o.epochs, Some(7));
        assert_eq!(o.skip_pretrain, Some(true));
        assert_eq!(o.pooling, Some(Pooling::Max));
        let o = parse(args(&["ce", "--config", cfg, "--skip-pretrain=false"])).unwrap();
        assert_eq!(o.skip_pretrain, Some(false));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "lamda = 0.1\n").unwrap();
        let err = parse(args(&["ce", "--config", path.to_str().unwrap()])).unwrap_err();
        assert!(err.to_string().contains("unknown key `lamda`"));
        fs::write(&path, "config = other.conf\n").unwrap();
        assert!(parse(args(&["ce", "--config", path.to_str().unwrap()])).is_err());
    }

    #[test]
    fn every_key_is_a_flag() {
        let help = Options::command().render_long_help().to_string();
        for key in config_keys() {
            assert!(
                help.contains(&format!("--{}", key.replace('_', "-"))),
                "{key} missing from help"
            );
        }
        for flag in [
            "seed",
            "lambda",
            "epochs",
            "batch_size",
            "depth",
            "dim",
            "heads",
            "proj_dim",
            "pooling",
            "embeddings",
            "skip_pretrain",
            "reuse_decoder",
            "out",
        ] {
            assert!(config_keys().iter().any(|k| k == flag), "{flag}");
        }
    }
}
