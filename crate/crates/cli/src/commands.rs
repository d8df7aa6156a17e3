use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ce_nmt::data::{load_pretrained_embeddings, EncodedCorpus, ParallelCorpus, Vocabulary};
use ce_nmt::evaluation::{
    bilingual_embeddings, bleu, export_diagnostics, run_centroid_protocol, run_protocol, shared_word_embeddings,
    translate, DiagnosticsConfig, ProbeConfig,
};
use ce_nmt::model::ModelConfig;
use ce_nmt::training::{
    context_enhance, context_enhance_model, encoder_only_model, finetune_translation, run_pipeline, train_translation,
    CEConfig, Checkpoint, DecoderInit, JsonlWriter, PipelineConfig, Stage, TrainConfig,
};
use ce_nmt::{Error, Result};
use serde_json::json;

use crate::options::{Command, EvalMode, Options};

const SOURCE_VOCAB: &str = "source.vocab";
const TARGET_VOCAB: &str = "target.vocab";
const METRICS: &str = "metrics.jsonl";

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Options {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn flag(v: Option<bool>) -> bool {
        v.unwrap_or(false)
    }

    fn corpus(&self) -> Result<ParallelCorpus> {
        let (Some(src), Some(tgt)) = (&self.source, &self.target) else {
            return Err(usage("--source and --target are required"));
        };
        let langs = (
            self.source_lang.as_deref().unwrap_or("src"),
            self.target_lang.as_deref().unwrap_or("tgt"),
        );
        let corpus = ParallelCorpus::from_files(src, tgt, langs, Self::flag(self.lowercase))?;
        if corpus.is_empty() {
            return Err(usage("empty corpus"));
        }
        Ok(corpus)
    }

    fn languages(&self) -> Vec<String> {
        vec![
            self.source_lang.clone().unwrap_or_else(|| "src".into()),
            self.target_lang.clone().unwrap_or_else(|| "tgt".into()),
        ]
    }

    fn build_vocabs(&self, corpus: &ParallelCorpus) -> Result<(Vocabulary, Vocabulary)> {
        let (min, max) = (self.min_freq.unwrap_or(1), self.max_vocab.unwrap_or(32_000));
        Ok((
            Vocabulary::build(corpus.sources(), min, max)?,
            Vocabulary::build(corpus.targets(), min, max)?,
        ))
    }

    fn load_vocabs(dir: &Path) -> Result<(Vocabulary, Vocabulary)> {
        Ok((
            Vocabulary::load(&dir.join(SOURCE_VOCAB))?,
            Vocabulary::load(&dir.join(TARGET_VOCAB))?,
        ))
    }

    /// Vocabularies for training: loaded from `--vocab-dir`, else built from
    /// the corpus. Either way they are written next to the checkpoints.
    fn training_vocabs(&self, corpus: &ParallelCorpus, out: &Path) -> Result<(Vocabulary, Vocabulary)> {
        let (vs, vt) = match &self.vocab_dir {
            Some(dir) => Self::load_vocabs(dir)?,
            None => self.build_vocabs(corpus)?,
        };
        vs.save(&out.join(SOURCE_VOCAB))?;
        vt.save(&out.join(TARGET_VOCAB))?;
        Ok((vs, vt))
    }

    fn model_config(&self, vs: &Vocabulary, vt: &Vocabulary) -> ModelConfig {
        let d = ModelConfig::small(vs.len(), vt.len());
        let dim = self.dim.unwrap_or(d.dim);
        ModelConfig {
            depth: self.depth.unwrap_or(d.depth),
            dim,
            heads: self.heads.unwrap_or(d.heads),
            ffn_dim: self.ffn_dim.unwrap_or(4 * dim),
            proj_dim: self.proj_dim.unwrap_or(d.proj_dim),
            pooling: self.pooling.unwrap_or(d.pooling),
            embed_dim: self.embed_dim.unwrap_or(dim),
            dropout: self.dropout.unwrap_or(d.dropout),
            max_len: self.max_len.unwrap_or(d.max_len),
            ..d
        }
    }

    fn clip(&self, default: Option<f64>) -> Option<f64> {
        match self.clip_norm {
            Some(c) if c <= 0.0 => None,
            Some(c) => Some(c),
            None => default,
        }
    }

    fn train_config(&self, steps: Option<u64>) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            steps: steps.unwrap_or(d.steps),
            batch_size: self.translation_batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            warmup: self.warmup.unwrap_or(d.warmup),
            clip_norm: self.clip(d.clip_norm),
            shuffle: true,
        }
    }

    fn ce_config(&self) -> CEConfig {
        let d = CEConfig::default();
        CEConfig {
            lambda: self.lambda.unwrap_or(d.lambda),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            pooling: self.pooling.unwrap_or(d.pooling),
            proj_dim: self.proj_dim.unwrap_or(d.proj_dim),
            lr: self.ce_lr.unwrap_or(d.lr),
            warmup: self.ce_warmup.unwrap_or(d.warmup),
            clip_norm: self.clip(d.clip_norm),
            eval_batches: self.eval_batches.unwrap_or(d.eval_batches),
            monitor: self.monitor.unwrap_or(d.monitor),
            collapse_patience: self.collapse_patience.unwrap_or(d.collapse_patience),
            ..d
        }
    }

    fn probe_config(&self) -> ProbeConfig {
        let d = ProbeConfig::default();
        ProbeConfig {
            lr: self.probe_lr.unwrap_or(d.lr),
            epochs: self.probe_epochs.unwrap_or(d.epochs),
            seed: self.seed(),
        }
    }

    fn metrics(&self, out: &Path) -> Result<JsonlWriter> {
        let w = JsonlWriter::create(&out.join(METRICS))?;
        Ok(if Self::flag(self.wall_clock) {
            w.with_wall_clock()
        } else {
            w
        })
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| usage("--checkpoint is required"))?;
        Checkpoint::load(path)
    }

    fn embedding_tables(
        &self,
        cfg: &ModelConfig,
        vs: &Vocabulary,
        vt: &Vocabulary,
    ) -> Result<Option<(ce_nmt::Tensor, ce_nmt::Tensor)>> {
        let Some(path) = &self.embeddings else {
            return Ok(None);
        };
        let (src, cs) = load_pretrained_embeddings(path, vs, cfg.embed_dim, self.seed())?;
        let (tgt, ct) = load_pretrained_embeddings(path, vt, cfg.embed_dim, self.seed().wrapping_add(1))?;
        log::info!(
            "embedding coverage: source {:.1}%, target {:.1}%",
            100.0 * cs.ratio(),
            100.0 * ct.ratio()
        );
        Ok(Some((src, tgt)))
    }
}

/// Training-stage context shared by train, ce, finetune and pipeline.
struct Run {
    out: PathBuf,
    vocabs: (Vocabulary, Vocabulary),
    encoded: EncodedCorpus,
    model: ModelConfig,
}

impl Run {
    fn new(o: &Options, max_len: Option<usize>) -> Result<Self> {
        let corpus = o.corpus()?;
        let out = o.out_dir();
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let (vs, vt) = o.training_vocabs(&corpus, &out)?;
        let model = o.model_config(&vs, &vt);
        let encoded = EncodedCorpus::new(&corpus, &vs, &vt, max_len.unwrap_or(model.max_len));
        Ok(Self {
            out,
            vocabs: (vs, vt),
            encoded,
            model,
        })
    }

    fn save(&self, ckpt: &Checkpoint) -> Result<PathBuf> {
        let path = self.out.join(ckpt.file_name());
        ckpt.save(&path)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

fn require_stage(ckpt: &Checkpoint, allowed: &[Stage], what: &str) -> Result<()> {
    if allowed.contains(&ckpt.stage) {
        Ok(())
    } else {
        let names: Vec<&str> = allowed.iter().map(|s| s.label()).collect();
        Err(usage(format!(
            "{what} needs a {} checkpoint, got {}",
            names.join(" or "),
            ckpt.stage.label()
        )))
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn run(o: &Options) -> Result<()> {
    match o.command.ok_or_else(|| usage("no command given (see --help)"))? {
        Command::Prepare => prepare(o),
        Command::Train => train(o),
        Command::Ce => ce(o),
        Command::Finetune => finetune(o),
        Command::Pipeline => pipeline(o),
        Command::Eval => eval(o),
    }
}

fn histogram<'a>(lengths: impl Iterator<Item = &'a [String]>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for s in lengths {
        *h.entry(s.len()).or_default() += 1;
    }
    h
}

fn prepare(o: &Options) -> Result<()> {
    let corpus = o.corpus()?;
    let out = o.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let (vs, vt) = o.build_vocabs(&corpus)?;
    vs.save(&out.join(SOURCE_VOCAB))?;
    vt.save(&out.join(TARGET_VOCAB))?;
    let stats = json!({
        "pair_count": corpus.len(),
        "source_vocab": vs.len(),
        "target_vocab": vt.len(),
        "source_lengths": histogram(corpus.sources()),
        "target_lengths": histogram(corpus.targets()),
    });
    let path = out.join("stats.json");
    fs::write(&path, serde_json::to_string_pretty(&stats).expect("serializable"))
        .map_err(|e| Error::Io { path, source: e })?;
    print_json(&stats);
    Ok(())
}

fn train(o: &Options) -> Result<()> {
    let run = Run::new(o, None)?;
    let mut sink = o.metrics(&run.out)?;
    let ckpt = train_translation(&run.model, &run.encoded, &o.train_config(o.steps), o.seed(), &mut sink)?;
    sink.flush()?;
    run.save(&ckpt)?;
    Ok(())
}

fn ce(o: &Options) -> Result<()> {
    let cfg = o.ce_config();
    if Options::flag(o.skip_pretrain) {
        let run = Run::new(o, None)?;
        let tables = o.embedding_tables(&run.model, &run.vocabs.0, &run.vocabs.1)?;
        let model = encoder_only_model(&run.model, tables, o.seed())?;
        let mut sink = o.metrics(&run.out)?;
        let outcome = context_enhance_model(model, &run.encoded, &cfg, o.seed(), &mut sink)?;
        sink.flush()?;
        run.save(&outcome.checkpoint)?;
        return Ok(());
    }
    if o.embeddings.is_some() {
        return Err(usage("--embeddings requires --skip-pretrain"));
    }
    let start = o.checkpoint()?;
    require_stage(&start, &[Stage::Pretrain], "ce")?;
    let run = Run::new(o, Some(start.config.max_len))?;
    let mut sink = o.metrics(&run.out)?;
    let outcome = context_enhance(&start, &run.encoded, &cfg, o.seed(), &mut sink)?;
    sink.flush()?;
    run.save(&outcome.checkpoint)?;
    Ok(())
}

fn finetune(o: &Options) -> Result<()> {
    let start = o.checkpoint()?;
    require_stage(&start, &[Stage::Ce], "finetune")?;
    let run = Run::new(o, Some(start.config.max_len))?;
    let decoder = if Options::flag(o.reuse_decoder) {
        DecoderInit::Reuse(None)
    } else {
        DecoderInit::Fresh
    };
    let mut sink = o.metrics(&run.out)?;
    let steps = o.finetune_steps.or(o.steps);
    let ckpt = finetune_translation(
        &start,
        &run.encoded,
        &o.train_config(steps),
        o.seed(),
        decoder,
        &mut sink,
    )?;
    sink.flush()?;
    run.save(&ckpt)?;
    Ok(())
}

fn pipeline(o: &Options) -> Result<()> {
    let run = Run::new(o, None)?;
    let skip = Options::flag(o.skip_pretrain);
    let embeddings = if skip {
        o.embedding_tables(&run.model, &run.vocabs.0, &run.vocabs.1)?
    } else if o.embeddings.is_some() {
        return Err(usage("--embeddings requires --skip-pretrain"));
    } else {
        None
    };
    let cfg = PipelineConfig {
        model: run.model.clone(),
        pretrain: o.train_config(o.steps),
        ce: o.ce_config(),
        finetune: o.train_config(o.finetune_steps.or(o.steps)),
        skip_pretrain: skip,
        embeddings,
        reuse_decoder: Options::flag(o.reuse_decoder),
        out_dir: Some(run.out.clone()),
    };
    let mut sink = o.metrics(&run.out)?;
    let out = run_pipeline(&cfg, &run.encoded, o.seed(), &mut sink)?;
    sink.flush()?;
    for f in &out.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn eval(o: &Options) -> Result<()> {
    let mode = o
        .mode
        .ok_or_else(|| usage("--mode is required (bleu, classify, centroid, diagnostics)"))?;
    let ckpt = o.checkpoint()?;
    let vocab_dir = match (&o.vocab_dir, &o.checkpoint) {
        (Some(d), _) => d.clone(),
        (None, Some(p)) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => unreachable!("checkpoint loaded"),
    };
    let (vs, vt) = Options::load_vocabs(&vocab_dir)?;
    if vs.len() != ckpt.config.source_vocab || vt.len() != ckpt.config.target_vocab {
        return Err(usage(format!(
            "vocabularies in {} ({}/{}) do not match the checkpoint ({}/{})",
            vocab_dir.display(),
            vs.len(),
            vt.len(),
            ckpt.config.source_vocab,
            ckpt.config.target_vocab
        )));
    }
    let corpus = o.corpus()?;
    let encoded = EncodedCorpus::new(&corpus, &vs, &vt, ckpt.config.max_len);
    let model = ckpt.model();
    match mode {
        EvalMode::Bleu => {
            require_stage(&ckpt, &[Stage::Pretrain, Stage::Finetune], "bleu")?;
            let hyps = translate(&model, &encoded.source, &vt, 64)?;
            let refs: Vec<Vec<String>> = corpus.targets().map(<[String]>::to_vec).collect();
            let score = bleu(&hyps, &refs, 4)?;
            if let Some(out) = &o.out {
                fs::create_dir_all(out).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
                let text: String = hyps.iter().map(|h| h.join(" ") + "\n").collect();
                let path = out.join("hypotheses.txt");
                fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
            println!("BLEU {score:.2}");
        }
        EvalMode::Classify => {
            require_stage(&ckpt, &[Stage::Ce, Stage::Finetune], "classify")?;
            let base_path = o.baseline.as_ref().ok_or_else(|| usage("classify needs --baseline"))?;
            let base = Checkpoint::load(base_path)?;
            if base.config.dim != ckpt.config.dim {
                return Err(usage("baseline and enhanced checkpoints have different widths"));
            }
            let pooling = o.pooling.unwrap_or(ckpt.config.pooling);
            let (b, labels) = bilingual_embeddings(&base.model(), &encoded.source, &encoded.target, pooling)?;
            let (e, _) = bilingual_embeddings(&model, &encoded.source, &encoded.target, pooling)?;
            let r = run_protocol(&b, &e, &labels, &o.languages(), o.probe_config())?;
            if !r.ordering_holds() {
                log::warn!("a2 < a3 < a1 does not hold: {:.3} / {:.3} / {:.3}", r.a2, r.a3, r.a1);
            }
            print_json(&r.summary());
        }
        EvalMode::Centroid => {
            let pooling = o.pooling.unwrap_or(ckpt.config.pooling);
            let (e, labels) = bilingual_embeddings(&model, &encoded.source, &encoded.target, pooling)?;
            let sentence = run_centroid_protocol(&e, &labels, &o.languages(), o.probe_config())?;
            let word = shared_word_embeddings(&model, &vs, &vt)
                .and_then(|(w, l, _)| run_centroid_protocol(&w, &l, &o.languages(), o.probe_config()));
            let word = match word {
                Ok(r) => r.summary(),
                Err(err) => {
                    log::warn!("word-level centroid protocol skipped: {err}");
                    serde_json::Value::Null
                }
            };
            print_json(&json!({ "sentence": sentence.summary(), "word": word }));
        }
        EvalMode::Diagnostics => {
            let out = o.out.as_ref().ok_or_else(|| usage("diagnostics needs --out"))?;
            let report = export_diagnostics(&ckpt, &encoded, (&vs, &vt), out, &DiagnosticsConfig::default())?;
            print_json(&json!({
                "correlation": report.correlation.len(),
                "attention": report.attention.len(),
                "sentence_embeddings": report.sentence_embeddings,
                "word_embeddings": report.word_embeddings,
            }));
        }
    }
    Ok(())
}
