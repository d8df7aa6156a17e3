use std::fs;
use std::path::PathBuf;

use super::checkpoint::Checkpoint;
use super::metrics::MetricsSink;
use super::stages::{
    context_enhance, context_enhance_model, encoder_only_model, finetune_translation, train_translation, CEConfig,
    CESnapshot, DecoderInit, TrainConfig,
};
use crate::data::EncodedCorpus;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

/// Everything the three-stage pipeline needs besides the corpus and seed.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub ce: CEConfig,
    pub finetune: TrainConfig,
    /// Start CE from a fresh encoder (and `embeddings`, if given) instead of
    /// a translation-trained one.
    pub skip_pretrain: bool,
    /// Pre-trained `(source, target)` embedding tables.
    pub embeddings: Option<(Tensor, Tensor)>,
    /// Reuse the pre-training decoder when fine-tuning instead of a fresh one.
    pub reuse_decoder: bool,
    /// Directory receiving `<stage>-<step>.ckpt` files as stages finish.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub pretrain: Option<Checkpoint>,
    pub ce: Checkpoint,
    pub finetune: Checkpoint,
    pub snapshots: Vec<CESnapshot>,
    /// Files written, in stage order.
    pub files: Vec<PathBuf>,
}

fn persist(ckpt: &Checkpoint, out: Option<&PathBuf>, files: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = out {
        let path = dir.join(ckpt.file_name());
        ckpt.save(&path)?;
        log::info!("wrote {}", path.display());
        files.push(path);
    }
    Ok(())
}

/// Translation pre-training, context enhancement and fine-tuning in order.
/// Each checkpoint is written as soon as its stage finishes, so a failing
/// stage leaves the earlier ones on disk.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    corpus: &EncodedCorpus,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<PipelineOutput> {
    cfg.model.validate()?;
    cfg.pretrain.validate()?;
    cfg.ce.validate()?;
    cfg.finetune.validate()?;
    if cfg.skip_pretrain && cfg.reuse_decoder {
        return Err(Error::Config("--reuse-decoder needs the pre-training stage".into()));
    }
    let out = cfg.out_dir.as_ref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut files = Vec::new();
    let (pretrain, ce) = if cfg.skip_pretrain {
        let model = encoder_only_model(&cfg.model, cfg.embeddings.clone(), seed)?;
        (
            None,
            context_enhance_model(model, corpus, &cfg.ce, seed.wrapping_add(1), sink)?,
        )
    } else {
        let model_cfg = match &cfg.embeddings {
            Some(_) => return Err(Error::Config("pre-trained embeddings require --skip-pretrain".into())),
            None => &cfg.model,
        };
        let pre = train_translation(model_cfg, corpus, &cfg.pretrain, seed, sink)?;
        persist(&pre, out, &mut files)?;
        let ce = context_enhance(&pre, corpus, &cfg.ce, seed.wrapping_add(1), sink)?;
        (Some(pre), ce)
    };
    persist(&ce.checkpoint, out, &mut files)?;
    let decoder = if cfg.reuse_decoder {
        DecoderInit::Reuse(pretrain.as_ref())
    } else {
        DecoderInit::Fresh
    };
    let finetune = finetune_translation(
        &ce.checkpoint,
        corpus,
        &cfg.finetune,
        seed.wrapping_add(2),
        decoder,
        sink,
    )?;
    persist(&finetune, out, &mut files)?;
    Ok(PipelineOutput {
        pretrain,
        ce: ce.checkpoint,
        finetune,
        snapshots: ce.snapshots,
        files,
    })
}
