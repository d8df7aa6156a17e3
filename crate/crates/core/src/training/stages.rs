use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Stage};
use super::collapse::{CollapseMonitor, CollapseReport, CollapseStatus};
use super::metrics::{MetricRecord, MetricsSink};
use super::optim::{AdamConfig, OptimizerState, Schedule};
use crate::data::{batch_iter, Batch, EncodedCorpus};
use crate::error::{Error, Result};
use crate::losses::{barlow_twins_objective, CELossBreakdown, CrossCorrelation, DEFAULT_LAMBDA};
use crate::model::{Model, ModelConfig, ParamGroup, Session, Side};
use crate::numerics::{Pooling, Tensor, Var};

/// Largest number of CE epochs accepted.
pub const MAX_CE_EPOCHS: u64 = 1000;

/// Optimization settings for a translation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip_norm: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 4000,
            clip_norm: Some(1.0),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(
            Schedule {
                base_lr: self.lr,
                warmup_steps: self.warmup,
            },
            AdamConfig {
                clip_norm: self.clip_norm,
                ..AdamConfig::default()
            },
        )
    }
}

/// Settings of the context-enhancement stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CEConfig {
    pub lambda: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub pooling: Pooling,
    pub proj_dim: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip_norm: Option<f64>,
    pub shuffle: bool,
    /// Fixed unshuffled batches used for the per-epoch snapshots.
    pub eval_batches: usize,
    /// Watch the sentence embeddings for collapse.
    pub monitor: bool,
    /// Consecutive flagged batches that abort the run.
    pub collapse_patience: usize,
}

impl Default for CEConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epochs: 100,
            batch_size: 64,
            pooling: Pooling::Mean,
            proj_dim: 32,
            lr: 1e-3,
            warmup: 100,
            clip_norm: Some(1.0),
            shuffle: true,
            eval_batches: 8,
            monitor: true,
            collapse_patience: 4,
        }
    }
}

impl CEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.epochs > MAX_CE_EPOCHS {
            return Err(Error::Config(format!(
                "epochs {} exceeds the limit of {MAX_CE_EPOCHS}",
                self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "CE batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("projection dim must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.collapse_patience == 0 {
            return Err(Error::Config("collapse_patience must be positive".into()));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("eval_batches must be positive".into()));
        }
        Ok(())
    }
}

/// Loss statistics of the CE objective at the end of an epoch (0 = before
/// training).
#[derive(Debug, Clone, PartialEq)]
pub struct CESnapshot {
    pub epoch: u64,
    /// Mean over the evaluation batches.
    pub breakdown: CELossBreakdown,
    /// Correlation matrix of the first evaluation batch.
    pub correlation: CrossCorrelation,
}

#[derive(Debug, Clone)]
pub struct CEOutcome {
    pub checkpoint: Checkpoint,
    pub snapshots: Vec<CESnapshot>,
}

/// Where the decoder of the fine-tuning stage comes from.
#[derive(Debug, Clone, Copy)]
pub enum DecoderInit<'a> {
    Fresh,
    /// Decoder weights of the given checkpoint, or of the CE checkpoint
    /// itself when it carries them.
    Reuse(Option<&'a Checkpoint>),
}

/// Graph nodes of one CE forward pass.
pub struct CEForward {
    pub sigma_source: Var,
    pub sigma_target: Var,
    pub correlation: Var,
    pub loss: Var,
}

/// Encodes both sides with the shared encoder, pools, projects and applies
/// the Barlow Twins objective.
pub fn ce_forward(session: &mut Session<'_>, batch: &Batch, pooling: Pooling, lambda: f64) -> Result<CEForward> {
    let ls = session.encode(&batch.source, Side::Source)?;
    let lt = session.encode(&batch.target, Side::Target)?;
    let sigma_source = session.pool(&ls, pooling)?;
    let sigma_target = session.pool(&lt, pooling)?;
    let zs = session.project(sigma_source)?;
    let zt = session.project(sigma_target)?;
    let (correlation, loss) = barlow_twins_objective(&mut session.graph, zs, zt, lambda)?;
    Ok(CEForward {
        sigma_source,
        sigma_target,
        correlation,
        loss,
    })
}

/// Teacher-forced token-mean cross-entropy of a batch.
pub fn translation_forward(session: &mut Session<'_>, batch: &Batch) -> Result<Var> {
    let latent = session.encode(&batch.source, Side::Source)?;
    let input = batch.target.shifted(false);
    let gold = batch.target.shifted(true);
    let logits = session.decode(&latent, &input)?;
    session.graph.cross_entropy(logits, &gold.ids, &gold.mask)
}

/// Gradients of every bound trainable parameter, sorted by parameter index,
/// and the loss value.
fn gradients(session: Session<'_>, loss: Var) -> Result<(Vec<(usize, Vec<f64>)>, f64)> {
    let mut grads = session.graph.backward(loss)?;
    let mut pairs: Vec<(usize, Vec<f64>)> = session
        .bindings()
        .filter_map(|(i, v)| grads.take(v).map(|g| (i, g)))
        .collect();
    pairs.sort_by_key(|(i, _)| *i);
    Ok((pairs, session.graph.scalar(loss)))
}

fn stage_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

fn require_corpus(corpus: &EncodedCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    Ok(())
}

fn diverged(model: &Model, stage: Stage, seed: u64, step: u64, loss: f64, opt: &OptimizerState) -> Error {
    let mut params = model.params.clone();
    params.round_to_f32();
    let checkpoint = Checkpoint {
        config: model.config.clone(),
        stage,
        seed,
        step,
        params,
        optimizer: Some(opt.clone()),
    };
    Error::Divergence {
        stage: stage.label(),
        step: step as usize,
        loss,
        checkpoint: Box::new(checkpoint),
    }
}

/// Runs `cfg.steps` teacher-forced updates of embeddings, encoder and
/// decoder, cycling over reshuffled epochs of the corpus.
fn translation_loop(
    model: &mut Model,
    corpus: &EncodedCorpus,
    cfg: &TrainConfig,
    seed: u64,
    stage: Stage,
    sink: &mut dyn MetricsSink,
) -> Result<OptimizerState> {
    let mut opt = cfg.optimizer();
    let trainable = [ParamGroup::Embedding, ParamGroup::Encoder, ParamGroup::Decoder];
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < cfg.steps {
        let batches: Vec<Batch> = batch_iter(corpus, cfg.batch_size, cfg.shuffle, stage_seed(seed, epoch)).collect();
        epoch += 1;
        for batch in batches {
            if step == cfg.steps {
                break;
            }
            step += 1;
            let (pairs, loss) = {
                let mut session = model.session(&trainable).with_dropout(stage_seed(seed, step) ^ 0x5151);
                let loss = translation_forward(&mut session, &batch)?;
                let value = session.graph.scalar(loss);
                if !value.is_finite() {
                    return Err(diverged(model, stage, seed, step, value, &opt));
                }
                gradients(session, loss)?
            };
            if let Err(Error::NonFinite(_)) = opt.step(&mut model.params, &pairs) {
                return Err(diverged(model, stage, seed, step, f64::NAN, &opt));
            }
            log::debug!("{} step {step}: loss {loss:.6}", stage.label());
            sink.record(MetricRecord::translation(stage.label(), step, loss))?;
        }
    }
    Ok(opt)
}

/// Trains a freshly initialized translation model. Initial parameters are
/// rounded to `f32`, the checkpoint precision.
pub fn train_translation(
    config: &ModelConfig,
    corpus: &EncodedCorpus,
    train: &TrainConfig,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    train.validate()?;
    require_corpus(corpus)?;
    let mut model = Model::new(config.clone(), seed)?;
    model.params.round_to_f32();
    let opt = translation_loop(&mut model, corpus, train, seed, Stage::Pretrain, sink)?;
    Checkpoint::capture(&model, Stage::Pretrain, seed, train.steps, Some(&opt))
}

fn eval_batches(corpus: &EncodedCorpus, cfg: &CEConfig) -> Vec<Batch> {
    batch_iter(corpus, cfg.batch_size, false, 0)
        .filter(|b| b.size() >= 2)
        .take(cfg.eval_batches)
        .collect()
}

fn snapshot(model: &Model, batches: &[Batch], cfg: &CEConfig, epoch: u64) -> Result<CESnapshot> {
    let mut sum = CELossBreakdown {
        total: 0.0,
        invariance_term: 0.0,
        redundancy_term: 0.0,
        lambda: cfg.lambda,
    };
    let mut first = None;
    for batch in batches {
        let mut session = model.session(&[]);
        let f = ce_forward(&mut session, batch, cfg.pooling, cfg.lambda)?;
        let c = CrossCorrelation {
            values: session.graph.value(f.correlation).clone(),
        };
        let b = CELossBreakdown::from_correlation(&c, cfg.lambda);
        sum.total += b.total;
        sum.invariance_term += b.invariance_term;
        sum.redundancy_term += b.redundancy_term;
        first.get_or_insert(c);
    }
    let n = batches.len() as f64;
    sum.total /= n;
    sum.invariance_term /= n;
    sum.redundancy_term /= n;
    Ok(CESnapshot {
        epoch,
        breakdown: sum,
        correlation: first.expect("at least one evaluation batch"),
    })
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::raw(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Context enhancement on an in-memory model: trains embeddings, encoder
/// and a projection head with the Barlow Twins loss on pooled sentence
/// embeddings of both languages. The decoder, if any, is left untouched.
pub fn context_enhance_model(
    mut model: Model,
    corpus: &EncodedCorpus,
    cfg: &CEConfig,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<CEOutcome> {
    cfg.validate()?;
    require_corpus(corpus)?;
    if !model.params.has_group(ParamGroup::Encoder) {
        return Err(Error::Checkpoint("context enhancement needs encoder parameters".into()));
    }
    model.config.pooling = cfg.pooling;
    if !model.has_projection() || model.config.proj_dim != cfg.proj_dim {
        model.config.proj_dim = cfg.proj_dim;
        model.init_projection(seed);
    }
    model.params.round_to_f32();
    let eval = eval_batches(corpus, cfg);
    if eval.is_empty() {
        return Err(Error::BatchTooSmall {
            op: "context_enhance",
            rows: corpus.len(),
        });
    }
    let mut snapshots = vec![snapshot(&model, &eval, cfg, 0)?];
    let mut opt = OptimizerState::new(
        Schedule {
            base_lr: cfg.lr,
            warmup_steps: cfg.warmup,
        },
        AdamConfig {
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
    );
    let mut monitor = CollapseMonitor::new();
    let mut flagged = 0usize;
    let trainable = [ParamGroup::Embedding, ParamGroup::Encoder, ParamGroup::Projection];
    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(corpus, cfg.batch_size, cfg.shuffle, stage_seed(seed, epoch));
        for (b, batch) in batches.filter(|b| b.size() >= 2).enumerate() {
            let (pairs, loss, sigma) = {
                let mut session = model.session(&trainable);
                let f = ce_forward(&mut session, &batch, cfg.pooling, cfg.lambda)?;
                let sigma = stack_rows(session.graph.value(f.sigma_source), session.graph.value(f.sigma_target));
                let (pairs, loss) = gradients(session, f.loss)?;
                (pairs, loss, sigma)
            };
            if !loss.is_finite() {
                return Err(diverged(&model, Stage::Ce, seed, epoch, loss, &opt));
            }
            if cfg.monitor {
                let report = monitor.observe(&sigma, epoch, b as u64);
                if report.status == CollapseStatus::Collapsed {
                    flagged += 1;
                    log::warn!("collapse flag at epoch {epoch} batch {b}: {}", report.reason);
                    if flagged >= cfg.collapse_patience {
                        return Err(Error::Collapse(Box::new(report)));
                    }
                } else {
                    flagged = 0;
                }
            }
            if let Err(Error::NonFinite(_)) = opt.step(&mut model.params, &pairs) {
                return Err(diverged(&model, Stage::Ce, seed, epoch, f64::NAN, &opt));
            }
        }
        let snap = snapshot(&model, &eval, cfg, epoch)?;
        log::info!(
            "ce epoch {epoch}: loss {:.6} invariance {:.6} off-diagonal {:.6}",
            snap.breakdown.total,
            snap.breakdown.invariance_term,
            snap.breakdown.redundancy_term
        );
        sink.record(MetricRecord::ce(epoch, &snap.breakdown))?;
        snapshots.push(snap);
    }
    let checkpoint = Checkpoint::capture(&model, Stage::Ce, seed, cfg.epochs, Some(&opt))?;
    Ok(CEOutcome { checkpoint, snapshots })
}

/// Context enhancement starting from a checkpoint holding an encoder.
pub fn context_enhance(
    start: &Checkpoint,
    corpus: &EncodedCorpus,
    cfg: &CEConfig,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<CEOutcome> {
    context_enhance_model(start.model(), corpus, cfg, seed, sink)
}

/// Builds a model for context enhancement without translation pre-training:
/// fresh encoder, optional pre-trained `(source, target)` embedding tables.
pub fn encoder_only_model(config: &ModelConfig, tables: Option<(Tensor, Tensor)>, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut model = Model::from_params(config.clone(), Default::default());
    model.init_embeddings(seed);
    if let Some((src, tgt)) = tables {
        for (name, t, rows) in [
            ("embed.src", src, config.source_vocab),
            ("embed.tgt", tgt, config.target_vocab),
        ] {
            if t.shape() != [rows, config.embed_dim] {
                return Err(Error::Dimension {
                    op: "embedding table",
                    lhs: vec![rows, config.embed_dim],
                    rhs: t.shape().to_vec(),
                });
            }
            model.params.insert(name, t);
        }
    }
    model.init_encoder(seed);
    Ok(model)
}

/// Attaches a decoder to a CE-trained encoder and trains the pair for
/// translation. Pooling and the projection head are not used.
pub fn finetune_translation(
    ce: &Checkpoint,
    corpus: &EncodedCorpus,
    train: &TrainConfig,
    seed: u64,
    decoder: DecoderInit<'_>,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    train.validate()?;
    require_corpus(corpus)?;
    if ce.stage != Stage::Ce {
        return Err(Error::Checkpoint(format!(
            "fine-tuning needs a ce checkpoint, got {}",
            ce.stage.label()
        )));
    }
    let mut model = ce.model();
    model.params.remove_group(ParamGroup::Projection);
    match decoder {
        DecoderInit::Fresh => model.init_decoder(seed),
        DecoderInit::Reuse(source) => {
            let from = source.map(|c| &c.params).unwrap_or(&ce.params);
            let dec = from.group(ParamGroup::Decoder);
            if dec.is_empty() {
                return Err(Error::Checkpoint("no decoder parameters to reuse".into()));
            }
            model.params.remove_group(ParamGroup::Decoder);
            for (n, t) in dec.iter() {
                model.params.insert(n, t.clone());
            }
        }
    }
    model.params.round_to_f32();
    let opt = translation_loop(&mut model, corpus, train, seed, Stage::Finetune, sink)?;
    Checkpoint::capture(&model, Stage::Finetune, seed, train.steps, Some(&opt))
}

/// Collapse report of a stream of embedding batches, for offline use.
pub fn collapse_monitor<'a>(batches: impl IntoIterator<Item = &'a Tensor>) -> Option<CollapseReport> {
    let mut monitor = CollapseMonitor::new();
    let mut last = None;
    for (i, b) in batches.into_iter().enumerate() {
        let r = monitor.observe(b, 0, i as u64);
        let stop = r.status == CollapseStatus::Collapsed;
        last = Some(r);
        if stop {
            break;
        }
    }
    last
}
