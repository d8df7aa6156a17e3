mod common;

use ce_nmt::data::synthetic::identity_copy;
use ce_nmt::data::{EncodedCorpus, Vocabulary};
use ce_nmt::model::{Model, ModelConfig, ParamGroup};
use ce_nmt::training::{
    context_enhance, context_enhance_model, encoder_only_model, finetune_translation, run_pipeline, train_translation,
    Checkpoint, DecoderInit, MetricRecord, NullSink, PipelineConfig, Stage,
};
use ce_nmt::Error;
use common::{ce_config, translation_config, Toy};

fn tiny(toy: &Toy) -> ModelConfig {
    ModelConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        ffn_dim: 32,
        embed_dim: 16,
        proj_dim: 8,
        ..toy.config.clone()
    }
}

fn pretrained(toy: &Toy, steps: u64) -> Checkpoint {
    train_translation(&tiny(toy), &toy.encoded, &translation_config(steps), 3, &mut NullSink).unwrap()
}

#[test]
fn zero_steps_keep_initial_parameters() {
    let toy = Toy::new(100, 10);
    let ckpt = pretrained(&toy, 0);
    let mut fresh = Model::new(tiny(&toy), 3).unwrap();
    fresh.params.round_to_f32();
    assert_eq!(ckpt.params, fresh.params);
    assert_eq!(ckpt.step, 0);
}

#[test]
fn zero_epochs_keep_encoder() {
    let toy = Toy::new(100, 10);
    let pre = pretrained(&toy, 5);
    let out = context_enhance(&pre, &toy.encoded, &ce_config(0), 4, &mut NullSink).unwrap();
    for g in [ParamGroup::Embedding, ParamGroup::Encoder, ParamGroup::Decoder] {
        assert_eq!(out.checkpoint.params.group(g), pre.params.group(g));
    }
    assert_eq!(out.snapshots.len(), 1);
    assert_eq!(out.checkpoint.stage, Stage::Ce);
}

#[test]
fn fixed_seed_runs_match() {
    let toy = Toy::new(120, 10);
    let a = pretrained(&toy, 12);
    let b = pretrained(&toy, 12);
    assert_eq!(a, b);
    let ca = context_enhance(&a, &toy.encoded, &ce_config(2), 5, &mut NullSink).unwrap();
    let cb = context_enhance(&b, &toy.encoded, &ce_config(2), 5, &mut NullSink).unwrap();
    assert_eq!(ca.checkpoint, cb.checkpoint);
    let other = train_translation(&tiny(&toy), &toy.encoded, &translation_config(12), 4, &mut NullSink).unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn ce_updates_encoder_but_not_decoder() {
    let toy = Toy::new(150, 10);
    let pre = pretrained(&toy, 10);
    let out = context_enhance(&pre, &toy.encoded, &ce_config(2), 6, &mut NullSink).unwrap();
    let ce = &out.checkpoint;
    assert_eq!(
        ce.params.group(ParamGroup::Decoder),
        pre.params.group(ParamGroup::Decoder)
    );
    assert_ne!(
        ce.params.group(ParamGroup::Encoder),
        pre.params.group(ParamGroup::Encoder)
    );
    assert!(ce.params.has_group(ParamGroup::Projection));
    assert_eq!(out.snapshots.len(), 3);
}

#[test]
fn metrics_lines_follow_the_stage_budgets() {
    let toy = Toy::new(150, 10);
    let mut log: Vec<MetricRecord> = Vec::new();
    let pre = train_translation(&tiny(&toy), &toy.encoded, &translation_config(7), 3, &mut log).unwrap();
    let ce = context_enhance(&pre, &toy.encoded, &ce_config(3), 4, &mut log).unwrap();
    finetune_translation(
        &ce.checkpoint,
        &toy.encoded,
        &translation_config(5),
        5,
        DecoderInit::Fresh,
        &mut log,
    )
    .unwrap();
    let count = |stage: &str| log.iter().filter(|r| r.stage == stage).count();
    assert_eq!((count("pretrain"), count("ce"), count("finetune")), (7, 3, 5));
    let ce_lines: Vec<_> = log.iter().filter(|r| r.stage == "ce").collect();
    assert_eq!(ce_lines.iter().map(|r| r.step_or_epoch).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(ce_lines
        .iter()
        .all(|r| r.lambda == Some(5e-3) && r.invariance_term.is_some()));
    assert!(log.iter().all(|r| r.wall_ms.is_none()));
}

#[test]
fn finetune_drops_projection_and_can_reuse_decoder() {
    let toy = Toy::new(100, 10);
    let pre = pretrained(&toy, 5);
    let ce = context_enhance(&pre, &toy.encoded, &ce_config(1), 4, &mut NullSink)
        .unwrap()
        .checkpoint;
    let reused = finetune_translation(
        &ce,
        &toy.encoded,
        &translation_config(0),
        5,
        DecoderInit::Reuse(Some(&pre)),
        &mut NullSink,
    )
    .unwrap();
    assert!(!reused.params.has_group(ParamGroup::Projection));
    assert_eq!(
        reused.params.group(ParamGroup::Decoder),
        pre.params.group(ParamGroup::Decoder)
    );
    let fresh = finetune_translation(
        &ce,
        &toy.encoded,
        &translation_config(0),
        5,
        DecoderInit::Fresh,
        &mut NullSink,
    )
    .unwrap();
    assert_ne!(
        fresh.params.group(ParamGroup::Decoder),
        pre.params.group(ParamGroup::Decoder)
    );
    assert_eq!(
        fresh.params.group(ParamGroup::Encoder),
        ce.params.group(ParamGroup::Encoder)
    );
    let trained = finetune_translation(
        &ce,
        &toy.encoded,
        &translation_config(3),
        5,
        DecoderInit::Fresh,
        &mut NullSink,
    )
    .unwrap();
    assert_eq!(trained.model().projection_calls(), 0);
    assert_eq!(trained.stage, Stage::Finetune);
}

#[test]
fn finetune_requires_a_ce_checkpoint() {
    let toy = Toy::new(60, 10);
    let pre = pretrained(&toy, 0);
    let err = finetune_translation(
        &pre,
        &toy.encoded,
        &translation_config(1),
        1,
        DecoderInit::Fresh,
        &mut NullSink,
    );
    assert!(err.is_err());
}

#[test]
fn skip_pretrain_pipeline_writes_two_checkpoints() {
    let toy = Toy::new(100, 10);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        model: tiny(&toy),
        pretrain: translation_config(4),
        ce: ce_config(1),
        finetune: translation_config(2),
        skip_pretrain: true,
        embeddings: None,
        reuse_decoder: false,
        out_dir: Some(dir.path().to_path_buf()),
    };
    let out = run_pipeline(&cfg, &toy.encoded, 9, &mut NullSink).unwrap();
    assert!(out.pretrain.is_none());
    assert_eq!(out.files.len(), 2);
    let names: Vec<String> = out
        .files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into())
        .collect();
    assert_eq!(names, ["ce-1.ckpt", "finetune-2.ckpt"]);
    assert_eq!(Checkpoint::load(&out.files[1]).unwrap(), out.finetune);

    let bad = PipelineConfig {
        reuse_decoder: true,
        ..cfg
    };
    assert!(matches!(
        run_pipeline(&bad, &toy.encoded, 9, &mut NullSink),
        Err(Error::Config(_))
    ));
}

#[test]
fn full_pipeline_writes_three_checkpoints() {
    let toy = Toy::new(100, 10);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        model: tiny(&toy),
        pretrain: translation_config(3),
        ce: ce_config(1),
        finetune: translation_config(2),
        skip_pretrain: false,
        embeddings: None,
        reuse_decoder: true,
        out_dir: Some(dir.path().to_path_buf()),
    };
    let out = run_pipeline(&cfg, &toy.encoded, 9, &mut NullSink).unwrap();
    assert_eq!(out.files.len(), 3);
    for f in &out.files {
        assert!(f.exists());
    }
}

#[test]
fn injected_nan_reports_divergence() {
    let toy = Toy::new(100, 10);
    let mut pre = pretrained(&toy, 2);
    let i = pre.params.position("enc.ln.g").unwrap();
    pre.params.value_mut(i).data_mut()[0] = f64::NAN;
    match context_enhance(&pre, &toy.encoded, &ce_config(2), 4, &mut NullSink) {
        Err(Error::Divergence { stage, checkpoint, .. }) => {
            assert_eq!(stage, "ce");
            assert!(checkpoint.params.get("enc.ln.g").is_some());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.checkpoint.step)),
    }
}

#[test]
fn tied_embeddings_abort_in_the_first_epoch() {
    let toy = Toy::new(300, 10);
    let mut pre = pretrained(&toy, 2);
    for name in ["enc.ln.g", "enc.ln.b"] {
        let i = pre.params.position(name).unwrap();
        pre.params.value_mut(i).data_mut().fill(0.0);
    }
    match context_enhance(&pre, &toy.encoded, &ce_config(3), 4, &mut NullSink) {
        Err(Error::Collapse(r)) => assert_eq!(r.epoch, 1),
        other => panic!("expected collapse, got {:?}", other.map(|o| o.checkpoint.step)),
    }
    let quiet = ce_nmt::training::CEConfig {
        monitor: false,
        ..ce_config(1)
    };
    assert!(context_enhance(&pre, &toy.encoded, &quiet, 4, &mut NullSink).is_ok());
}

#[test]
fn encoder_only_model_starts_from_given_tables() {
    let toy = Toy::new(80, 10);
    let cfg = tiny(&toy);
    let src = ce_nmt::Tensor::new(
        vec![cfg.source_vocab, cfg.embed_dim],
        vec![0.5; cfg.source_vocab * cfg.embed_dim],
    )
    .unwrap();
    let tgt = ce_nmt::Tensor::new(
        vec![cfg.target_vocab, cfg.embed_dim],
        vec![-0.5; cfg.target_vocab * cfg.embed_dim],
    )
    .unwrap();
    let model = encoder_only_model(&cfg, Some((src.clone(), tgt)), 1).unwrap();
    assert!(!model.has_decoder());
    assert_eq!(model.params.get("embed.src").unwrap(), &src);
    let out = context_enhance_model(model, &toy.encoded, &ce_config(1), 2, &mut NullSink).unwrap();
    assert!(!out.checkpoint.params.has_group(ParamGroup::Decoder));
}

#[test]
fn identity_copy_is_learned() {
    let corpus = identity_copy(12, 400, 2, 6, 1);
    let vocab = Vocabulary::build(corpus.sources(), 1, 100).unwrap();
    let config = ModelConfig {
        depth: 1,
        dim: 32,
        heads: 2,
        ffn_dim: 64,
        embed_dim: 32,
        ..ModelConfig::small(vocab.len(), vocab.len())
    };
    let encoded = EncodedCorpus::new(&corpus, &vocab, &vocab, config.max_len);
    let mut log: Vec<MetricRecord> = Vec::new();
    let train = ce_nmt::training::TrainConfig {
        warmup: 50,
        ..translation_config(500)
    };
    train_translation(&config, &encoded, &train, 1, &mut log).unwrap();
    let tail: f64 = log[log.len() - 20..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    assert!(tail < 0.1, "final copy loss {tail}");
}
