use audiocolor::audio::AudioFrontend;
use audiocolor::backbone::BackboneConfig;
use audiocolor::checkpoint::{CheckpointBundle, Stage};
use audiocolor::data::{generate_samples, to_samples, Sample, Split, SyntheticSceneSpec};
use audiocolor::error::Error;
use audiocolor::metrics::{ImageMetrics, Psnr};
use audiocolor::model::{Model, ModelConfig, ParamGroup};
use audiocolor::parallel::Execution;
use audiocolor::pipeline::{
    evaluate, train_stage, AblationMode, Colorizer, StageConfig, StageData, TrainContext, TrainingConfig,
};
use audiocolor::relevance::RelevanceConfig;
use audiocolor::semantics::SemanticConfig;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            base_channels: 8,
            depth: 2,
            head_hidden: 8,
            ..Default::default()
        },
        semantic: SemanticConfig {
            embedding_dim: 6,
            visual_channels: vec![4, 8],
            visual_hidden: 8,
            audio_channels: vec![4, 8],
            a2v_hidden: 8,
            cond_hidden: 8,
        },
        relevance: RelevanceConfig {
            hidden: 8,
            projection_dim: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn stage_cfg(stage: Stage, epochs: usize) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 8,
        ..StageConfig::defaults(stage)
    }
}

fn samples(split: Split, n: usize, seed: u64) -> Vec<Sample> {
    let fe = AudioFrontend::new(tiny_model().spectrogram).unwrap();
    let raw = generate_samples(&SyntheticSceneSpec::default(), split, n, seed, Execution::default()).unwrap();
    to_samples(&raw, &fe, Execution::default())
}

fn train(
    stage: Stage,
    cfg: &StageConfig,
    train: &[Sample],
    input: Option<&CheckpointBundle>,
) -> Result<CheckpointBundle, Error> {
    let mut ctx = TrainContext::default();
    train_stage(stage, tiny_model(), StageData { train, val: &[] }, cfg, input, &mut ctx)
}

/// Stage 1, 2, RNet and 3 at one epoch each.
fn quick_chain(data: &[Sample]) -> Vec<CheckpointBundle> {
    let t = TrainingConfig::default();
    let mut out: Vec<CheckpointBundle> = Vec::new();
    for stage in [Stage::Stage1, Stage::Stage2, Stage::Rnet, Stage::Stage3] {
        let cfg = StageConfig {
            epochs: 1,
            ..t.for_stage(stage).clone()
        };
        out.push(train(stage, &cfg, data, out.last()).unwrap());
    }
    out
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = samples(Split::Train, 16, 1);
    let full = train(Stage::Stage1, &stage_cfg(Stage::Stage1, 3), &data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.json");
    let mut ctx = TrainContext {
        checkpoint_path: Some(path.clone()),
        ..Default::default()
    };
    let d = StageData { train: &data, val: &[] };
    train_stage(
        Stage::Stage1,
        tiny_model(),
        d,
        &stage_cfg(Stage::Stage1, 2),
        None,
        &mut ctx,
    )
    .unwrap();
    let partial = CheckpointBundle::load(&path).unwrap();
    assert_eq!(partial.epochs_completed, 2);
    let resumed = train(Stage::Stage1, &stage_cfg(Stage::Stage1, 3), &data, Some(&partial)).unwrap();
    assert_eq!(resumed.to_json().unwrap(), full.to_json().unwrap());
}

#[test]
fn later_stages_name_their_missing_prerequisite() {
    let data = samples(Split::Train, 8, 2);
    for stage in [Stage::Stage2, Stage::Rnet, Stage::Stage3] {
        match train(stage, &stage_cfg(stage, 1), &data, None) {
            Err(Error::MissingStage { missing, .. }) => {
                assert!(missing.contains(stage.prerequisite().unwrap().as_str()), "{missing}")
            }
            other => panic!("{stage}: expected MissingStage, got {other:?}"),
        }
    }
    let s1 = train(Stage::Stage1, &stage_cfg(Stage::Stage1, 1), &data, None).unwrap();
    let err = train(Stage::Stage3, &stage_cfg(Stage::Stage3, 1), &data, Some(&s1)).unwrap_err();
    assert!(err.to_string().contains("audio"), "{err}");
}

#[test]
fn fully_masked_stage1_never_touches_the_guidance_path() {
    let data = samples(Split::Train, 16, 3);
    let cfg = StageConfig {
        mask_prob: 1.0,
        ..stage_cfg(Stage::Stage1, 2)
    };
    let trained = train(Stage::Stage1, &cfg, &data, None).unwrap().to_model().unwrap();
    let fresh = Model::new(tiny_model()).unwrap();
    assert_eq!(
        trained.group_bytes(ParamGroup::CondMlp),
        fresh.group_bytes(ParamGroup::CondMlp)
    );
    assert_eq!(
        trained.group_bytes(ParamGroup::Visual),
        fresh.group_bytes(ParamGroup::Visual)
    );
    assert_ne!(
        trained.group_bytes(ParamGroup::Backbone),
        fresh.group_bytes(ParamGroup::Backbone)
    );
}

#[test]
fn stage1_loss_halves() {
    let data = samples(Split::Train, 48, 4);
    let cfg = StageConfig {
        lr: 1e-3,
        ..stage_cfg(Stage::Stage1, 6)
    };
    let b = train(Stage::Stage1, &cfg, &data, None).unwrap();
    let first = b.history.first().unwrap().loss;
    let last = b.history.last().unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn audio_free_inference_matches_visual_only_model() {
    let data = samples(Split::Train, 12, 5);
    let chain = quick_chain(&data);
    let visual = Colorizer::from_bundle(&chain[0]).unwrap();
    let full = Colorizer::from_bundle(&chain[3]).unwrap();
    let test = samples(Split::Test, 4, 6);
    for s in &test {
        let a = full.infer(&s.gray, None, AblationMode::Full).unwrap();
        let b = visual.infer(&s.gray, None, AblationMode::MissingAudio).unwrap();
        assert!(a.r.is_zero());
        assert_eq!(a.ab, b.ab);
        let with_audio = full.infer(&s.gray, s.audio.as_ref(), AblationMode::NoR).unwrap();
        assert_eq!(with_audio.r.value(), 1.0);
    }
    // no_multistep needs a jointly trained checkpoint
    assert!(full.infer(&test[0].gray, None, AblationMode::NoMultistep).is_err());
}

#[test]
fn evaluate_rejects_empty_input_and_counts_rows() {
    let data = samples(Split::Train, 8, 7);
    let c = Colorizer::from_bundle(&train(Stage::Stage1, &stage_cfg(Stage::Stage1, 1), &data, None).unwrap()).unwrap();
    assert!(evaluate(&c, &[], AblationMode::MissingAudio, None, Execution::default()).is_err());
    let r = evaluate(&c, &data, AblationMode::MissingAudio, None, Execution::default()).unwrap();
    assert_eq!(r.images.len(), data.len());
    assert_eq!(r.summary().count, data.len());
    assert!(r.hue_accuracy.is_some() && r.ab_mse.is_some());
}

#[test]
fn ground_truth_scores_perfectly() {
    for s in samples(Split::Test, 4, 8) {
        let m = ImageMetrics::compute(&s.id, &s.color, &s.color, None).unwrap();
        assert!(m.psnr_infinite && m.psnr_db.is_none());
        assert_eq!(m.ssim, 1.0);
    }
    assert_eq!(Psnr::Infinite.db(), None);
}

#[test]
fn checkpoint_survives_disk_round_trip() {
    let data = samples(Split::Train, 8, 9);
    let b = train(Stage::Stage1, &stage_cfg(Stage::Stage1, 1), &data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    b.save(&path).unwrap();
    let back = CheckpointBundle::load(&path).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.to_model().unwrap(), b.to_model().unwrap());
}
