//! Training stages, ablation-mode inference and evaluation.
//!
//! Order: stage 1 (guided colorization, visual semantics from the color
//! image), stage 2 (audio-to-visual semantic distillation), RNet, stage 3
//! (audio-conditioned fine-tuning of A2V). `Joint` trains every audio-path
//! module end to end from scratch for the `no_multistep` ablation.
//!
//! Batches are processed one sample per task; per-sample gradients are reduced
//! in batch order, so parallel and sequential runs give identical bits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioFrontend, Spectrogram};
use crate::backbone::BackboneConfig;
use crate::backbone::{normalized_target, to_ab_image, ColorizationBackbone};
use crate::checkpoint::{CheckpointBundle, EpochRecord, OptimizerState, Stage};
use crate::colorspace::{lab_to_rgb, merge_channels, rgb_to_lab, AbImage, GrayImage, RgbConversion};
use crate::conditioning::RelevanceScore;
use crate::data::{mask_ground_truth, BatchIterator, Sample};
use crate::error::{Error, Result};
use crate::losses::{bce_with_logits, semantic_loss, semantic_loss_grad, ColorLoss, SmoothL1};
use crate::metrics::{roc_auc, ImageMetrics, MetricsReport, PerceptualMetric};
use crate::model::{Model, ModelConfig, ParamGroup};
use crate::nn::{accumulate, params_finite, scale_params, zeros_like, Adam, Params, ParamsMut, ParamsRef};
use crate::parallel::Execution;
use crate::relevance::RelevanceConfig;
use crate::relevance::{sample_pairs, RelevancePair};
use crate::semantics::SemanticConfig;
use crate::semantics::{AudioFeature, VisualSemantic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stage 1 only: probability that a sample runs without semantics.
    #[serde(default)]
    pub mask_prob: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stage 3 only: take `r` from RNet instead of fixing it to 1.
    #[serde(default)]
    pub use_rnet_relevance: bool,
    /// Stage 3 only: also fine-tune the condition MLP.
    #[serde(default)]
    pub train_cond_mlp: bool,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let base = StageConfig {
            epochs: 20,
            batch_size: 16,
            lr: 2e-4,
            mask_prob: 0.0,
            seed: 0,
            use_rnet_relevance: false,
            train_cond_mlp: false,
        };
        match stage {
            Stage::Stage1 => StageConfig { mask_prob: 0.3, ..base },
            Stage::Stage2 => StageConfig {
                batch_size: 64,
                lr: 1e-3,
                ..base
            },
            Stage::Rnet => StageConfig {
                batch_size: 64,
                lr: 1e-3,
                ..base
            },
            Stage::Stage3 => StageConfig { epochs: 10, ..base },
            Stage::Joint => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Validation(format!("mask_prob {} outside [0,1]", self.mask_prob)));
        }
        Ok(())
    }
}

macro_rules! stage_default {
    ($name:ident, $stage:expr) => {
        fn $name() -> StageConfig {
            StageConfig::defaults($stage)
        }
    };
}
stage_default!(default_stage1, Stage::Stage1);
stage_default!(default_stage2, Stage::Stage2);
stage_default!(default_rnet, Stage::Rnet);
stage_default!(default_stage3, Stage::Stage3);
stage_default!(default_joint, Stage::Joint);

/// Per-stage settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    #[serde(default = "default_rnet")]
    pub rnet: StageConfig,
    #[serde(default = "default_stage3")]
    pub stage3: StageConfig,
    #[serde(default = "default_joint")]
    pub joint: StageConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1: default_stage1(),
            stage2: default_stage2(),
            rnet: default_rnet(),
            stage3: default_stage3(),
            joint: default_joint(),
        }
    }
}

impl TrainingConfig {
    pub fn for_stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
            Stage::Rnet => &self.rnet,
            Stage::Stage3 => &self.stage3,
            Stage::Joint => &self.joint,
        }
    }

    pub fn for_stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Stage1 => &mut self.stage1,
            Stage::Stage2 => &mut self.stage2,
            Stage::Rnet => &mut self.rnet,
            Stage::Stage3 => &mut self.stage3,
            Stage::Joint => &mut self.joint,
        }
    }
}

/// Callbacks and execution settings for a training run.
#[derive(Default)]
pub struct TrainContext<'a> {
    pub exec: Execution,
    /// Called after every epoch with the new record.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
    /// When set, the bundle is rewritten here after every epoch.
    pub checkpoint_path: Option<PathBuf>,
}

/// Datasets handed to a stage. `val` is used for held-out metrics only.
#[derive(Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
}

/// Everything carried from the input bundle into the output bundle.
struct RunState {
    stage: Stage,
    completed: Vec<Stage>,
    groups: BTreeSet<ParamGroup>,
    history: Vec<EpochRecord>,
    start_epoch: usize,
    run_config: serde_json::Value,
}

impl RunState {
    fn snapshot(&self, model: &Model, adam: &Adam, epochs_done: usize) -> CheckpointBundle {
        let groups: Vec<ParamGroup> = self.groups.iter().copied().collect();
        let mut b = CheckpointBundle::from_model(model, self.stage, &groups);
        b.completed = self.completed.clone();
        b.history = self.history.clone();
        b.epochs_completed = epochs_done;
        b.optimizer = Some(OptimizerState::capture(adam));
        b.run_config = self.run_config.clone();
        b
    }
}

/// Load the model and decide between a fresh stage and a resumed one.
fn prepare(
    stage: Stage,
    cfg: &StageConfig,
    input: Option<&CheckpointBundle>,
    fresh: impl FnOnce() -> Result<Model>,
) -> Result<(Model, Adam, RunState)> {
    cfg.validate()?;
    let run_config = serde_json::to_value(cfg)?;
    match input {
        Some(b) if b.stage == stage => {
            let adam = match &b.optimizer {
                Some(o) => o.restore()?,
                None => Adam::new(cfg.lr),
            };
            let mut adam = adam;
            adam.lr = cfg.lr;
            let state = RunState {
                stage,
                completed: b.completed.clone(),
                groups: b.groups(),
                history: b.history.clone(),
                start_epoch: b.epochs_completed,
                run_config,
            };
            Ok((b.to_model()?, adam, state))
        }
        Some(b) => {
            b.require_for(stage)?;
            let mut groups = b.groups();
            groups.extend(stage.produces().iter().copied());
            let mut completed = b.completed.clone();
            completed.push(stage);
            let state = RunState {
                stage,
                completed,
                groups,
                history: b.history.clone(),
                start_epoch: 0,
                run_config,
            };
            Ok((b.to_model()?, Adam::new(cfg.lr), state))
        }
        None => {
            if let Some(p) = stage.prerequisite() {
                return Err(Error::MissingStage {
                    missing: format!("{p} (no checkpoint given)"),
                    wanted: stage.to_string(),
                });
            }
            let state = RunState {
                stage,
                completed: vec![stage],
                groups: stage.produces().iter().copied().collect(),
                history: Vec::new(),
                start_epoch: 0,
                run_config,
            };
            Ok((fresh()?, Adam::new(cfg.lr), state))
        }
    }
}

/// Generic epoch loop. `items(epoch)` lists the work units of an epoch;
/// `per_sample` returns a loss and gradients for one unit; `apply` performs
/// the optimizer step with batch-mean gradients.
#[allow(clippy::too_many_arguments)]
fn train_loop<I, G, FI, FS, FA, FM>(
    model: &mut Model,
    adam: &mut Adam,
    state: &mut RunState,
    cfg: &StageConfig,
    ctx: &mut TrainContext<'_>,
    mut items: FI,
    per_sample: FS,
    mut apply: FA,
    mut metrics: FM,
) -> Result<CheckpointBundle>
where
    I: Sync,
    G: Params + Clone + Send,
    FI: FnMut(usize) -> Result<Vec<I>>,
    FS: Fn(&Model, &I, bool) -> Result<(f64, G)> + Sync + Send,
    FA: FnMut(&mut Model, &mut Adam, &G) -> Result<()>,
    FM: FnMut(&Model) -> Result<BTreeMap<String, f64>>,
{
    let mut last_good = state.snapshot(model, adam, state.start_epoch);
    for epoch in state.start_epoch..cfg.epochs {
        let units = items(epoch)?;
        if units.is_empty() {
            return Err(Error::Data(format!("{} has no training samples", state.stage)));
        }
        let batches = BatchIterator::new(units.len(), cfg.batch_size, cfg.seed, true)?.epoch(epoch);
        let n_batches = batches.len();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let step = (epoch * n_batches + b) as u64;
            let masks = mask_ground_truth(batch.len(), cfg.mask_prob, cfg.seed, step)?;
            let jobs: Vec<(usize, bool)> = batch.iter().copied().zip(masks).collect();
            let results = ctx.exec.map(&jobs, |&(i, masked)| per_sample(model, &units[i], masked));
            let mut total: Option<G> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => accumulate(t, &g),
                }
            }
            let mut grads = total.expect("non-empty batch");
            scale_params(&mut grads, 1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !params_finite(&grads) {
                return Err(Error::Diverged {
                    stage: state.stage.to_string(),
                    epoch: epoch + 1,
                    reason: format!("non-finite loss or gradient at batch {b}"),
                    last_good: Some(Box::new(last_good)),
                });
            }
            apply(model, adam, &grads)?;
            loss_sum += batch_loss;
            seen += batch.len();
        }
        let record = EpochRecord {
            stage: state.stage,
            epoch: epoch + 1,
            loss: loss_sum / seen as f64,
            metrics: metrics(model)?,
        };
        if let Some(cb) = ctx.on_epoch.as_deref_mut() {
            cb(&record);
        }
        state.history.push(record);
        last_good = state.snapshot(model, adam, epoch + 1);
        if let Some(p) = &ctx.checkpoint_path {
            last_good.save(p)?;
        }
    }
    Ok(last_good)
}

fn color_target(s: &Sample) -> Result<crate::tensor::FeatureMap> {
    Ok(normalized_target(&rgb_to_lab(&s.color)?.split().1))
}

fn color_loss_and_grad(
    out: &crate::tensor::FeatureMap,
    target: &crate::tensor::FeatureMap,
) -> Result<(f64, crate::tensor::FeatureMap)> {
    let loss = SmoothL1.loss(&out.data, &target.data)?.value;
    let g = SmoothL1.gradient(&out.data, &target.data)?;
    Ok((
        loss,
        crate::tensor::FeatureMap::new(out.channels, out.height, out.width, g)?,
    ))
}

fn check_frozen(before: &[(ParamGroup, Vec<u8>)], model: &Model) -> Result<()> {
    for (g, bytes) in before {
        if &model.group_bytes(*g) != bytes {
            return Err(Error::Checkpoint(format!(
                "frozen group {} changed during training",
                g.prefix()
            )));
        }
    }
    Ok(())
}

fn frozen_bytes(model: &Model, groups: &[ParamGroup]) -> Vec<(ParamGroup, Vec<u8>)> {
    groups.iter().map(|&g| (g, model.group_bytes(g))).collect()
}

fn with_audio(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().filter(|s| s.audio.is_some()).collect()
}

/// Stage 1: backbone, AdaIN heads, `E_s` and the condition MLP, trained with
/// the color loss. Unmasked samples are guided by the semantics of their own
/// color image at `r = 1`; masked ones run at `r = 0`.
pub fn train_stage1(
    model: ModelConfig,
    data: StageData<'_>,
    cfg: &StageConfig,
    input: Option<&CheckpointBundle>,
    ctx: &mut TrainContext<'_>,
) -> Result<CheckpointBundle> {
    let (mut m, mut adam, mut state) = prepare(Stage::Stage1, cfg, input, || Model::new(model))?;
    let frozen = frozen_bytes(&m, &[ParamGroup::AudioEncoder, ParamGroup::A2v, ParamGroup::Rnet]);
    let train = data.train;
    let per_sample = |m: &Model, &i: &usize, masked: bool| -> Result<(f64, _)> {
        let s = &train[i];
        let target = color_target(s)?;
        let (features, etape) = m.backbone.encode_tape(&s.gray)?;
        let mut grads = (zeros_like(&m.backbone), zeros_like(&m.visual), zeros_like(&m.cond_mlp));
        let guided = if masked {
            None
        } else {
            let (sem, vtape) = m.visual.forward_tape(&s.color)?;
            let (c, ctape) = m.cond_mlp.forward_tape(sem.as_slice())?;
            Some((vtape, c, ctape))
        };
        let (cond, r) = match &guided {
            Some((_, c, _)) => (Some(c.as_slice()), RelevanceScore::ONE),
            None => (None, RelevanceScore::ZERO),
        };
        let tape = m.backbone.decode_tape(&features, cond, r)?;
        let (loss, d_out) = color_loss_and_grad(tape.output(), &target)?;
        let (dfeat, dc) = m
            .backbone
            .decode_backward(&tape, &features, &d_out, Some(&mut grads.0), true);
        m.backbone.encode_backward(&etape, &features, dfeat, &mut grads.0);
        if let Some((vtape, _, ctape)) = &guided {
            let ds = m.cond_mlp.mlp.backward(ctape, &dc, Some(&mut grads.2.mlp));
            m.visual.backward(vtape, &ds, &mut grads.1);
        }
        Ok((loss, grads))
    };
    let n = train.len();
    let bundle = train_loop(
        &mut m,
        &mut adam,
        &mut state,
        cfg,
        ctx,
        |_| Ok((0..n).collect()),
        per_sample,
        |m, adam, g| {
            let mut view = ParamsMut(vec![&mut m.backbone, &mut m.visual, &mut m.cond_mlp]);
            adam.update(&mut view, g)
        },
        |_| Ok(BTreeMap::new()),
    )?;
    check_frozen(&frozen, &m)?;
    Ok(bundle)
}

/// Mean semantic loss between translated audio semantics and cached visual ones.
pub fn semantic_loss_on(
    model: &Model,
    samples: &[&Sample],
    targets: &[VisualSemantic],
    exec: Execution,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples with audio".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let losses = exec.map(&idx, |&i| -> Result<f64> {
        let spec = samples[i].audio.as_ref().expect("filtered");
        let fs = model.a2v.forward(&model.audio.forward(spec)?)?;
        Ok(semantic_loss(&fs.0, targets[i].as_slice())?.value)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / samples.len() as f64)
}

fn visual_targets(model: &Model, samples: &[&Sample], exec: Execution) -> Result<Vec<VisualSemantic>> {
    exec.map(samples, |s| model.visual.forward(&s.color))
        .into_iter()
        .collect()
}

/// Stage 2: distill frozen visual semantics into `E_a` + A2V.
pub fn train_stage2(
    data: StageData<'_>,
    cfg: &StageConfig,
    input: &CheckpointBundle,
    ctx: &mut TrainContext<'_>,
) -> Result<CheckpointBundle> {
    let (mut m, mut adam, mut state) = prepare(Stage::Stage2, cfg, Some(input), || unreachable!())?;
    let frozen = frozen_bytes(
        &m,
        &[
            ParamGroup::Backbone,
            ParamGroup::Visual,
            ParamGroup::CondMlp,
            ParamGroup::Rnet,
        ],
    );
    let exec = ctx.exec;
    let train = with_audio(data.train);
    let val = with_audio(data.val);
    let targets = visual_targets(&m, &train, exec)?;
    let val_targets = visual_targets(&m, &val, exec)?;
    let initial_val = if val.is_empty() {
        None
    } else {
        Some(semantic_loss_on(&m, &val, &val_targets, exec)?)
    };
    let per_sample = |m: &Model, &i: &usize, _masked: bool| -> Result<(f64, _)> {
        let spec = train[i].audio.as_ref().expect("filtered");
        let (fa, etape) = m.audio.forward_tape(spec)?;
        let (fs, atape) = m.a2v.forward_tape(&fa)?;
        let target = targets[i].as_slice();
        let loss = semantic_loss(&fs.0, target)?.value;
        let d = semantic_loss_grad(&fs.0, target)?;
        let mut grads = (zeros_like(&m.audio), zeros_like(&m.a2v));
        let dfa = m.a2v.mlp.backward(&atape, &d, Some(&mut grads.1.mlp));
        m.audio.backward(&etape, &dfa, &mut grads.0);
        Ok((loss, grads))
    };
    let n = train.len();
    let bundle = train_loop(
        &mut m,
        &mut adam,
        &mut state,
        cfg,
        ctx,
        |_| Ok((0..n).collect()),
        per_sample,
        |m, adam, g| {
            let mut view = ParamsMut(vec![&mut m.audio, &mut m.a2v]);
            adam.update(&mut view, g)
        },
        |m| {
            let mut out = BTreeMap::new();
            if let Some(init) = initial_val {
                out.insert("val_semantic_initial".into(), init);
                out.insert("val_semantic".into(), semantic_loss_on(m, &val, &val_targets, exec)?);
            }
            Ok(out)
        },
    )?;
    check_frozen(&frozen, &m)?;
    Ok(bundle)
}

/// Cached relevance-network inputs of a sample set.
pub struct RelevanceFeatures {
    pub ids: Vec<String>,
    pub audio: Vec<AudioFeature>,
    pub visual: Vec<Vec<f64>>,
}

pub fn relevance_features(model: &Model, samples: &[&Sample], exec: Execution) -> Result<RelevanceFeatures> {
    let rows = exec.map(samples, |s| -> Result<(AudioFeature, Vec<f64>)> {
        let spec = s.audio.as_ref().expect("filtered");
        Ok((model.audio.forward(spec)?, model.backbone.pooled_features(&s.gray)?))
    });
    let mut audio = Vec::with_capacity(samples.len());
    let mut visual = Vec::with_capacity(samples.len());
    for r in rows {
        let (a, v) = r?;
        audio.push(a);
        visual.push(v);
    }
    Ok(RelevanceFeatures {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        audio,
        visual,
    })
}

/// Held-out relevance evaluation on balanced pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceEval {
    pub bce: f64,
    pub auc: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

pub fn evaluate_relevance(
    model: &Model,
    feats: &RelevanceFeatures,
    seed: u64,
    exec: Execution,
) -> Result<RelevanceEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = sample_pairs(&feats.ids, &mut rng)?;
    let out = exec.map(&pairs, |p| -> Result<(f64, f64)> {
        let t = model
            .rnet
            .forward_tape(&feats.audio[p.audio].0, &feats.visual[p.image])?;
        let (loss, _) = bce_with_logits(t.logit(), if p.matched { 1.0 } else { 0.0 });
        Ok((loss, crate::losses::sigmoid(t.logit())))
    });
    let mut bce = 0.0;
    let mut scores = Vec::with_capacity(pairs.len());
    for r in out {
        let (l, s) = r?;
        bce += l;
        scores.push(s);
    }
    let labels: Vec<bool> = pairs.iter().map(|p| p.matched).collect();
    Ok(RelevanceEval {
        bce: bce / pairs.len() as f64,
        auc: roc_auc(&scores, &labels)?,
        scores,
        labels,
    })
}

/// Mixed into the stage seed for the held-out pair draw, so it differs from
/// the training pairs.
const RNET_EVAL_SALT: u64 = 0x0076_616c;

/// Added to the feature std when fitting the RNet input scalers, so dead
/// encoder channels are not blown up.
const SCALER_FLOOR: f64 = 1e-2;

/// Initialize the RNet input scalers from training-set feature statistics.
pub fn fit_relevance_scalers(model: &mut Model, feats: &RelevanceFeatures) -> Result<()> {
    let fa: Vec<&[f64]> = feats.audio.iter().map(|a| a.0.as_slice()).collect();
    let fv: Vec<&[f64]> = feats.visual.iter().map(Vec::as_slice).collect();
    model.rnet.audio_scaler.fit(&fa, SCALER_FLOOR)?;
    model.rnet.visual_scaler.fit(&fv, SCALER_FLOOR)
}

/// RNet on frozen `E_a` features and frozen backbone features of the
/// grayscale input; positives are a sample's own audio, negatives audio
/// from another video.
pub fn train_rnet(
    data: StageData<'_>,
    cfg: &StageConfig,
    input: &CheckpointBundle,
    ctx: &mut TrainContext<'_>,
) -> Result<CheckpointBundle> {
    let (mut m, mut adam, mut state) = prepare(Stage::Rnet, cfg, Some(input), || unreachable!())?;
    let frozen = frozen_bytes(
        &m,
        &[
            ParamGroup::Backbone,
            ParamGroup::Visual,
            ParamGroup::CondMlp,
            ParamGroup::AudioEncoder,
            ParamGroup::A2v,
        ],
    );
    let exec = ctx.exec;
    let train = with_audio(data.train);
    let val = with_audio(data.val);
    let feats = relevance_features(&m, &train, exec)?;
    if state.start_epoch == 0 {
        fit_relevance_scalers(&mut m, &feats)?;
    }
    let val_feats = if val.len() >= 2 {
        Some(relevance_features(&m, &val, exec)?)
    } else {
        None
    };
    let initial = match &val_feats {
        Some(f) => Some(evaluate_relevance(&m, f, cfg.seed ^ RNET_EVAL_SALT, exec)?),
        None => None,
    };
    let per_sample = |m: &Model, p: &RelevancePair, _masked: bool| -> Result<(f64, _)> {
        let mut g = zeros_like(&m.rnet);
        let label = if p.matched { 1.0 } else { 0.0 };
        let loss = m
            .rnet
            .pair_loss(&feats.audio[p.audio].0, &feats.visual[p.image], label, Some(&mut g))?;
        Ok((loss, (g,)))
    };
    let bundle = train_loop(
        &mut m,
        &mut adam,
        &mut state,
        cfg,
        ctx,
        |epoch| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64 + 1);
            sample_pairs(&feats.ids, &mut rng)
        },
        per_sample,
        |m, adam, g| adam.update(&mut m.rnet, &g.0),
        |m| {
            let mut out = BTreeMap::new();
            if let (Some(f), Some(init)) = (&val_feats, &initial) {
                let e = evaluate_relevance(m, f, cfg.seed ^ RNET_EVAL_SALT, exec)?;
                out.insert("val_bce_initial".into(), init.bce);
                out.insert("val_bce".into(), e.bce);
                out.insert("val_auc".into(), e.auc);
            }
            Ok(out)
        },
    )?;
    check_frozen(&frozen, &m)?;
    Ok(bundle)
}

/// Stage 3: color loss through the frozen backbone with `c` from the audio
/// path; only A2V (and optionally the condition MLP) is updated.
pub fn train_stage3(
    data: StageData<'_>,
    cfg: &StageConfig,
    input: &CheckpointBundle,
    ctx: &mut TrainContext<'_>,
) -> Result<CheckpointBundle> {
    let (mut m, mut adam, mut state) = prepare(Stage::Stage3, cfg, Some(input), || unreachable!())?;
    if cfg.use_rnet_relevance && !state.groups.contains(&ParamGroup::Rnet) {
        return Err(Error::MissingStage {
            missing: "rnet".into(),
            wanted: "stage3 with use_rnet_relevance".into(),
        });
    }
    let mut frozen_groups = vec![
        ParamGroup::Backbone,
        ParamGroup::Visual,
        ParamGroup::AudioEncoder,
        ParamGroup::Rnet,
    ];
    if !cfg.train_cond_mlp {
        frozen_groups.push(ParamGroup::CondMlp);
    }
    let frozen = frozen_bytes(&m, &frozen_groups);
    let exec = ctx.exec;
    let train = with_audio(data.train);
    let cached = exec
        .map(&train, |s| -> Result<(AudioFeature, RelevanceScore)> {
            let fa = m.audio.forward(s.audio.as_ref().expect("filtered"))?;
            let r = if cfg.use_rnet_relevance {
                m.rnet.score(&fa, &m.backbone.pooled_features(&s.gray)?)?
            } else {
                RelevanceScore::ONE
            };
            Ok((fa, r))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let train_cond = cfg.train_cond_mlp;
    let per_sample = |m: &Model, &i: &usize, _masked: bool| -> Result<(f64, _)> {
        let s = train[i];
        let (fa, r) = &cached[i];
        let target = color_target(s)?;
        let features = m.backbone.encode(&s.gray)?;
        let (fs, atape) = m.a2v.forward_tape(fa)?;
        let (c, ctape) = m.cond_mlp.forward_tape(&fs.0)?;
        let tape = m.backbone.decode_tape(&features, Some(&c), *r)?;
        let (loss, d_out) = color_loss_and_grad(tape.output(), &target)?;
        let (_, dc) = m.backbone.decode_backward(&tape, &features, &d_out, None, false);
        let mut grads = (zeros_like(&m.a2v), zeros_like(&m.cond_mlp));
        let cond_grads = if train_cond { Some(&mut grads.1.mlp) } else { None };
        let dfs = m.cond_mlp.mlp.backward(&ctape, &dc, cond_grads);
        m.a2v.mlp.backward(&atape, &dfs, Some(&mut grads.0.mlp));
        Ok((loss, grads))
    };
    let n = train.len();
    let bundle = train_loop(
        &mut m,
        &mut adam,
        &mut state,
        cfg,
        ctx,
        |_| Ok((0..n).collect()),
        per_sample,
        |m, adam, g| {
            if train_cond {
                let mut view = ParamsMut(vec![&mut m.a2v, &mut m.cond_mlp]);
                adam.update(&mut view, g)
            } else {
                adam.update(&mut m.a2v, &ParamsRef(vec![&g.0]))
            }
        },
        |_| Ok(BTreeMap::new()),
    )?;
    check_frozen(&frozen, &m)?;
    Ok(bundle)
}

/// `no_multistep` ablation: backbone, condition MLP, `E_a` and A2V trained
/// together from scratch with the color loss only, audio-guided at `r = 1`.
pub fn train_joint(
    model: ModelConfig,
    data: StageData<'_>,
    cfg: &StageConfig,
    input: Option<&CheckpointBundle>,
    ctx: &mut TrainContext<'_>,
) -> Result<CheckpointBundle> {
    let (mut m, mut adam, mut state) = prepare(Stage::Joint, cfg, input, || Model::new(model))?;
    let train = with_audio(data.train);
    let per_sample = |m: &Model, &i: &usize, _masked: bool| -> Result<(f64, _)> {
        let s = train[i];
        let target = color_target(s)?;
        let (features, etape) = m.backbone.encode_tape(&s.gray)?;
        let (fa, atape) = m.audio.forward_tape(s.audio.as_ref().expect("filtered"))?;
        let (fs, ttape) = m.a2v.forward_tape(&fa)?;
        let (c, ctape) = m.cond_mlp.forward_tape(&fs.0)?;
        let tape = m.backbone.decode_tape(&features, Some(&c), RelevanceScore::ONE)?;
        let (loss, d_out) = color_loss_and_grad(tape.output(), &target)?;
        let mut g = (
            zeros_like(&m.backbone),
            zeros_like(&m.cond_mlp),
            zeros_like(&m.audio),
            zeros_like(&m.a2v),
        );
        let (dfeat, dc) = m
            .backbone
            .decode_backward(&tape, &features, &d_out, Some(&mut g.0), true);
        m.backbone.encode_backward(&etape, &features, dfeat, &mut g.0);
        let dfs = m.cond_mlp.mlp.backward(&ctape, &dc, Some(&mut g.1.mlp));
        let dfa = m.a2v.mlp.backward(&ttape, &dfs, Some(&mut g.3.mlp));
        m.audio.backward(&atape, &dfa, &mut g.2);
        Ok((loss, g))
    };
    let n = train.len();
    train_loop(
        &mut m,
        &mut adam,
        &mut state,
        cfg,
        ctx,
        |_| Ok((0..n).collect()),
        per_sample,
        |m, adam, g| {
            let mut view = ParamsMut(vec![&mut m.backbone, &mut m.cond_mlp, &mut m.audio, &mut m.a2v]);
            adam.update(&mut view, g)
        },
        |_| Ok(BTreeMap::new()),
    )
}

/// Dispatch on `stage`.
pub fn train_stage(
    stage: Stage,
    model: ModelConfig,
    data: StageData<'_>,
    cfg: &StageConfig,
    input: Option<&CheckpointBundle>,
    ctx: &mut TrainContext<'_>,
) -> Result<CheckpointBundle> {
    let need = || {
        input.ok_or_else(|| Error::MissingStage {
            missing: format!(
                "{} (no checkpoint given)",
                stage.prerequisite().expect("has prerequisite")
            ),
            wanted: stage.to_string(),
        })
    };
    match stage {
        Stage::Stage1 => train_stage1(model, data, cfg, input, ctx),
        Stage::Stage2 => train_stage2(data, cfg, need()?, ctx),
        Stage::Rnet => train_rnet(data, cfg, need()?, ctx),
        Stage::Stage3 => train_stage3(data, cfg, need()?, ctx),
        Stage::Joint => train_joint(model, data, cfg, input, ctx),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoMultistep,
    NoR,
    MissingAudio,
    NoRMissingAudio,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoMultistep,
        AblationMode::NoR,
        AblationMode::MissingAudio,
        AblationMode::NoRMissingAudio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoMultistep => "no_multistep",
            AblationMode::NoR => "no_r",
            AblationMode::MissingAudio => "missing_audio",
            AblationMode::NoRMissingAudio => "no_r_missing_audio",
        }
    }

    /// Parameter groups the checkpoint must hold for this mode.
    pub fn requires(self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            AblationMode::Full => &[Backbone, CondMlp, AudioEncoder, A2v, Rnet],
            AblationMode::NoR | AblationMode::NoMultistep => &[Backbone, CondMlp, AudioEncoder, A2v],
            AblationMode::MissingAudio | AblationMode::NoRMissingAudio => &[Backbone],
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mode `{s}`")))
    }
}

/// A loaded checkpoint ready for inference.
#[derive(Clone, Debug)]
pub struct Colorizer {
    pub model: Model,
    pub groups: BTreeSet<ParamGroup>,
    pub completed: Vec<Stage>,
}

impl Colorizer {
    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        Ok(Self {
            model: bundle.to_model()?,
            groups: bundle.groups(),
            completed: bundle.completed.clone(),
        })
    }

    pub fn frontend(&self) -> Result<AudioFrontend> {
        AudioFrontend::new(self.model.config.spectrogram.clone())
    }

    pub fn check_mode(&self, mode: AblationMode) -> Result<()> {
        let missing: Vec<&str> = mode
            .requires()
            .iter()
            .filter(|g| !self.groups.contains(g))
            .map(|g| g.prefix())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingStage {
                missing: missing.join(", "),
                wanted: format!("mode {mode}"),
            });
        }
        let joint = self.completed.contains(&Stage::Joint);
        if (mode == AblationMode::NoMultistep) != joint {
            return Err(Error::Validation(format!(
                "mode {mode} {} a jointly trained checkpoint",
                if joint { "cannot use" } else { "needs" }
            )));
        }
        Ok(())
    }

    /// Colorize `gray`; `audio = None` means no audio is available.
    pub fn infer(&self, gray: &GrayImage, audio: Option<&Spectrogram>, mode: AblationMode) -> Result<Inference> {
        self.check_mode(mode)?;
        let m = &self.model;
        let audio = match mode {
            AblationMode::MissingAudio | AblationMode::NoRMissingAudio => None,
            _ => audio,
        };
        let audio_cond = |spec: &Spectrogram| -> Result<(AudioFeature, Vec<f64>)> {
            let fa = m.audio.forward(spec)?;
            let c = m.cond_mlp.forward(&m.a2v.forward(&fa)?.0)?;
            Ok((fa, c))
        };
        let (cond, r) = match (mode, audio) {
            (AblationMode::Full, Some(spec)) => {
                let (fa, c) = audio_cond(spec)?;
                let r = m.rnet.score(&fa, &m.backbone.pooled_features(gray)?)?;
                (Some(c), r)
            }
            (AblationMode::NoR | AblationMode::NoMultistep, Some(spec)) => {
                (Some(audio_cond(spec)?.1), RelevanceScore::ONE)
            }
            (AblationMode::Full | AblationMode::MissingAudio, None) => (None, RelevanceScore::ZERO),
            // gating removed and nothing to condition on: the guard feeds zeros
            (_, None) => (Some(vec![0.0; m.backbone.cond_dim()]), RelevanceScore::ONE),
            (AblationMode::MissingAudio | AblationMode::NoRMissingAudio, Some(_)) => {
                unreachable!("audio dropped above")
            }
        };
        self.render(gray, cond.as_deref(), r, mode)
    }

    /// Run the backbone with an explicit condition and relevance.
    pub fn render(
        &self,
        gray: &GrayImage,
        cond: Option<&[f64]>,
        r: RelevanceScore,
        mode: AblationMode,
    ) -> Result<Inference> {
        let m = &self.model;
        let features = m.backbone.encode(gray)?;
        let tape = m.backbone.decode_tape(&features, cond, r)?;
        let ab = to_ab_image(tape.output());
        let image = lab_to_rgb(&merge_channels(gray, &ab)?)?;
        Ok(Inference { image, ab, r, mode })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub image: RgbConversion,
    pub ab: AbImage,
    pub r: RelevanceScore,
    pub mode: AblationMode,
}

/// Chroma above which a ground-truth pixel counts as part of the colored shape.
const SHAPE_CHROMA: f64 = 5.0;

/// Whether the mean predicted ab over the shape is nearer the true hue than the other.
pub fn hue_decision(pred: &AbImage, truth: &AbImage, label: &crate::data::SceneLabel) -> Option<bool> {
    let (mut sa, mut sb, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in pred.data().chunks(2).zip(truth.data().chunks(2)) {
        if (t[0] * t[0] + t[1] * t[1]).sqrt() > SHAPE_CHROMA {
            sa += p[0];
            sb += p[1];
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let mean = [sa / n as f64, sb / n as f64];
    let dist = |h: [f64; 2]| (mean[0] - h[0]).powi(2) + (mean[1] - h[1]).powi(2);
    let nearest = if dist(label.hue_ab[0]) <= dist(label.hue_ab[1]) {
        0
    } else {
        1
    };
    Some(nearest == label.hue)
}

/// Mean squared ab error over all pixels and both channels.
pub fn ab_mse(pred: &AbImage, truth: &AbImage) -> f64 {
    let d = pred.data();
    let t = truth.data();
    d.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d.len() as f64
}

/// Metrics of one mode over a sample set (manifest order).
pub fn evaluate(
    colorizer: &Colorizer,
    samples: &[Sample],
    mode: AblationMode,
    perceptual: Option<&dyn PerceptualMetric>,
    exec: Execution,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty manifest".into()));
    }
    colorizer.check_mode(mode)?;
    let rows = exec.map(samples, |s| -> Result<(ImageMetrics, f64, Option<bool>)> {
        let inf = colorizer.infer(&s.gray, s.audio.as_ref(), mode)?;
        let mut im = ImageMetrics::compute(s.id.clone(), &inf.image.image, &s.color, perceptual)?;
        im.relevance = inf.r.value();
        im.clipped_fraction = inf.image.clipped_fraction;
        let truth = rgb_to_lab(&s.color)?.split().1;
        let hue = s.label.as_ref().and_then(|l| hue_decision(&inf.ab, &truth, l));
        Ok((im, ab_mse(&inf.ab, &truth), hue))
    });
    let mut images = Vec::with_capacity(samples.len());
    let mut mse = 0.0;
    let (mut hits, mut decided) = (0usize, 0usize);
    for r in rows {
        let (im, e, hue) = r?;
        images.push(im);
        mse += e;
        if let Some(h) = hue {
            decided += 1;
            hits += h as usize;
        }
    }
    Ok(MetricsReport {
        mode: mode.to_string(),
        images,
        perceptual_metric: perceptual.map(|p| p.name().to_string()),
        hue_accuracy: (decided > 0).then(|| hits as f64 / decided as f64),
        ab_mse: Some(mse / samples.len() as f64),
    })
}

/// Small networks sized for a single CPU core and 32×32 synthetic scenes.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            base_channels: 16,
            depth: 2,
            head_hidden: 32,
            ..Default::default()
        },
        semantic: SemanticConfig {
            embedding_dim: 16,
            visual_channels: vec![8, 16],
            visual_hidden: 32,
            audio_channels: vec![8, 16, 32],
            a2v_hidden: 32,
            cond_hidden: 32,
        },
        relevance: RelevanceConfig {
            hidden: 32,
            projection_dim: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Epoch counts and rates matched to [`desk_model_config`]. RNet heads sit on
/// frozen features and are cheap, so they get more steps at a higher rate.
/// Stage 3 only moves A2V and plateaus slowly at the default rate.
pub fn desk_training_config() -> TrainingConfig {
    TrainingConfig {
        rnet: StageConfig {
            epochs: 60,
            lr: 1e-2,
            ..StageConfig::defaults(Stage::Rnet)
        },
        stage3: StageConfig {
            lr: 3e-3,
            ..StageConfig::defaults(Stage::Stage3)
        },
        ..TrainingConfig::default()
    }
}
