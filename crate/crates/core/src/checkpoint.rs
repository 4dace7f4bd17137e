//! Checkpoint bundles: a JSON document holding the model config, one base64
//! blob of little-endian `f64` per parameter tensor, the training history and
//! optimizer state for exact resumption.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamGroup};
use crate::nn::Adam;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Rnet,
    Stage3,
    /// End-to-end training of everything at once (the `no_multistep` ablation).
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Rnet => "rnet",
            Stage::Stage3 => "stage3",
            Stage::Joint => "joint",
        }
    }

    /// Groups a checkpoint must already hold before this stage can start.
    pub fn requires(self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Stage::Stage1 | Stage::Joint => &[],
            Stage::Stage2 => &[Backbone, Visual, CondMlp],
            Stage::Rnet | Stage::Stage3 => &[Backbone, Visual, CondMlp, AudioEncoder, A2v],
        }
    }

    /// Groups this stage writes (trained or passed through).
    pub fn produces(self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Stage::Stage1 => &[Backbone, Visual, CondMlp],
            Stage::Stage2 | Stage::Stage3 => &[Backbone, Visual, CondMlp, AudioEncoder, A2v],
            Stage::Rnet => &[Backbone, Visual, CondMlp, AudioEncoder, A2v, Rnet],
            Stage::Joint => &[Backbone, CondMlp, AudioEncoder, A2v],
        }
    }

    /// Stage that produces the groups `self` requires, for error messages.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Stage1 | Stage::Joint => None,
            Stage::Stage2 => Some(Stage::Stage1),
            Stage::Rnet | Stage::Stage3 => Some(Stage::Stage2),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "2" | "stage2" => Ok(Stage::Stage2),
            "3" | "stage3" => Ok(Stage::Stage3),
            "rnet" => Ok(Stage::Rnet),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::Validation(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub shape: Vec<usize>,
    /// Base64 of little-endian `f64` values.
    pub data: String,
}

impl Blob {
    pub fn encode(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: B64.encode(t.to_le_bytes()),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("bad blob encoding: {e}")))?;
        Tensor::from_le_bytes(&self.shape, &bytes)
    }

    fn from_values(values: &[f64]) -> Self {
        Self::encode(&Tensor::from_vec(&[values.len()], values.to_vec()).expect("1-d"))
    }
}

/// One epoch's mean losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Blob>,
    pub second: Vec<Blob>,
}

impl OptimizerState {
    pub fn capture(adam: &Adam) -> Self {
        let (first, second) = adam.moments();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            step: adam.step,
            first: first.iter().map(|v| Blob::from_values(v)).collect(),
            second: second.iter().map(|v| Blob::from_values(v)).collect(),
        }
    }

    pub fn restore(&self) -> Result<Adam> {
        let mut adam = Adam::new(self.lr);
        adam.beta1 = self.beta1;
        adam.beta2 = self.beta2;
        adam.eps = self.eps;
        adam.step = self.step;
        let decode =
            |v: &[Blob]| -> Result<Vec<Vec<f64>>> { v.iter().map(|b| Ok(b.decode()?.data().to_vec())).collect() };
        adam.set_moments(decode(&self.first)?, decode(&self.second)?)?;
        Ok(adam)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBundle {
    pub format_version: u32,
    /// Stage that wrote this bundle.
    pub stage: Stage,
    /// Every stage applied so far, in order.
    pub completed: Vec<Stage>,
    pub config: ModelConfig,
    /// Settings of the run that wrote this bundle.
    pub run_config: serde_json::Value,
    pub epochs_completed: usize,
    pub blobs: BTreeMap<String, Blob>,
    pub history: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
}

impl CheckpointBundle {
    /// Snapshot `groups` of `model`.
    pub fn from_model(model: &Model, stage: Stage, groups: &[ParamGroup]) -> Self {
        let mut blobs = BTreeMap::new();
        for &g in groups {
            for (name, t) in model.named_tensors(g) {
                blobs.insert(name, Blob::encode(t));
            }
        }
        Self {
            format_version: FORMAT_VERSION,
            stage,
            completed: vec![stage],
            config: model.config.clone(),
            run_config: serde_json::Value::Null,
            epochs_completed: 0,
            blobs,
            history: Vec::new(),
            optimizer: None,
        }
    }

    /// Groups for which every tensor has a blob.
    pub fn groups(&self) -> BTreeSet<ParamGroup> {
        let model = Model::new(self.config.clone());
        let mut out = BTreeSet::new();
        if let Ok(model) = model {
            for g in ParamGroup::ALL {
                if model.named_tensors(g).iter().all(|(n, _)| self.blobs.contains_key(n)) {
                    out.insert(g);
                }
            }
        }
        out
    }

    pub fn has(&self, g: ParamGroup) -> bool {
        self.groups().contains(&g)
    }

    /// Fail unless the bundle holds what `stage` needs.
    pub fn require_for(&self, stage: Stage) -> Result<()> {
        let have = self.groups();
        let missing: Vec<&str> = stage
            .requires()
            .iter()
            .filter(|g| !have.contains(g))
            .map(|g| g.prefix())
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let by = stage.prerequisite().map_or(String::new(), |p| format!("{p} ("));
        let close = if by.is_empty() { "" } else { ")" };
        Err(Error::MissingStage {
            missing: format!("{by}{}{close}", missing.join(", ")),
            wanted: stage.to_string(),
        })
    }

    /// Rebuild the model: present blobs overwrite seed-initialized parameters.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone())?;
        for g in ParamGroup::ALL {
            let mut err = None;
            model.group_mut(g).visit_mut(g.prefix(), &mut |name, t| {
                if err.is_some() {
                    return;
                }
                if let Some(b) = self.blobs.get(name) {
                    match b.decode() {
                        Ok(v) if v.shape() == t.shape() => *t = v,
                        Ok(v) => {
                            err = Some(Error::Checkpoint(format!(
                                "blob {name} has shape {:?}, model expects {:?}",
                                v.shape(),
                                t.shape()
                            )))
                        }
                        Err(e) => err = Some(e),
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let version = v.get("format_version").and_then(|x| x.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "format version {version:?} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::relevance::RelevanceConfig;
    use crate::semantics::SemanticConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                base_channels: 8,
                depth: 2,
                head_hidden: 3,
                ..Default::default()
            },
            semantic: SemanticConfig {
                embedding_dim: 4,
                visual_channels: vec![2],
                visual_hidden: 3,
                audio_channels: vec![2],
                a2v_hidden: 3,
                cond_hidden: 3,
            },
            relevance: RelevanceConfig {
                hidden: 3,
                projection_dim: 2,
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = Model::new(tiny()).unwrap();
        let b = CheckpointBundle::from_model(&model, Stage::Rnet, Stage::Rnet.produces());
        let back = CheckpointBundle::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_model().unwrap(), model);
        assert_eq!(back.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn prerequisites_are_enforced() {
        let model = Model::new(tiny()).unwrap();
        let s1 = CheckpointBundle::from_model(&model, Stage::Stage1, Stage::Stage1.produces());
        s1.require_for(Stage::Stage2).unwrap();
        match s1.require_for(Stage::Stage3) {
            Err(Error::MissingStage { missing, wanted }) => {
                assert!(missing.contains("stage2"), "{missing}");
                assert_eq!(wanted, "stage3");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(!s1.has(ParamGroup::Rnet));
    }

    #[test]
    fn version_mismatch_fails() {
        let model = Model::new(tiny()).unwrap();
        let b = CheckpointBundle::from_model(&model, Stage::Stage1, Stage::Stage1.produces());
        let text = b
            .to_json()
            .unwrap()
            .replacen("\"format_version\":1", "\"format_version\":99", 1);
        assert!(matches!(CheckpointBundle::from_json(&text), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut model = Model::new(tiny()).unwrap();
        let grads = crate::nn::zeros_like(&model.a2v);
        let mut adam = Adam::new(1e-3);
        let mut g = grads.clone();
        g.mlp.fc1.bias.fill(0.3);
        adam.update(&mut model.a2v, &g).unwrap();
        let restored = OptimizerState::capture(&adam).restore().unwrap();
        assert_eq!(restored, adam);
    }
}
