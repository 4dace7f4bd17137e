//! The full set of networks and their parameter groups.

use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramConfig;
use crate::backbone::{BackboneConfig, UNet};
use crate::error::Result;
use crate::nn::Params;
use crate::relevance::{RelevanceConfig, RelevanceNet};
use crate::semantics::{init_semantic_modules, A2v, AudioEncoder, ConditionMlp, SemanticConfig, VisualEncoder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub semantic: SemanticConfig,
    pub relevance: RelevanceConfig,
    pub spectrogram: SpectrogramConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.semantic.validate()?;
        self.spectrogram.validate()
    }
}

/// Named parameter groups; the name is the blob prefix in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Visual,
    CondMlp,
    AudioEncoder,
    A2v,
    Rnet,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Visual,
        ParamGroup::CondMlp,
        ParamGroup::AudioEncoder,
        ParamGroup::A2v,
        ParamGroup::Rnet,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Visual => "semantic.visual",
            ParamGroup::CondMlp => "semantic.cond_mlp",
            ParamGroup::AudioEncoder => "audio.encoder",
            ParamGroup::A2v => "audio.a2v",
            ParamGroup::Rnet => "rnet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: UNet,
    pub visual: VisualEncoder,
    pub cond_mlp: ConditionMlp,
    pub audio: AudioEncoder,
    pub a2v: A2v,
    pub rnet: RelevanceNet,
}

impl Model {
    /// Freshly initialized networks; every group is derived from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = UNet::new(config.backbone.clone(), config.seed)?;
        let (visual, cond_mlp, audio, a2v) = init_semantic_modules(
            &config.semantic,
            config.backbone.cond_dim(),
            config.spectrogram.n_mels,
            config.seed.wrapping_add(1),
        )?;
        let rnet = RelevanceNet::new(
            &config.relevance,
            config.semantic.audio_dim(config.spectrogram.n_mels),
            config.backbone.pooled_dim(),
            config.seed.wrapping_add(2),
        )?;
        Ok(Self {
            config,
            backbone,
            visual,
            cond_mlp,
            audio,
            a2v,
            rnet,
        })
    }

    pub fn group(&self, g: ParamGroup) -> &dyn Params {
        match g {
            ParamGroup::Backbone => &self.backbone,
            ParamGroup::Visual => &self.visual,
            ParamGroup::CondMlp => &self.cond_mlp,
            ParamGroup::AudioEncoder => &self.audio,
            ParamGroup::A2v => &self.a2v,
            ParamGroup::Rnet => &self.rnet,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut dyn Params {
        match g {
            ParamGroup::Backbone => &mut self.backbone,
            ParamGroup::Visual => &mut self.visual,
            ParamGroup::CondMlp => &mut self.cond_mlp,
            ParamGroup::AudioEncoder => &mut self.audio,
            ParamGroup::A2v => &mut self.a2v,
            ParamGroup::Rnet => &mut self.rnet,
        }
    }

    /// `(name, tensor)` of every parameter in a group, in visit order.
    pub fn named_tensors(&self, g: ParamGroup) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.group(g)
            .visit(g.prefix(), &mut |n, t| out.push((n.to_string(), t)));
        out
    }

    /// Little-endian bytes of a group's parameters, for freezing checks.
    pub fn group_bytes(&self, g: ParamGroup) -> Vec<u8> {
        self.named_tensors(g)
            .into_iter()
            .flat_map(|(_, t)| t.to_le_bytes())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_have_disjoint_prefixed_names() {
        let cfg = ModelConfig {
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
            ..Default::default()
        };
        let m = Model::new(cfg.clone()).unwrap();
        let mut names = std::collections::HashSet::new();
        for g in ParamGroup::ALL {
            let t = m.named_tensors(g);
            assert!(!t.is_empty());
            for (n, _) in t {
                assert!(n.starts_with(g.prefix()));
                assert!(names.insert(n));
            }
        }
        assert_eq!(Model::new(cfg).unwrap(), m);
    }
}
