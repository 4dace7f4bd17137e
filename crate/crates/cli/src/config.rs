//! Run configuration: built-in defaults, then a TOML file, then `--set`
//! overrides. Unknown keys are rejected at every layer.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use audiocolor::data::{Split, SyntheticSceneSpec};
use audiocolor::model::ModelConfig;
use audiocolor::pipeline::{desk_model_config, desk_training_config, TrainingConfig};
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub synthetic: SyntheticSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 600,
            n_val: 120,
            n_test: 500,
            synthetic: SyntheticSceneSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: desk_model_config(),
            training: desk_training_config(),
        }
    }
}

impl RunConfig {
    /// Defaults, merged with `file` if given, then the dotted overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut root = Value::try_from(RunConfig::default()).context("serializing defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut root, user);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: RunConfig = root.try_into().context("invalid configuration")?;
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Derive every seed from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        for (i, s) in [
            &mut self.training.stage1,
            &mut self.training.stage2,
            &mut self.training.rnet,
            &mut self.training.stage3,
            &mut self.training.joint,
        ]
        .into_iter()
        .enumerate()
        {
            s.seed = seed.wrapping_add(i as u64 + 1);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as a TOML literal, falling back to a string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = root;
    for p in path {
        node = node
            .get_mut(*p)
            .filter(|v| v.is_table())
            .ok_or_else(|| anyhow!("unknown configuration key `{key}`"))?;
    }
    let table = node.as_table_mut().expect("checked above");
    // optional fields absent from the defaults may still be set; serde rejects typos
    if !table.contains_key(*last) && path.is_empty() {
        bail!("unknown configuration key `{key}`");
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_typos_fail() {
        let cfg = RunConfig::resolve(
            None,
            &["training.stage1.epochs=3".into(), "data.n_train=7".into()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.training.stage1.epochs, 3);
        assert_eq!(cfg.data.n_train, 7);
        assert!(RunConfig::resolve(None, &["training.stage1.epoch=3".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["nope.x=1".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["training.stage1.epochs".into()], None).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
