//! Run configuration: one TOML file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::CorpusFormat;
use crate::error::{Error, Result};
use crate::harness::EvalSettings;
use crate::inference::InferenceOptions;
use crate::training::{FinetuneConfig, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where results, reports and (by default) the checkpoint go.
    pub output_dir: PathBuf,
    /// Checkpoint directory; `{output_dir}/checkpoint` when unset.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub inference: InferenceOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            inference: InferenceOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training corpus; takes precedence over `synthetic`.
    pub train: Option<PathBuf>,
    pub format: CorpusFormat,
    /// Episodes (JSON lines) for dev-F1 model selection.
    pub dev: Option<PathBuf>,
    pub n_way: usize,
    pub k_shot: usize,
    /// Episodes sampled from the training corpus.
    pub train_episodes: usize,
    pub synthetic: Option<SyntheticData>,
    /// Corpora whose words join the tiny encoder's vocabulary without being
    /// trained on (`.jsonl` files are read as episodes).
    pub extra_vocab: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            format: CorpusFormat::ColumnBio,
            dev: None,
            n_way: 2,
            k_shot: 2,
            train_episodes: 64,
            synthetic: None,
            extra_vocab: Vec::new(),
        }
    }
}

/// Generated training corpus (see [`crate::synthetic`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub types: Vec<String>,
    #[serde(default = "default_sentences")]
    pub sentences: usize,
    #[serde(default = "default_synthetic_seed")]
    pub seed: u64,
}

fn default_sentences() -> usize {
    40
}

fn default_synthetic_seed() -> u64 {
    11
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// `1` evaluates sequentially; unset uses every core.
    pub threads: Option<usize>,
    pub grid: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![1, 2, 3, 4, 5],
            threads: None,
            grid: "table3".into(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_way == 0 || self.data.k_shot == 0 {
            return Err(Error::Config("n_way and k_shot must be at least 1".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        if self.eval.threads == Some(0) {
            return Err(Error::Config("eval.threads must be at least 1".into()));
        }
        self.train.validate()?;
        self.finetune.validate()?;
        self.inference.weights.validate()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint"))
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            finetune: self.finetune.clone(),
            loss: self.train.loss,
            inference: self.inference,
            threads: self.eval.threads,
        }
    }
}

/// `a.b.c=value`, where `value` is read as a TOML value and falls back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::NoneFilter;
    use crate::training::EncoderSpec;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.max_steps=7".into(),
                "model.encoder={ kind = \"tiny\", d = 16, layers = 1 }".into(),
                "inference.none_filter=prompt".into(),
                "inference.weights.gamma=0.5".into(),
                "eval.seeds=[3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.max_steps, 7);
        assert_eq!(cfg.model.encoder, EncoderSpec::Tiny { d: 16, layers: 1 });
        assert_eq!(cfg.inference.none_filter, NoneFilter::Prompt);
        assert!((cfg.inference.weights.alpha - 0.175).abs() < 1e-12);
        assert_eq!(cfg.eval.seeds, [3]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for o in [
            "train.max_stepz=3",
            "bogus=1",
            "train.max_steps=\"many\"",
            "nokey",
        ] {
            assert!(
                matches!(RunConfig::load(None, &[o.into()]), Err(Error::Config(_))),
                "{o}"
            );
        }
    }
}
