use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adapterswap::codec::sha256_hex;
use adapterswap::eval::{CorpusSpec, ExperimentConfig};
use adapterswap::lm::{ModelConfig, PretrainConfig};
use adapterswap::lora::{AdapterConfig, Weighting};
use adapterswap::retriever::{HeldoutPolicy, RetrieverConfig};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// JSON-lines corpus read by `ingest` and written by `gen-corpus`.
    pub corpus: PathBuf,
    pub registry: PathBuf,
    /// Where `pretrain` keeps a copy of the base checkpoint.
    pub models_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            registry: "registry".into(),
            models_dir: "models".into(),
            output_dir: "results".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Retrieval {
    pub k: usize,
    pub weighting: Weighting,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for Retrieval {
    fn default() -> Self {
        Self { k: 1, weighting: Weighting::Uniform, max_new_tokens: 48, temperature: 0.0 }
    }
}

/// Effective configuration: defaults, then the config file, then flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub paths: Paths,
    /// When set, replaces the corpus, pretraining and model-init seeds, for
    /// the registry commands and the experiments alike.
    pub seed: Option<u64>,
    pub corpus_spec: CorpusSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub retriever: RetrieverConfig,
    pub heldout: HeldoutPolicy,
    pub retrieval: Retrieval,
    /// Declared credentials: user id to access labels.
    pub users: BTreeMap<String, Vec<String>>,
    pub experiment: ExperimentConfig,
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub registry: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub weighting: Option<Weighting>,
}

impl CliConfig {
    /// Parses a config file. A blank file means all defaults; unknown keys
    /// are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).context("invalid config")
    }

    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_text(&text).with_context(|| format!("config {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.apply(flags);
        Ok(cfg)
    }

    fn apply(&mut self, flags: &Overrides) {
        if let Some(r) = &flags.registry {
            self.paths.registry = r.clone();
        }
        if let Some(o) = &flags.output_dir {
            self.paths.output_dir = o.clone();
        }
        if let Some(c) = &flags.corpus {
            self.paths.corpus = c.clone();
        }
        if flags.seed.is_some() {
            self.seed = flags.seed;
        }
        if let Some(k) = flags.k {
            self.retrieval.k = k;
        }
        if let Some(w) = flags.weighting {
            self.retrieval.weighting = w;
        }
        if let Some(seed) = self.seed {
            self.corpus_spec.seed = seed;
            self.pretrain.seed = seed;
            self.model.init_seed = seed;
            self.experiment.corpus.seed = seed;
            self.experiment.pretrain.seed = seed;
            self.experiment.model.init_seed = seed;
        }
    }

    /// Sorted-key JSON, pretty printed.
    pub fn canonical(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&serde_json::to_value(self)?)?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_file_gives_defaults() {
        assert_eq!(CliConfig::from_text(" \n").unwrap(), CliConfig::default());
        assert_eq!(CliConfig::from_text("{}").unwrap(), CliConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = CliConfig::from_text(r#"{"retrieval": {"k": 1}}"#).unwrap();
        cfg.apply(&Overrides { k: Some(3), ..Default::default() });
        assert_eq!(cfg.retrieval.k, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = CliConfig::from_text(r#"{"topk": 2}"#).unwrap_err();
        assert!(format!("{err:#}").contains("topk"));
    }

    #[test]
    fn global_seed_reaches_every_generator() {
        let mut cfg = CliConfig::default();
        cfg.apply(&Overrides { seed: Some(99), ..Default::default() });
        assert_eq!((cfg.corpus_spec.seed, cfg.pretrain.seed, cfg.model.init_seed), (99, 99, 99));
        let e = &cfg.experiment;
        assert_eq!((e.corpus.seed, e.pretrain.seed, e.model.init_seed), (99, 99, 99));
    }
}
