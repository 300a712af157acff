//! Seeded desk-scale experiments and their CSV outputs.

mod corpus;
mod desk;
mod experiments;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use corpus::{CorpusDoc, CorpusSpec, LABELS};
pub use desk::Desk;
pub use experiments::{
    access_control_eval, forgetting_eval, purge_eval, retrieval_eval, shard_tradeoff_eval, AccessDoc, AccessResult,
    AccessTrials, ForgettingResult, ForgettingRow, ForgettingTiming, PurgeDoc, PurgeResult, PurgeTiming, RetrievalDoc,
    RetrievalResult, ShardResult, ShardRow, ShardTiming,
};

use crate::codec::sha256_hex;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::lm::{ModelConfig, PretrainConfig};
use crate::lora::{AdapterConfig, Weighting};
use crate::retriever::{HeldoutPolicy, RetrieverConfig};

/// Every knob of the desk experiments. Two runs with equal configs write
/// byte-identical result CSVs; wall-clock measurements go to separate
/// `*_timing.csv` files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    /// Retriever used for routing; the PCA comparison reuses its ridges.
    pub retriever: RetrieverConfig,
    pub heldout: HeldoutPolicy,
    pub eval_docs_per_group: usize,
    /// Top-k retrieval modes.
    pub modes: Vec<usize>,
    pub weighting: Weighting,
    pub access_trials: usize,
    /// Documents purged, one per group in group order.
    pub purge_docs: usize,
    /// Partition sizes for the shard trade-off.
    pub shard_sizes: Vec<usize>,
    /// Number of leading groups pooled for the shard trade-off.
    pub shard_groups: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            retriever: RetrieverConfig::default(),
            heldout: HeldoutPolicy::default(),
            eval_docs_per_group: 20,
            modes: vec![1, 2, 3],
            weighting: Weighting::Uniform,
            access_trials: 1000,
            purge_docs: 8,
            shard_sizes: vec![7, 14, 28, 56],
            shard_groups: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.adapter.validate()?;
        if self.modes.is_empty() || self.modes.contains(&0) {
            return Err(Error::Config("retrieval modes must be non-empty and at least 1".into()));
        }
        if self.eval_docs_per_group == 0 {
            return Err(Error::Config("eval_docs_per_group must be at least 1".into()));
        }
        if self.shard_sizes.contains(&0) || self.shard_groups == 0 || self.shard_groups > self.corpus.groups {
            return Err(Error::Config("degenerate shard layout".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(sha256_hex(serde_json::to_string(&value)?.as_bytes()))
    }
}

/// One aggregated result line of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub condition: String,
    pub perplexity: f64,
    pub accuracy: Option<f64>,
    pub wall_seconds: Option<f64>,
}

impl ResultRow {
    pub(crate) fn new(experiment: &str, condition: &str, perplexity: f64, accuracy: Option<f64>) -> Self {
        Self { experiment: experiment.into(), condition: condition.into(), perplexity, accuracy, wall_seconds: None }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    config: ExperimentConfig,
    files: BTreeMap<String, String>,
}

/// Experiment output directory. Records the SHA-256 of every CSV it writes
/// in `manifest.json`, merging with a manifest from the same config.
pub struct OutputDir {
    dir: PathBuf,
    config: ExperimentConfig,
    config_hash: String,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let config_hash = config.hash()?;
        let mut files = BTreeMap::new();
        if let Ok(text) = std::fs::read_to_string(dir.join("manifest.json")) {
            if let Ok(m) = serde_json::from_str::<Manifest>(&text) {
                if m.config_hash == config_hash {
                    files = m.files;
                }
            }
        }
        Ok(Self { dir: dir.to_path_buf(), config: config.clone(), config_hash, files })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&self.dir.join(name), &bytes)?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let m =
            Manifest { config_hash: self.config_hash.clone(), config: self.config.clone(), files: self.files.clone() };
        let mut text = serde_json::to_string_pretty(&serde_json::to_value(&m)?)?;
        text.push('\n');
        write_atomic(&self.dir.join("manifest.json"), text.as_bytes())
    }
}

pub(crate) fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
