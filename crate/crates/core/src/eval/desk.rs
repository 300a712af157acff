use std::collections::BTreeMap;
use std::path::Path;

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lm::{pretrain, BaseModel, PretrainLog};
use crate::lora::TrainLog;
use crate::registry::Store;

/// A fully built desk pipeline: pretrained base, one adapter per group and
/// a fitted retriever, all held in a registry store.
pub struct Desk {
    pub config: ExperimentConfig,
    pub store: Store,
    pub pretrain_log: PretrainLog,
    pub train_logs: BTreeMap<String, TrainLog>,
    /// Per group, the evaluation documents: trained on, not held out.
    pub eval_docs: BTreeMap<String, Vec<String>>,
    /// Text of every generated group document, kept so purged documents
    /// can still be scored.
    pub texts: BTreeMap<String, String>,
}

impl Desk {
    /// Builds the pipeline in `work_dir`, which is wiped first.
    pub fn build(config: &ExperimentConfig, work_dir: &Path) -> Result<Self> {
        config.validate()?;
        if work_dir.exists() {
            std::fs::remove_dir_all(work_dir)?;
        }
        let store = Store::init(work_dir)?;
        let docs = config.corpus.group_docs()?;
        store.ingest(&docs)?;

        let mut base = BaseModel::new(config.model)?;
        let pretrain_log = pretrain(&mut base, &config.corpus.neutral_docs()?, &config.pretrain)?;
        store.set_base(base)?;

        let groups: Vec<String> = store.snapshot().registry.groups.keys().cloned().collect();
        let mut train_logs = BTreeMap::new();
        for g in &groups {
            let (_, log) = store.train_group(g, &config.adapter)?;
            train_logs.insert(g.clone(), log);
        }
        let record = store.fit_retriever(&config.retriever, &config.heldout)?;

        let snap = store.snapshot();
        let mut eval_docs = BTreeMap::new();
        for g in snap.registry.groups.values() {
            let held = record.heldout.get(&g.group_id).cloned().unwrap_or_default();
            let ids: Vec<String> =
                g.document_ids.iter().filter(|d| !held.contains(d)).take(config.eval_docs_per_group).cloned().collect();
            if ids.is_empty() {
                return Err(Error::TooFewSamples(format!("group {} has no evaluation documents", g.group_id)));
            }
            eval_docs.insert(g.group_id.clone(), ids);
        }
        let texts = docs.into_iter().map(|d| (d.doc_id, d.text)).collect();
        Ok(Self { config: config.clone(), store, pretrain_log, train_logs, eval_docs, texts })
    }

    pub fn text(&self, doc_id: &str) -> Result<&[u8]> {
        self.texts.get(doc_id).map(|t| t.as_bytes()).ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))
    }

    /// `(group, doc_id)` for every evaluation document, in group order.
    pub fn eval_pairs(&self) -> Vec<(String, String)> {
        self.eval_docs.iter().flat_map(|(g, ds)| ds.iter().map(move |d| (g.clone(), d.clone()))).collect()
    }
}
