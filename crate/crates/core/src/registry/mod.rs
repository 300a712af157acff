//! Source of truth for corpus partitions, access labels, live adapters and
//! the retriever, with the purge-and-retrain workflow.

mod store;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use store::{IngestReport, Snapshot, Store};

use crate::codec::manifest_hash;
use crate::error::{Error, Result};
use crate::lm::ModelConfig;
use crate::lora::AdapterConfig;
use crate::retriever::{HeldoutPolicy, RetrieverConfig};

pub const REGISTRY_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocStatus {
    Active,
    Purged,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub group_id: String,
    pub access_label: String,
    pub content_hash: String,
    pub byte_length: u64,
    pub status: DocStatus,
    /// Store-relative path of the bytes; `None` once purged.
    pub stored_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: String,
    pub access_label: String,
    pub shard_of: Option<String>,
    /// Active members, sorted.
    pub document_ids: Vec<String>,
    pub adapter_id: Option<String>,
    pub manifest_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub adapter_id: String,
    pub group_id: String,
    pub file: String,
    pub manifest_hash: String,
    pub base_model_hash: String,
    pub config: AdapterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverRecord {
    pub version: u64,
    pub file: String,
    pub config: RetrieverConfig,
    pub heldout_policy: HeldoutPolicy,
    /// Held-out document ids per group, sorted.
    pub heldout: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub weights_hash: String,
    pub file: String,
    pub config: ModelConfig,
}

/// Persisted as canonical JSON (sorted keys) in `registry.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub format: u32,
    pub base: Option<BaseRecord>,
    pub groups: BTreeMap<String, GroupRecord>,
    pub documents: BTreeMap<String, DocumentRecord>,
    pub adapters: BTreeMap<String, AdapterRecord>,
    pub retriever: Option<RetrieverRecord>,
    /// Shard size limit per access label.
    pub sharding: BTreeMap<String, usize>,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            format: REGISTRY_FORMAT,
            base: None,
            groups: BTreeMap::new(),
            documents: BTreeMap::new(),
            adapters: BTreeMap::new(),
            retriever: None,
            sharding: BTreeMap::new(),
        }
    }
}

/// A user's access labels, captured once per request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCredential {
    pub user_id: String,
    pub labels: BTreeSet<String>,
}

impl UserCredential {
    pub fn new<S: Into<String>>(user_id: &str, labels: impl IntoIterator<Item = S>) -> Self {
        Self { user_id: user_id.to_string(), labels: labels.into_iter().map(Into::into).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgeAudit {
    pub doc_absent_from_store: bool,
    pub doc_absent_from_manifest: bool,
    pub determinism_check_passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurgeReport {
    pub doc_id: String,
    pub group_id: String,
    pub old_adapter_id: Option<String>,
    pub new_adapter_id: Option<String>,
    pub retrain_seconds: f64,
    pub retrain_tokens: usize,
    pub retriever_refit: bool,
    pub audit: PurgeAudit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: String,
    pub subject: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: &str, subject: &str, detail: impl Into<String>) {
        self.violations.push(Violation { kind: kind.into(), subject: subject.into(), detail: detail.into() });
    }
}

/// Splits `members` (content hash, doc id) into `⌈n/max_docs⌉` shards of
/// consecutive content hashes.
pub fn shard_members(members: &[(String, String)], max_docs: usize) -> Vec<Vec<(String, String)>> {
    let mut sorted = members.to_vec();
    sorted.sort();
    sorted.chunks(max_docs.max(1)).map(<[_]>::to_vec).collect()
}

impl Registry {
    pub fn from_json(text: &str) -> Result<Self> {
        let reg: Registry = serde_json::from_str(text)?;
        if reg.format != REGISTRY_FORMAT {
            return Err(Error::Format(format!("unsupported registry format {}", reg.format)));
        }
        Ok(reg)
    }

    /// Canonical form: keys sorted at every level, two-space indent.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    pub fn group(&self, group_id: &str) -> Result<&GroupRecord> {
        self.groups.get(group_id).ok_or_else(|| Error::UnknownGroup(group_id.to_string()))
    }

    pub fn document(&self, doc_id: &str) -> Result<&DocumentRecord> {
        self.documents.get(doc_id).ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))
    }

    /// Active content hashes of a group, in member order.
    pub fn group_hashes(&self, group_id: &str) -> Result<Vec<String>> {
        let g = self.group(group_id)?;
        Ok(g.document_ids.iter().map(|d| self.documents[d].content_hash.clone()).collect())
    }

    /// Allow iff the adapter's group label is among the user's labels.
    pub fn check_access(&self, user: &UserCredential, adapter_id: &str) -> Result<bool> {
        let rec = self.adapters.get(adapter_id).ok_or_else(|| Error::UnknownAdapter(adapter_id.to_string()))?;
        let label = match self.groups.get(&rec.group_id) {
            Some(g) => &g.access_label,
            None => return Ok(false),
        };
        Ok(user.labels.contains(label))
    }

    /// Live adapters the user may route to, keyed by group.
    pub fn accessible_adapters(&self, user: &UserCredential) -> BTreeMap<String, String> {
        self.groups
            .values()
            .filter(|g| user.labels.contains(&g.access_label))
            .filter_map(|g| g.adapter_id.as_ref().map(|a| (g.group_id.clone(), a.clone())))
            .collect()
    }

    /// Rebuilds the groups of one access label from its active documents,
    /// applying the label's shard limit. Groups whose membership is unchanged
    /// keep their adapter; returns the ids of groups that disappeared.
    pub(crate) fn regroup(&mut self, label: &str) -> Vec<String> {
        let members: Vec<(String, String)> = self
            .documents
            .values()
            .filter(|d| d.access_label == label && d.status == DocStatus::Active)
            .map(|d| (d.content_hash.clone(), d.doc_id.clone()))
            .collect();
        let max = self.sharding.get(label).copied().unwrap_or(usize::MAX);
        let shards = if members.is_empty() { Vec::new() } else { shard_members(&members, max) };
        let sharded = shards.len() > 1;
        let mut fresh = BTreeMap::new();
        for (i, shard) in shards.iter().enumerate() {
            let group_id = if sharded { format!("{label}.s{i}") } else { label.to_string() };
            let manifest = manifest_hash(shard.iter().map(|(h, _)| h.as_str()));
            let mut ids: Vec<String> = shard.iter().map(|(_, d)| d.clone()).collect();
            ids.sort();
            let adapter_id = self.groups.get(&group_id).and_then(|old| old.adapter_id.clone());
            fresh.insert(
                group_id.clone(),
                GroupRecord {
                    group_id,
                    access_label: label.to_string(),
                    shard_of: sharded.then(|| label.to_string()),
                    document_ids: ids,
                    adapter_id,
                    manifest_hash: manifest,
                },
            );
        }
        let stale: Vec<String> = self
            .groups
            .values()
            .filter(|g| g.access_label == label && !fresh.contains_key(&g.group_id))
            .map(|g| g.group_id.clone())
            .collect();
        for id in &stale {
            self.groups.remove(id);
        }
        for (id, g) in fresh {
            for d in &g.document_ids {
                self.documents.get_mut(d).expect("member exists").group_id = id.clone();
            }
            self.groups.insert(id, g);
        }
        stale
    }

    /// Compares registry state against the files under `root`.
    pub fn audit(&self, root: &std::path::Path) -> AuditReport {
        let mut report = AuditReport::default();
        let base_hash = self.base.as_ref().map(|b| b.weights_hash.clone());
        let model_cfg = self.base.as_ref().map(|b| b.config);
        let mut active_hashes = BTreeSet::new();
        for d in self.documents.values() {
            match d.status {
                DocStatus::Active => {
                    active_hashes.insert(d.content_hash.clone());
                    let ok = d
                        .stored_path
                        .as_ref()
                        .and_then(|p| std::fs::read(root.join(p)).ok())
                        .is_some_and(|b| crate::codec::sha256_hex(&b) == d.content_hash);
                    if !ok {
                        report.push("missing-content", &d.doc_id, "stored bytes missing or altered");
                    }
                }
                DocStatus::Purged => {
                    if d.stored_path.is_some() {
                        report.push("orphan-content", &d.doc_id, "purged record still points at bytes");
                    }
                }
            }
        }
        for d in self.documents.values().filter(|d| d.status == DocStatus::Purged) {
            if !active_hashes.contains(&d.content_hash) && root.join(store::content_path(&d.content_hash)).exists() {
                report.push("orphan-content", &d.doc_id, format!("bytes {} present after purge", d.content_hash));
            }
        }
        for g in self.groups.values() {
            let Some(id) = &g.adapter_id else { continue };
            let Some(rec) = self.adapters.get(id) else {
                report.push("missing-adapter", &g.group_id, format!("adapter {id} is not registered"));
                continue;
            };
            let parsed = match (std::fs::read(root.join(&rec.file)), model_cfg) {
                (Ok(bytes), Some(cfg)) => crate::lora::Adapter::from_bytes(&bytes, &cfg).ok(),
                _ => None,
            };
            let Some(adapter) = parsed else {
                report.push("missing-adapter", &g.group_id, format!("adapter file {} unreadable", rec.file));
                continue;
            };
            if adapter.manifest_hash != g.manifest_hash {
                report.push(
                    "stale-manifest",
                    &g.group_id,
                    format!("adapter {} manifest {} != group manifest {}", id, adapter.manifest_hash, g.manifest_hash),
                );
            }
            if adapter.adapter_id != *id {
                report.push("adapter-id-mismatch", &g.group_id, format!("file holds {}", adapter.adapter_id));
            }
            if Some(&adapter.base_model_hash) != base_hash.as_ref() {
                report.push("base-mismatch", id, format!("adapter base {}", adapter.base_model_hash));
            }
        }
        if let Some(r) = &self.retriever {
            let groups: BTreeSet<&String> = self.groups.keys().collect();
            let fitted: BTreeSet<&String> = r.heldout.keys().collect();
            if groups != fitted {
                report.push("retriever-stale", "retriever", "fitted groups differ from registry groups");
            }
            for (g, ids) in &r.heldout {
                for id in ids {
                    let live =
                        self.documents.get(id).is_some_and(|d| d.status == DocStatus::Active && &d.group_id == g);
                    if !live {
                        report.push("retriever-stale", id, format!("held-out document no longer active in {g}"));
                    }
                }
            }
            if !root.join(&r.file).exists() {
                report.push("missing-retriever", "retriever", format!("{} missing", r.file));
            }
        }
        self.sweep_unreferenced(root, &mut report);
        report
    }

    /// Reports artifact files the registry does not reference, such as
    /// leftovers of an interrupted purge. Hidden temp files are skipped.
    fn sweep_unreferenced(&self, root: &std::path::Path, report: &mut AuditReport) {
        let mut known: BTreeSet<String> =
            self.documents.values().map(|d| store::content_path(&d.content_hash)).collect();
        known.extend(self.adapters.values().map(|a| a.file.clone()));
        known.extend(self.retriever.iter().map(|r| r.file.clone()));
        for dir in ["corpus", "adapters", "retriever"] {
            let Ok(entries) = std::fs::read_dir(root.join(dir)) else { continue };
            let mut names: Vec<String> = entries.flatten().filter_map(|e| e.file_name().into_string().ok()).collect();
            names.sort();
            for name in names.into_iter().filter(|n| !n.starts_with('.')) {
                let rel = format!("{dir}/{name}");
                if !known.contains(&rel) {
                    report.push("orphan-file", &rel, "not referenced by the registry");
                }
            }
        }
    }
}
