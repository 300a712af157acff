use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{
    AdapterRecord, AuditReport, BaseRecord, DocStatus, DocumentRecord, GroupRecord, PurgeAudit, PurgeReport, Registry,
    RetrieverRecord, UserCredential,
};
use crate::codec::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::CorpusDoc;
use crate::fsutil::write_atomic;
use crate::lm::BaseModel;
use crate::lora::{train_adapter, Adapter, AdapterConfig, AdapterMix, ComposedDelta, TrainLog, Weighting};
use crate::retriever::{EmbeddingProvider, HeldoutPolicy, RankedAdapters, Retriever, RetrieverConfig};

const REGISTRY_FILE: &str = "registry.json";
const LOCK_FILE: &str = ".lock";
const BASE_FILE: &str = "models/base.aswp";

pub(crate) fn content_path(hash: &str) -> String {
    format!("corpus/{hash}")
}

fn adapter_path(adapter_id: &str) -> String {
    format!("adapters/{adapter_id}.aswa")
}

/// Immutable view of one registry version with its loaded artifacts.
/// Readers hold an `Arc` to it, so a concurrent swap never tears a query.
#[derive(Debug)]
pub struct Snapshot {
    pub registry: Registry,
    base: Option<Arc<BaseModel>>,
    adapters: BTreeMap<String, Arc<Adapter>>,
    retriever: Option<Arc<Retriever>>,
}

impl Snapshot {
    pub fn base(&self) -> Result<&BaseModel> {
        self.base.as_deref().ok_or_else(|| Error::Config("no base model registered".into()))
    }

    pub fn adapter(&self, adapter_id: &str) -> Option<&Adapter> {
        self.adapters.get(adapter_id).map(Arc::as_ref)
    }

    pub fn retriever(&self) -> Result<&Retriever> {
        self.retriever.as_deref().ok_or_else(|| Error::Config("no retriever fitted".into()))
    }

    /// Embeds the query with the bare base model and ranks the adapters the
    /// user may access.
    pub fn route(&self, user: &UserCredential, query: &[u8], k: usize, weighting: Weighting) -> Result<RankedAdapters> {
        let accessible = self.registry.accessible_adapters(user);
        if accessible.is_empty() {
            return Err(Error::NoAccessibleAdapters);
        }
        let embedding = EmbeddingProvider::new(self.base()?).embed_query(query)?;
        self.retriever()?.rank(&embedding, &accessible, k, weighting)
    }

    pub fn compose(&self, mix: &AdapterMix) -> Result<ComposedDelta> {
        ComposedDelta::from_mix(mix, |id| self.adapter(id))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub added: usize,
    pub unchanged: usize,
    pub deduplicated: usize,
    pub skipped_purged: usize,
    pub groups: Vec<GroupRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    doc_id: String,
    label: String,
    text: String,
}

/// Removes the lock file when the write finishes or fails.
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Registry directory with content-addressed corpus, base checkpoint,
/// adapter and retriever files. Writers are serialized in-process by a
/// mutex and across processes by an exclusive lock file.
pub struct Store {
    root: PathBuf,
    current: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
}

impl Store {
    /// Creates an empty store, or opens the existing one at `root`.
    pub fn init(root: &Path) -> Result<Self> {
        if root.join(REGISTRY_FILE).exists() {
            return Self::open(root);
        }
        for dir in ["corpus", "models", "adapters", "retriever"] {
            fs::create_dir_all(root.join(dir))?;
        }
        let registry = Registry::default();
        write_atomic(&root.join(REGISTRY_FILE), registry.to_canonical_json()?.as_bytes())?;
        Self::open(root)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let snapshot = load_snapshot(root)?;
        Ok(Self { root: root.to_path_buf(), current: RwLock::new(Arc::new(snapshot)), writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.current.read().expect("snapshot lock poisoned"))
    }

    fn lock(&self) -> Result<(std::sync::MutexGuard<'_, ()>, LockGuard)> {
        let guard = self.writer.lock().map_err(|_| Error::Locked)?;
        let path = self.root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok((guard, LockGuard(path)))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked),
            Err(e) => Err(e.into()),
        }
    }

    /// Persists `registry` (the commit point) and swaps in a snapshot built
    /// from it, reusing already-loaded artifacts.
    fn commit(
        &self,
        registry: Registry,
        extra: BTreeMap<String, Arc<Adapter>>,
        retriever: Option<Option<Arc<Retriever>>>,
        base: Option<Arc<BaseModel>>,
    ) -> Result<Arc<Snapshot>> {
        write_atomic(&self.root.join(REGISTRY_FILE), registry.to_canonical_json()?.as_bytes())?;
        let old = self.snapshot();
        let mut adapters = BTreeMap::new();
        for g in registry.groups.values() {
            if let Some(id) = &g.adapter_id {
                let a = extra.get(id).or_else(|| old.adapters.get(id)).cloned();
                let a = match a {
                    Some(a) => a,
                    None => Arc::new(read_adapter(&self.root, &registry, id)?),
                };
                adapters.insert(id.clone(), a);
            }
        }
        let snapshot = Arc::new(Snapshot {
            base: base.or_else(|| old.base.clone()),
            retriever: retriever.unwrap_or_else(|| old.retriever.clone()),
            adapters,
            registry,
        });
        *self.current.write().expect("snapshot lock poisoned") = Arc::clone(&snapshot);
        Ok(snapshot)
    }

    /// Reads a JSON-lines corpus of `{doc_id, label, text}` objects.
    pub fn read_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
        let file = fs::File::open(path)?;
        let mut docs = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CorpusLine =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            docs.push(CorpusDoc { doc_id: l.doc_id, label: l.label, text: l.text });
        }
        Ok(docs)
    }

    /// Hashes, deduplicates (by content within a label) and stores documents.
    /// Re-ingesting known documents changes nothing; a purged id is never
    /// resurrected.
    pub fn ingest(&self, docs: &[CorpusDoc]) -> Result<IngestReport> {
        let _lock = self.lock()?;
        let mut reg = self.snapshot().registry.clone();
        let mut report = IngestReport::default();
        let mut seen: BTreeMap<&str, (&str, String)> = BTreeMap::new();
        let mut touched = BTreeSet::new();
        for doc in docs {
            if doc.text.is_empty() {
                return Err(Error::EmptyDocument);
            }
            if doc.label.is_empty() {
                return Err(Error::Config(format!("document {} has no access label", doc.doc_id)));
            }
            let hash = sha256_hex(doc.text.as_bytes());
            if let Some((label, h)) = seen.get(doc.doc_id.as_str()) {
                if *label != doc.label || *h != hash {
                    return Err(Error::DuplicateDocId(doc.doc_id.clone()));
                }
                report.unchanged += 1;
                continue;
            }
            seen.insert(&doc.doc_id, (&doc.label, hash.clone()));
            if let Some(existing) = reg.documents.get(&doc.doc_id) {
                if existing.access_label != doc.label || existing.content_hash != hash {
                    return Err(Error::DuplicateDocId(doc.doc_id.clone()));
                }
                match existing.status {
                    DocStatus::Active => report.unchanged += 1,
                    DocStatus::Purged => report.skipped_purged += 1,
                }
                continue;
            }
            let duplicate = reg
                .documents
                .values()
                .any(|d| d.status == DocStatus::Active && d.access_label == doc.label && d.content_hash == hash);
            if duplicate {
                report.deduplicated += 1;
                continue;
            }
            let rel = content_path(&hash);
            let path = self.root.join(&rel);
            if !path.exists() {
                write_atomic(&path, doc.text.as_bytes())?;
            }
            reg.documents.insert(
                doc.doc_id.clone(),
                DocumentRecord {
                    doc_id: doc.doc_id.clone(),
                    group_id: doc.label.clone(),
                    access_label: doc.label.clone(),
                    content_hash: hash,
                    byte_length: doc.text.len() as u64,
                    status: DocStatus::Active,
                    stored_path: Some(rel),
                },
            );
            touched.insert(doc.label.clone());
            report.added += 1;
        }
        let mut removed = Vec::new();
        for label in &touched {
            removed.extend(reg.regroup(label));
        }
        let doomed = drop_groups(&mut reg, &removed);
        report.groups = reg.groups.values().cloned().collect();
        self.commit(reg, BTreeMap::new(), None, None)?;
        self.remove_files(&doomed);
        Ok(report)
    }

    /// Splits an access label into `⌈n/max_docs⌉` shards by sorted content
    /// hash; each shard inherits the label. Shards replace the old groups.
    pub fn shard_group(&self, label: &str, max_docs: usize) -> Result<Vec<GroupRecord>> {
        if max_docs == 0 {
            return Err(Error::Config("max_docs must be at least 1".into()));
        }
        let _lock = self.lock()?;
        let mut reg = self.snapshot().registry.clone();
        if !reg.groups.values().any(|g| g.access_label == label) {
            return Err(Error::UnknownGroup(label.to_string()));
        }
        reg.sharding.insert(label.to_string(), max_docs);
        let removed = reg.regroup(label);
        let doomed = drop_groups(&mut reg, &removed);
        let shards = reg.groups.values().filter(|g| g.access_label == label).cloned().collect();
        self.commit(reg, BTreeMap::new(), None, None)?;
        self.remove_files(&doomed);
        Ok(shards)
    }

    /// Registers a frozen base model. Replacing a base is refused while
    /// adapters depend on it.
    pub fn set_base(&self, model: BaseModel) -> Result<String> {
        if !model.is_frozen() {
            return Err(Error::NotFrozen);
        }
        let _lock = self.lock()?;
        let mut reg = self.snapshot().registry.clone();
        let hash = model.weights_hash();
        if let Some(b) = &reg.base {
            if b.weights_hash == hash {
                return Ok(hash);
            }
            if !reg.adapters.is_empty() {
                return Err(Error::BaseHashMismatch { expected: b.weights_hash.clone(), found: hash });
            }
        }
        model.save(&self.root.join(BASE_FILE))?;
        reg.base = Some(BaseRecord { weights_hash: hash.clone(), file: BASE_FILE.into(), config: *model.config() });
        self.commit(reg, BTreeMap::new(), None, Some(Arc::new(model)))?;
        Ok(hash)
    }

    fn group_docs(&self, reg: &Registry, group_id: &str) -> Result<Vec<Vec<u8>>> {
        let g = reg.group(group_id)?;
        g.document_ids.iter().map(|d| read_doc(&self.root, &reg.documents[d])).collect()
    }

    /// Trains the group's adapter on its active documents and registers it.
    pub fn train_group(&self, group_id: &str, config: &AdapterConfig) -> Result<(String, TrainLog)> {
        let snap = self.snapshot();
        let base = snap.base()?;
        let docs = self.group_docs(&snap.registry, group_id)?;
        let refs: Vec<&[u8]> = docs.iter().map(Vec::as_slice).collect();
        let (adapter, log) = train_adapter(base, group_id, &refs, config)?;
        let id = adapter.adapter_id.clone();
        self.register_adapter(group_id, adapter)?;
        Ok((id, log))
    }

    /// Makes `adapter` the group's live adapter. The previous adapter stays
    /// registered and on disk.
    pub fn register_adapter(&self, group_id: &str, adapter: Adapter) -> Result<GroupRecord> {
        let _lock = self.lock()?;
        let snap = self.snapshot();
        let mut reg = snap.registry.clone();
        let base_hash = reg.base.as_ref().map(|b| b.weights_hash.clone()).unwrap_or_default();
        let group = reg.group(group_id)?.clone();
        if adapter.group_id != group_id {
            return Err(Error::Config(format!("adapter belongs to group {}", adapter.group_id)));
        }
        if adapter.manifest_hash != group.manifest_hash {
            return Err(Error::ManifestMismatch { adapter: adapter.manifest_hash.clone(), group: group.manifest_hash });
        }
        if adapter.base_model_hash != base_hash {
            return Err(Error::BaseHashMismatch { expected: base_hash, found: adapter.base_model_hash.clone() });
        }
        let file = adapter_path(&adapter.adapter_id);
        write_atomic(&self.root.join(&file), &adapter.to_bytes()?)?;
        reg.adapters.insert(
            adapter.adapter_id.clone(),
            AdapterRecord {
                adapter_id: adapter.adapter_id.clone(),
                group_id: group_id.to_string(),
                file,
                manifest_hash: adapter.manifest_hash.clone(),
                base_model_hash: adapter.base_model_hash.clone(),
                config: adapter.config,
            },
        );
        let g = reg.groups.get_mut(group_id).expect("group checked");
        g.adapter_id = Some(adapter.adapter_id.clone());
        let updated = g.clone();
        let extra = BTreeMap::from([(adapter.adapter_id.clone(), Arc::new(adapter))]);
        self.commit(reg, extra, None, None)?;
        Ok(updated)
    }

    /// Fits a new retriever over every group's held-out documents.
    pub fn fit_retriever(&self, config: &RetrieverConfig, policy: &HeldoutPolicy) -> Result<RetrieverRecord> {
        let _lock = self.lock()?;
        let snap = self.snapshot();
        let mut reg = snap.registry.clone();
        let (retriever, heldout) = build_retriever(&self.root, &reg, snap.base()?, config, policy)?;
        let old = reg.retriever.as_ref().map(|r| r.file.clone());
        let record = self.write_retriever(&reg, &retriever, *config, *policy, heldout)?;
        reg.retriever = Some(record.clone());
        self.commit(reg, BTreeMap::new(), Some(Some(Arc::new(retriever))), None)?;
        if let Some(old) = old.filter(|o| *o != record.file) {
            self.remove_files(&[old]);
        }
        Ok(record)
    }

    fn write_retriever(
        &self,
        reg: &Registry,
        retriever: &Retriever,
        config: RetrieverConfig,
        policy: HeldoutPolicy,
        heldout: BTreeMap<String, Vec<String>>,
    ) -> Result<RetrieverRecord> {
        let version = reg.retriever.as_ref().map_or(1, |r| r.version + 1);
        let file = format!("retriever/retriever-v{version}.aswr");
        retriever.save(&self.root.join(&file))?;
        Ok(RetrieverRecord { version, file, config, heldout_policy: policy, heldout })
    }

    /// Deletes a document and retrains only its group's adapter on the
    /// retained documents, then refits the retriever. Nothing is committed
    /// until every new artifact exists and passed the determinism check, so
    /// a failure leaves the old state live and the purge can be retried.
    pub fn purge_document(&self, doc_id: &str) -> Result<PurgeReport> {
        let _lock = self.lock()?;
        let snap = self.snapshot();
        let mut reg = snap.registry.clone();
        let doc = reg.document(doc_id)?.clone();
        if doc.status == DocStatus::Purged {
            return Err(Error::AlreadyPurged(doc_id.to_string()));
        }
        let group_id = doc.group_id.clone();
        let old_adapter_id = reg.group(&group_id)?.adapter_id.clone();
        let old_config = old_adapter_id.as_ref().and_then(|id| reg.adapters.get(id)).map(|r| r.config);

        {
            let rec = reg.documents.get_mut(doc_id).expect("checked above");
            rec.status = DocStatus::Purged;
            rec.stored_path = None;
        }
        let removed = reg.regroup(&doc.access_label);
        let mut doomed = drop_groups(&mut reg, &removed);
        // The purged document's group may have been renamed by resharding.
        let survivor = reg.groups.values().find(|g| g.group_id == group_id).cloned();

        let mut new_adapter = None;
        let mut retrain_seconds = 0.0;
        let mut retrain_tokens = 0;
        let mut determinism = true;
        if let (Some(group), Some(config)) = (&survivor, old_config) {
            let base = snap.base()?;
            let docs = self.group_docs(&reg, &group.group_id)?;
            let refs: Vec<&[u8]> = docs.iter().map(Vec::as_slice).collect();
            let (adapter, log) = train_adapter(base, &group.group_id, &refs, &config)?;
            retrain_seconds = log.seconds;
            retrain_tokens = log.tokens;
            let fresh_docs = self.group_docs(&reg, &group.group_id)?;
            let fresh_refs: Vec<&[u8]> = fresh_docs.iter().map(Vec::as_slice).collect();
            let (check, _) = train_adapter(base, &group.group_id, &fresh_refs, &config)?;
            determinism &= check.to_bytes()? == adapter.to_bytes()?;
            new_adapter = Some(adapter);
        }
        if let Some(old) = &old_adapter_id {
            if let Some(rec) = reg.adapters.remove(old) {
                doomed.push(rec.file);
            }
            if let Some(g) = reg.groups.get_mut(&group_id) {
                g.adapter_id = None;
            }
        }
        let mut extra = BTreeMap::new();
        if let Some(adapter) = &new_adapter {
            let file = adapter_path(&adapter.adapter_id);
            write_atomic(&self.root.join(&file), &adapter.to_bytes()?)?;
            reg.adapters.insert(
                adapter.adapter_id.clone(),
                AdapterRecord {
                    adapter_id: adapter.adapter_id.clone(),
                    group_id: adapter.group_id.clone(),
                    file,
                    manifest_hash: adapter.manifest_hash.clone(),
                    base_model_hash: adapter.base_model_hash.clone(),
                    config: adapter.config,
                },
            );
            reg.groups.get_mut(&adapter.group_id).expect("survivor").adapter_id = Some(adapter.adapter_id.clone());
            extra.insert(adapter.adapter_id.clone(), Arc::new(adapter.clone()));
        }

        let mut retriever_update = None;
        let mut retriever_refit = false;
        if let Some(old) = reg.retriever.clone() {
            doomed.push(old.file.clone());
            let refit = build_retriever(&self.root, &reg, snap.base()?, &old.config, &old.heldout_policy);
            match refit {
                Ok((retriever, heldout)) => {
                    let (again, _) = build_retriever(&self.root, &reg, snap.base()?, &old.config, &old.heldout_policy)?;
                    determinism &= again.to_bytes() == retriever.to_bytes();
                    let record = self.write_retriever(&reg, &retriever, old.config, old.heldout_policy, heldout)?;
                    reg.retriever = Some(record);
                    retriever_update = Some(Some(Arc::new(retriever)));
                    retriever_refit = true;
                }
                // Too few groups or samples remain to fit a retriever.
                Err(Error::TooFewSamples(_)) => {
                    reg.retriever = None;
                    retriever_update = Some(None);
                }
                Err(e) => return Err(e),
            }
        }
        if !determinism {
            return Err(Error::Config("retraining is not deterministic; purge aborted".into()));
        }

        self.commit(reg, extra, retriever_update, None)?;
        let after = self.snapshot();
        let shared = after
            .registry
            .documents
            .values()
            .any(|d| d.status == DocStatus::Active && d.content_hash == doc.content_hash);
        if !shared {
            doomed.push(content_path(&doc.content_hash));
        }
        self.remove_files(&doomed);

        let bytes_gone = shared || !self.root.join(content_path(&doc.content_hash)).exists();
        let manifest_clean = after.registry.groups.values().all(|g| {
            !g.document_ids.iter().any(|d| d == doc_id)
                && g.adapter_id
                    .as_ref()
                    .is_none_or(|id| after.adapter(id).is_some_and(|a| a.manifest_hash == g.manifest_hash))
        });
        Ok(PurgeReport {
            doc_id: doc_id.to_string(),
            group_id,
            old_adapter_id,
            new_adapter_id: new_adapter.map(|a| a.adapter_id),
            retrain_seconds,
            retrain_tokens,
            retriever_refit,
            audit: PurgeAudit {
                doc_absent_from_store: bytes_gone,
                doc_absent_from_manifest: manifest_clean,
                determinism_check_passed: determinism,
            },
        })
    }

    /// Re-reads the registry and every artifact from disk and reports
    /// inconsistencies.
    pub fn audit(&self) -> Result<AuditReport> {
        let text = fs::read_to_string(self.root.join(REGISTRY_FILE))?;
        let reg = Registry::from_json(&text)?;
        let mut report = reg.audit(&self.root);
        if let Some(b) = &reg.base {
            match BaseModel::load(&self.root.join(&b.file)) {
                Ok(m) if m.weights_hash() == b.weights_hash => {}
                _ => report.push("base-mismatch", "base", "checkpoint missing or hash differs"),
            }
        }
        Ok(report)
    }

    fn remove_files(&self, rel: &[String]) {
        for r in rel {
            let _ = fs::remove_file(self.root.join(r));
        }
    }
}

/// Unregisters the adapters of vanished groups and returns their files.
fn drop_groups(reg: &mut Registry, removed: &[String]) -> Vec<String> {
    let mut files = Vec::new();
    let doomed: Vec<String> =
        reg.adapters.values().filter(|a| removed.contains(&a.group_id)).map(|a| a.adapter_id.clone()).collect();
    for id in doomed {
        if let Some(rec) = reg.adapters.remove(&id) {
            files.push(rec.file);
        }
    }
    files
}

fn read_doc(root: &Path, rec: &DocumentRecord) -> Result<Vec<u8>> {
    let rel = rec.stored_path.as_ref().ok_or_else(|| Error::AlreadyPurged(rec.doc_id.clone()))?;
    let bytes = fs::read(root.join(rel))?;
    if sha256_hex(&bytes) != rec.content_hash {
        return Err(Error::Format(format!("stored bytes of {} do not match their hash", rec.doc_id)));
    }
    Ok(bytes)
}

fn read_adapter(root: &Path, reg: &Registry, adapter_id: &str) -> Result<Adapter> {
    let rec = reg.adapters.get(adapter_id).ok_or_else(|| Error::UnknownAdapter(adapter_id.to_string()))?;
    let base = reg.base.as_ref().ok_or_else(|| Error::Config("no base model registered".into()))?;
    let mut adapter = Adapter::from_bytes(&fs::read(root.join(&rec.file))?, &base.config)?;
    if adapter.adapter_id != adapter_id {
        return Err(Error::Format(format!("{} holds adapter {}", rec.file, adapter.adapter_id)));
    }
    adapter.config = rec.config;
    Ok(adapter)
}

/// Embeds every group's held-out prompts and fits a retriever.
fn build_retriever(
    root: &Path,
    reg: &Registry,
    base: &BaseModel,
    config: &RetrieverConfig,
    policy: &HeldoutPolicy,
) -> Result<(Retriever, BTreeMap<String, Vec<String>>)> {
    let provider = EmbeddingProvider::new(base);
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut heldout = BTreeMap::new();
    for g in reg.groups.values() {
        let hashes = reg.group_hashes(&g.group_id)?;
        let chosen: BTreeSet<String> = policy.select(&g.group_id, &hashes).into_iter().collect();
        let mut ids = Vec::new();
        for d in &g.document_ids {
            let rec = &reg.documents[d];
            if chosen.contains(&rec.content_hash) {
                vectors.push(provider.embed_prompt(&read_doc(root, rec)?)?);
                labels.push(g.group_id.clone());
                ids.push(d.clone());
            }
        }
        heldout.insert(g.group_id.clone(), ids);
    }
    let retriever = Retriever::fit(&vectors, &labels, config)?;
    Ok((retriever, heldout))
}

/// Loads the registry and its live artifacts. A concurrent purge may delete
/// files between reading the registry and the artifacts, so a missing file
/// triggers a re-read.
fn load_snapshot(root: &Path) -> Result<Snapshot> {
    let mut attempt = 0;
    loop {
        match try_load(root) {
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound && attempt < 3 => attempt += 1,
            other => return other,
        }
    }
}

fn try_load(root: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(root.join(REGISTRY_FILE))?;
    let registry = Registry::from_json(&text)?;
    let base = match &registry.base {
        Some(b) => {
            let m = BaseModel::load(&root.join(&b.file))?;
            if m.weights_hash() != b.weights_hash {
                return Err(Error::BaseHashMismatch { expected: b.weights_hash.clone(), found: m.weights_hash() });
            }
            Some(Arc::new(m))
        }
        None => None,
    };
    let mut adapters = BTreeMap::new();
    for g in registry.groups.values() {
        if let Some(id) = &g.adapter_id {
            adapters.insert(id.clone(), Arc::new(read_adapter(root, &registry, id)?));
        }
    }
    let retriever = match &registry.retriever {
        Some(r) => Some(Arc::new(Retriever::load(&root.join(&r.file))?)),
        None => None,
    };
    Ok(Snapshot { registry, base, adapters, retriever })
}
