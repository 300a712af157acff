mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use adapterswap::eval::CorpusDoc;
use adapterswap::lora::{train_adapter, Weighting};
use adapterswap::registry::{DocStatus, Store, UserCredential};
use adapterswap::Error;
use common::{build_store, tiny_adapter, tiny_base, tiny_spec};

fn corpus() -> Vec<CorpusDoc> {
    tiny_spec().group_docs().unwrap()
}

fn read(store: &Store, rel: &str) -> Vec<u8> {
    std::fs::read(store.root().join(rel)).unwrap()
}

#[test]
fn clean_build_audits_clean() {
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &corpus(), tiny_base());
    let report = store.audit().unwrap();
    assert!(report.is_clean(), "{:?}", report.violations);
    let snap = store.snapshot();
    assert_eq!(snap.registry.groups.len(), 3);
    assert_eq!(snap.registry.adapters.len(), 3);
    // Reopening from disk yields the same registry.
    let reopened = Store::open(dir.path()).unwrap();
    assert_eq!(reopened.snapshot().registry, snap.registry);
}

#[test]
fn ingest_is_idempotent_and_deduplicates() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::init(dir.path()).unwrap();
    let docs = corpus();
    let first = store.ingest(&docs).unwrap();
    assert_eq!(first.added, docs.len());
    let again = store.ingest(&docs).unwrap();
    assert_eq!((again.added, again.unchanged), (0, docs.len()));

    let copy = CorpusDoc { doc_id: "copy".into(), ..docs[0].clone() };
    assert_eq!(store.ingest(&[copy]).unwrap().deduplicated, 1);

    let clash = CorpusDoc { text: "different".into(), ..docs[0].clone() };
    assert!(matches!(store.ingest(&[clash]), Err(Error::DuplicateDocId(_))));
}

#[test]
fn purge_matches_from_scratch_build_and_audits_clean() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &docs, tiny_base());
    let victim = &docs[3];
    let old_adapter = store.snapshot().registry.group(&victim.label).unwrap().adapter_id.clone().unwrap();

    let report = store.purge_document(&victim.doc_id).unwrap();
    assert!(report.audit.doc_absent_from_store && report.audit.doc_absent_from_manifest);
    assert!(report.audit.determinism_check_passed && report.retriever_refit);
    assert_eq!(report.old_adapter_id.as_deref(), Some(old_adapter.as_str()));
    assert!(!store.root().join(format!("adapters/{old_adapter}.aswa")).exists());
    assert!(store.audit().unwrap().is_clean());

    // Removal guarantee: a from-scratch build over the retained corpus
    // produces bitwise-identical live artifacts.
    let retained: Vec<CorpusDoc> = docs.iter().filter(|d| d.doc_id != victim.doc_id).cloned().collect();
    let scratch_dir = tempfile::tempdir().unwrap();
    let scratch = build_store(scratch_dir.path(), &retained, tiny_base());
    let (a, b) = (store.snapshot(), scratch.snapshot());
    for (g, rec) in &a.registry.groups {
        let other = &b.registry.groups[g];
        assert_eq!(rec.adapter_id, other.adapter_id);
        let file = &a.registry.adapters[rec.adapter_id.as_ref().unwrap()].file;
        assert_eq!(read(&store, file), read(&scratch, file));
    }
    let (ra, rb) = (a.registry.retriever.as_ref().unwrap(), b.registry.retriever.as_ref().unwrap());
    assert_eq!(ra.heldout, rb.heldout);
    assert_eq!(read(&store, &ra.file), read(&scratch, &rb.file));
}

#[test]
fn purge_errors_and_reingest() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &docs, tiny_base());
    store.purge_document(&docs[0].doc_id).unwrap();
    assert!(matches!(store.purge_document(&docs[0].doc_id), Err(Error::AlreadyPurged(_))));
    assert!(matches!(store.purge_document("nope"), Err(Error::UnknownDocument(_))));
    let report = store.ingest(&docs[..1]).unwrap();
    assert_eq!(report.skipped_purged, 1);
    assert_eq!(store.snapshot().registry.document(&docs[0].doc_id).unwrap().status, DocStatus::Purged);
}

#[test]
fn purging_a_whole_group_drops_its_adapter() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &docs, tiny_base());
    let label = docs[0].label.clone();
    let members: Vec<&CorpusDoc> = docs.iter().filter(|d| d.label == label).collect();
    let mut last = None;
    for d in &members {
        last = Some(store.purge_document(&d.doc_id).unwrap());
    }
    assert_eq!(last.unwrap().new_adapter_id, None);
    let snap = store.snapshot();
    assert!(!snap.registry.groups.contains_key(&label));
    assert!(snap.registry.adapters.values().all(|a| a.group_id != label));
    assert!(store.audit().unwrap().is_clean());
}

#[test]
fn audit_detects_tampering() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &docs, tiny_base());
    let victim = docs[1].clone();
    let snap = store.snapshot();
    let hash = snap.registry.document(&victim.doc_id).unwrap().content_hash.clone();
    store.purge_document(&victim.doc_id).unwrap();

    std::fs::write(store.root().join(format!("corpus/{hash}")), victim.text.as_bytes()).unwrap();
    let report = store.audit().unwrap();
    assert!(report.violations.iter().any(|v| v.kind == "orphan-content"), "{:?}", report.violations);
    std::fs::remove_file(store.root().join(format!("corpus/{hash}"))).unwrap();

    // Files the registry never referenced, e.g. leftovers of an interrupted write.
    std::fs::write(store.root().join("adapters/stray.aswa"), b"x").unwrap();
    let report = store.audit().unwrap();
    assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
    assert_eq!(
        (report.violations[0].kind.as_str(), report.violations[0].subject.as_str()),
        ("orphan-file", "adapters/stray.aswa")
    );
    std::fs::remove_file(store.root().join("adapters/stray.aswa")).unwrap();
    assert!(store.audit().unwrap().is_clean());

    // Swap the live adapter file for one trained on a different document set.
    let snap = store.snapshot();
    let group = snap.registry.group(&victim.label).unwrap();
    let live = group.adapter_id.clone().unwrap();
    let texts: Vec<&[u8]> = docs.iter().filter(|d| d.label == victim.label).map(|d| d.text.as_bytes()).collect();
    let (mut stale, _) = train_adapter(snap.base().unwrap(), &victim.label, &texts, &tiny_adapter()).unwrap();
    stale.adapter_id = live.clone();
    std::fs::write(store.root().join(format!("adapters/{live}.aswa")), stale.to_bytes().unwrap()).unwrap();
    let report = store.audit().unwrap();
    assert!(report.violations.iter().any(|v| v.kind == "stale-manifest"), "{:?}", report.violations);
}

#[test]
fn routing_respects_labels() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &docs, tiny_base());
    let snap = store.snapshot();
    let nobody = UserCredential::new::<&str>("nobody", []);
    assert!(matches!(snap.route(&nobody, b"abc", 1, Weighting::Uniform), Err(Error::NoAccessibleAdapters)));

    let label = docs[0].label.clone();
    let user = UserCredential::new("u", [label.as_str()]);
    let ranked = snap.route(&user, docs[15].text.as_bytes(), 3, Weighting::DensitySoftmax).unwrap();
    assert_eq!(ranked.entries.len(), 1);
    for e in &ranked.entries {
        assert!(snap.registry.check_access(&user, &e.adapter_id).unwrap());
        assert_eq!(snap.registry.group(&e.group_id).unwrap().access_label, label);
    }
    let mix = ranked.mix().unwrap();
    snap.compose(&mix).unwrap();
    assert!(matches!(snap.registry.check_access(&user, "missing"), Err(Error::UnknownAdapter(_))));
}

#[test]
fn sharding_splits_by_ceiling_and_unregisters_the_old_adapter() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &docs, tiny_base());
    let label = docs[0].label.clone();
    let old = store.snapshot().registry.group(&label).unwrap().adapter_id.clone().unwrap();
    let shards = store.shard_group(&label, 4).unwrap();
    let sizes: Vec<usize> = shards.iter().map(|g| g.document_ids.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    assert!(shards.iter().all(|g| g.shard_of.as_deref() == Some(label.as_str()) && g.adapter_id.is_none()));
    let snap = store.snapshot();
    assert!(!snap.registry.adapters.contains_key(&old));
    assert!(!store.root().join(format!("adapters/{old}.aswa")).exists());
    for g in &shards {
        store.train_group(&g.group_id, &tiny_adapter()).unwrap();
    }
    let user = UserCredential::new("u", [label.as_str()]);
    assert_eq!(store.snapshot().registry.accessible_adapters(&user).len(), 3);
}

#[test]
fn writers_are_exclusive_and_checked() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = build_store(dir.path(), &docs, tiny_base());
    std::fs::write(dir.path().join(".lock"), "other").unwrap();
    assert!(matches!(store.purge_document(&docs[0].doc_id), Err(Error::Locked)));
    std::fs::remove_file(dir.path().join(".lock")).unwrap();

    // Manifest binding: an adapter trained on other documents is refused.
    let snap = store.snapshot();
    let label = &docs[0].label;
    let (wrong, _) = train_adapter(snap.base().unwrap(), label, &[docs[0].text.as_bytes()], &tiny_adapter()).unwrap();
    assert!(matches!(store.register_adapter(label, wrong), Err(Error::ManifestMismatch { .. })));

    // A different base cannot replace one that adapters depend on.
    let mut other = adapterswap::lm::BaseModel::new(common::tiny_model()).unwrap();
    other.freeze();
    assert!(matches!(store.set_base(other), Err(Error::BaseHashMismatch { .. })));
}

#[test]
fn readers_see_old_or_new_state_during_purge() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(build_store(dir.path(), &docs, tiny_base()));
    let done = Arc::new(AtomicBool::new(false));
    let reader = {
        let (store, done) = (Arc::clone(&store), Arc::clone(&done));
        std::thread::spawn(move || {
            let mut checks = 0;
            while !done.load(Ordering::SeqCst) || checks == 0 {
                let snap = store.snapshot();
                for g in snap.registry.groups.values() {
                    let a = snap.adapter(g.adapter_id.as_ref().unwrap()).expect("live adapter loaded");
                    assert_eq!(a.manifest_hash, g.manifest_hash);
                }
                let groups: Vec<&str> = snap.retriever().unwrap().group_ids();
                assert!(groups.iter().all(|g| snap.registry.groups.contains_key(*g)));
                let fresh = Store::open(store.root()).expect("on-disk state is always complete");
                assert!(fresh.snapshot().registry.groups.values().all(|g| g.adapter_id.is_some()));
                checks += 1;
            }
            checks
        })
    };
    store.purge_document(&docs[2].doc_id).unwrap();
    store.purge_document(&docs[12].doc_id).unwrap();
    done.store(true, Ordering::SeqCst);
    assert!(reader.join().unwrap() > 0);
}
