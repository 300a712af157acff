use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean, Desk, OutputDir, ResultRow, LABELS};
use crate::codec::sha256_hex;
use crate::error::{Error, Result};
use crate::lm::{force_decode_nll, BaseModel};
use crate::lora::{continue_training, train_adapter, Adapter, AdapterMix, ComposedDelta};
use crate::registry::{shard_members, Snapshot, UserCredential};
use crate::retriever::{EmbeddingProvider, ProjectionKind, RankedAdapters, Retriever, RetrieverConfig};

fn perplexity(base: &BaseModel, delta: Option<&ComposedDelta>, text: &[u8], doc_id: &str) -> Result<f64> {
    Ok(force_decode_nll(base, delta, text, doc_id)?.perplexity)
}

fn single_adapter_perplexity(base: &BaseModel, adapter: &Adapter, text: &[u8], doc_id: &str) -> Result<f64> {
    let delta = ComposedDelta::from_mix(&AdapterMix::single(&adapter.adapter_id), |_| Some(adapter))?;
    perplexity(base, Some(&delta), text, doc_id)
}

fn ranked_perplexity(snap: &Snapshot, ranked: &RankedAdapters, text: &[u8], doc_id: &str) -> Result<f64> {
    let delta = snap.compose(&ranked.mix()?)?;
    perplexity(snap.base()?, Some(&delta), text, doc_id)
}

fn joined_groups(ranked: &RankedAdapters) -> String {
    ranked.entries.iter().map(|e| e.group_id.as_str()).collect::<Vec<_>>().join("|")
}

/// Every group of the snapshot mapped to its live adapter.
fn all_adapters(snap: &Snapshot) -> Result<BTreeMap<String, String>> {
    snap.registry
        .groups
        .values()
        .map(|g| {
            let id = g.adapter_id.clone().ok_or_else(|| Error::UntrainedGroup(g.group_id.clone()))?;
            Ok((g.group_id.clone(), id))
        })
        .collect()
}

/// Refits the snapshot's retriever on the same held-out documents with a
/// different projection.
fn refit_with(desk: &Desk, snap: &Snapshot, projection: ProjectionKind) -> Result<Retriever> {
    let record = snap.registry.retriever.as_ref().ok_or_else(|| Error::Config("no retriever fitted".into()))?;
    let provider = EmbeddingProvider::new(snap.base()?);
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (g, ids) in &record.heldout {
        for id in ids {
            vectors.push(provider.embed_prompt(desk.text(id)?)?);
            labels.push(g.clone());
        }
    }
    Retriever::fit(&vectors, &labels, &RetrieverConfig { projection, ..record.config })
}

/// One scored condition for one evaluation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDoc {
    pub doc_id: String,
    pub group_id: String,
    pub condition: String,
    pub perplexity: f64,
    /// Selected groups, best first, `|`-separated.
    pub selected: String,
    pub contains_oracle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub rows: Vec<ResultRow>,
    pub docs: Vec<RetrievalDoc>,
}

impl RetrievalResult {
    pub fn row(&self, condition: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn doc_perplexities(&self, condition: &str) -> Vec<f64> {
        self.docs.iter().filter(|d| d.condition == condition).map(|d| d.perplexity).collect()
    }
}

/// Completes every evaluation document under the base model, its oracle
/// adapter, the top-k LDA-routed mixes and the top-1 PCA-routed adapter.
pub fn retrieval_eval(desk: &Desk, out: &mut OutputDir) -> Result<RetrievalResult> {
    let snap = desk.store.snapshot();
    let base = snap.base()?;
    let lda = snap.retriever()?;
    let pca = refit_with(desk, &snap, ProjectionKind::Pca)?;
    let accessible = all_adapters(&snap)?;
    let provider = EmbeddingProvider::new(base);
    let mut conditions: Vec<String> = vec!["base".into(), "oracle".into()];
    conditions.extend(desk.config.modes.iter().map(|k| format!("top-{k}")));
    conditions.push("top-1 PCA".into());

    let mut docs = Vec::new();
    for (group, doc_id) in desk.eval_pairs() {
        let text = desk.text(&doc_id)?;
        let doc = |condition: &str, ppl: f64, selected: String, contains: bool| RetrievalDoc {
            doc_id: doc_id.clone(),
            group_id: group.clone(),
            condition: condition.into(),
            perplexity: ppl,
            selected,
            contains_oracle: contains,
        };
        docs.push(doc("base", perplexity(base, None, text, &doc_id)?, String::new(), false));
        let oracle = snap.adapter(&accessible[&group]).ok_or_else(|| Error::UntrainedGroup(group.clone()))?;
        docs.push(doc("oracle", single_adapter_perplexity(base, oracle, text, &doc_id)?, group.clone(), true));
        let query = provider.embed_prompt(text)?;
        for &k in &desk.config.modes {
            let ranked = lda.rank(&query, &accessible, k, desk.config.weighting)?;
            let contains = ranked.entries.iter().any(|e| e.group_id == group);
            let ppl = ranked_perplexity(&snap, &ranked, text, &doc_id)?;
            docs.push(doc(&format!("top-{k}"), ppl, joined_groups(&ranked), contains));
        }
        let ranked = pca.rank(&query, &accessible, 1, desk.config.weighting)?;
        let contains = ranked.entries[0].group_id == group;
        let ppl = ranked_perplexity(&snap, &ranked, text, &doc_id)?;
        docs.push(doc("top-1 PCA", ppl, joined_groups(&ranked), contains));
    }

    let rows = conditions
        .iter()
        .map(|c| {
            let these: Vec<&RetrievalDoc> = docs.iter().filter(|d| &d.condition == c).collect();
            let ppl = mean(these.iter().map(|d| d.perplexity));
            let acc = (c != "base").then(|| mean(these.iter().map(|d| f64::from(u8::from(d.contains_oracle)))));
            ResultRow::new("retrieval", c, ppl, acc)
        })
        .collect::<Vec<_>>();
    out.write_csv("retrieval.csv", &rows)?;
    out.write_csv("retrieval_docs.csv", &docs)?;
    Ok(RetrievalResult { rows, docs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessDoc {
    pub doc_id: String,
    pub group_id: String,
    pub condition: String,
    pub perplexity: f64,
    pub selected: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessTrials {
    pub trials: usize,
    pub answered: usize,
    pub denied: usize,
    pub restricted_selections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccessResult {
    pub rows: Vec<ResultRow>,
    pub docs: Vec<AccessDoc>,
    pub trials: AccessTrials,
}

/// With Access routes top-1 over every adapter; No Access hides the
/// document's own group. Randomized trials then check that no selection
/// ever falls outside the caller's labels.
pub fn access_control_eval(desk: &Desk, out: &mut OutputDir) -> Result<AccessResult> {
    let snap = desk.store.snapshot();
    let base = snap.base()?;
    let retriever = snap.retriever()?;
    let accessible = all_adapters(&snap)?;
    if accessible.len() < 2 {
        return Err(Error::TooFewSamples("access control needs at least two adapters".into()));
    }
    let provider = EmbeddingProvider::new(base);
    let weighting = desk.config.weighting;
    let mut docs = Vec::new();
    for (group, doc_id) in desk.eval_pairs() {
        let text = desk.text(&doc_id)?;
        let query = provider.embed_prompt(text)?;
        let mut restricted = accessible.clone();
        restricted.remove(&group);
        for (condition, allowed) in [("With Access", &accessible), ("No Access", &restricted)] {
            let ranked = retriever.rank(&query, allowed, 1, weighting)?;
            docs.push(AccessDoc {
                doc_id: doc_id.clone(),
                group_id: group.clone(),
                condition: condition.into(),
                perplexity: ranked_perplexity(&snap, &ranked, text, &doc_id)?,
                selected: joined_groups(&ranked),
            });
        }
    }
    let rows: Vec<ResultRow> = ["With Access", "No Access"]
        .iter()
        .map(|c| {
            ResultRow::new("access", c, mean(docs.iter().filter(|d| d.condition == *c).map(|d| d.perplexity)), None)
        })
        .collect();

    let labels: Vec<String> =
        snap.registry.groups.values().map(|g| g.access_label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let pairs = desk.eval_pairs();
    let max_k = desk.config.modes.iter().copied().max().unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(desk.config.corpus.seed ^ 0x6163_6365_7373);
    let mut trials =
        AccessTrials { trials: desk.config.access_trials, answered: 0, denied: 0, restricted_selections: 0 };
    for t in 0..desk.config.access_trials {
        let held: Vec<&String> = labels.iter().filter(|_| rng.random_bool(0.5)).collect();
        let user = UserCredential::new(&format!("user{t}"), held.iter().map(|s| s.as_str()));
        let (_, doc_id) = pairs.choose(&mut rng).expect("evaluation documents exist");
        let k = rng.random_range(1..=max_k);
        let allowed = snap.registry.accessible_adapters(&user);
        let query = provider.embed_prompt(desk.text(doc_id)?)?;
        match retriever.rank(&query, &allowed, k, weighting) {
            Ok(ranked) => {
                trials.answered += 1;
                for (id, w) in &ranked.mix()?.entries {
                    if *w > 0.0 && !snap.registry.check_access(&user, id)? {
                        trials.restricted_selections += 1;
                    }
                }
            }
            Err(Error::NoAccessibleAdapters) => trials.denied += 1,
            Err(e) => return Err(e),
        }
    }
    out.write_csv("access.csv", &rows)?;
    out.write_csv("access_docs.csv", &docs)?;
    out.write_csv("access_trials.csv", std::slice::from_ref(&trials))?;
    Ok(AccessResult { rows, docs, trials })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurgeDoc {
    pub doc_id: String,
    pub group_id: String,
    pub before_perplexity: f64,
    pub after_perplexity: f64,
    /// Mean over the group's other evaluation documents.
    pub retained_before: f64,
    pub retained_after: f64,
    pub old_adapter_id: String,
    pub new_adapter_id: String,
    pub doc_absent_from_store: bool,
    pub doc_absent_from_manifest: bool,
    pub determinism_check_passed: bool,
    pub audit_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurgeTiming {
    pub doc_id: String,
    pub retrain_seconds: f64,
    pub retrain_tokens: usize,
    /// Measured time to train every group's adapter once.
    pub all_groups_seconds: f64,
    /// Full-corpus retrain time extrapolated from this retrain's throughput.
    pub estimated_full_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PurgeResult {
    pub rows: Vec<ResultRow>,
    pub docs: Vec<PurgeDoc>,
    pub timing: Vec<PurgeTiming>,
}

/// Purges evaluation documents (one per group, round robin) through the
/// store and scores each under its group's adapter before and after.
pub fn purge_eval(desk: &Desk, out: &mut OutputDir) -> Result<PurgeResult> {
    let groups: Vec<&String> = desk.eval_docs.keys().collect();
    let mut targets = Vec::new();
    for i in 0..desk.config.purge_docs {
        let g = groups[i % groups.len()];
        if let Some(d) = desk.eval_docs[g].get(i / groups.len()) {
            targets.push((g.clone(), d.clone()));
        }
    }
    let purged: BTreeSet<&String> = targets.iter().map(|(_, d)| d).collect();
    let all_groups_seconds: f64 = desk.train_logs.values().map(|l| l.seconds).sum();
    let all_tokens: usize = desk.train_logs.values().map(|l| l.tokens).sum();

    let score_group = |snap: &Snapshot, group: &str, doc_ids: &[&String]| -> Result<Vec<f64>> {
        let id = snap.registry.group(group)?.adapter_id.clone().ok_or_else(|| Error::UntrainedGroup(group.into()))?;
        let adapter = snap.adapter(&id).ok_or_else(|| Error::UnknownAdapter(id.clone()))?;
        doc_ids.iter().map(|d| single_adapter_perplexity(snap.base()?, adapter, desk.text(d)?, d)).collect()
    };

    let mut docs = Vec::new();
    let mut timing = Vec::new();
    for (group, doc_id) in &targets {
        let retained: Vec<&String> = desk.eval_docs[group].iter().filter(|d| !purged.contains(d)).collect();
        let before = desk.store.snapshot();
        let before_ppl = score_group(&before, group, &[doc_id])?[0];
        let retained_before = mean(score_group(&before, group, &retained)?);
        let report = desk.store.purge_document(doc_id)?;
        let after = desk.store.snapshot();
        let after_ppl = score_group(&after, group, &[doc_id])?[0];
        let retained_after = mean(score_group(&after, group, &retained)?);
        let audit = desk.store.audit()?;
        docs.push(PurgeDoc {
            doc_id: doc_id.clone(),
            group_id: group.clone(),
            before_perplexity: before_ppl,
            after_perplexity: after_ppl,
            retained_before,
            retained_after,
            old_adapter_id: report.old_adapter_id.clone().unwrap_or_default(),
            new_adapter_id: report.new_adapter_id.clone().unwrap_or_default(),
            doc_absent_from_store: report.audit.doc_absent_from_store,
            doc_absent_from_manifest: report.audit.doc_absent_from_manifest,
            determinism_check_passed: report.audit.determinism_check_passed,
            audit_violations: audit.violations.len(),
        });
        let throughput = report.retrain_tokens as f64 / report.retrain_seconds.max(f64::MIN_POSITIVE);
        timing.push(PurgeTiming {
            doc_id: doc_id.clone(),
            retrain_seconds: report.retrain_seconds,
            retrain_tokens: report.retrain_tokens,
            all_groups_seconds,
            estimated_full_seconds: all_tokens as f64 / throughput,
        });
    }
    let rows = vec![
        ResultRow::new("purge", "Before Purge", mean(docs.iter().map(|d| d.before_perplexity)), None),
        ResultRow::new("purge", "Purged", mean(docs.iter().map(|d| d.after_perplexity)), None),
        ResultRow::new("purge", "Retained Before", mean(docs.iter().map(|d| d.retained_before)), None),
        ResultRow::new("purge", "Retained After", mean(docs.iter().map(|d| d.retained_after)), None),
    ];
    out.write_csv("purge.csv", &rows)?;
    out.write_csv("purge_docs.csv", &docs)?;
    out.write_csv("purge_timing.csv", &timing)?;
    Ok(PurgeResult { rows, docs, timing })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub stage: usize,
    pub strategy: String,
    /// Mean month-1 perplexity.
    pub perplexity: f64,
    /// SHA-256 of the adapter that served month 1.
    pub adapter_sha: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingTiming {
    pub stage: usize,
    pub strategy: String,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingResult {
    pub rows: Vec<ForgettingRow>,
    pub timing: Vec<ForgettingTiming>,
}

impl ForgettingResult {
    pub fn series(&self, strategy: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.strategy == strategy).map(|r| r.perplexity).collect()
    }
}

/// Adds one month per stage. FT fine-tunes one adapter sequentially, RT
/// retrains one adapter on all months so far, AS trains a new adapter per
/// month and serves month 1 from its own adapter.
pub fn forgetting_eval(desk: &Desk, out: &mut OutputDir) -> Result<ForgettingResult> {
    let snap = desk.store.snapshot();
    let base = snap.base()?;
    let cfg = &desk.config.adapter;
    let months = desk.config.corpus.month_docs()?;
    let mut labels: Vec<&str> = months.iter().map(|d| d.label.as_str()).collect();
    labels.dedup();
    let month = |m: &str| -> Vec<&[u8]> { months.iter().filter(|d| d.label == m).map(|d| d.text.as_bytes()).collect() };
    let probe: Vec<_> = months.iter().filter(|d| d.label == labels[0]).take(desk.config.eval_docs_per_group).collect();
    let score = |a: &Adapter| -> Result<(f64, String)> {
        let ppl = probe
            .iter()
            .map(|d| single_adapter_perplexity(base, a, d.text.as_bytes(), &d.doc_id))
            .collect::<Result<Vec<_>>>()?;
        Ok((mean(ppl), sha256_hex(&a.to_bytes()?)))
    };

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let mut ft: Option<Adapter> = None;
    let mut per_month: Vec<Adapter> = Vec::new();
    let mut cumulative: Vec<&[u8]> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let stage = i + 1;
        let docs = month(label);
        cumulative.extend(&docs);
        let (next_ft, ft_log) = match &ft {
            None => train_adapter(base, "ft", &docs, cfg)?,
            Some(prev) => continue_training(base, prev, &docs, cfg)?,
        };
        let (rt, rt_log) = train_adapter(base, "rt", &cumulative, cfg)?;
        let (month_adapter, as_log) = train_adapter(base, label, &docs, cfg)?;
        per_month.push(month_adapter);
        for (strategy, adapter, log) in
            [("FT", &next_ft, &ft_log), ("RT", &rt, &rt_log), ("AS", &per_month[0], &as_log)]
        {
            let (perplexity, adapter_sha) = score(adapter)?;
            rows.push(ForgettingRow { stage, strategy: strategy.into(), perplexity, adapter_sha });
            timing.push(ForgettingTiming { stage, strategy: strategy.into(), train_seconds: log.seconds });
        }
        ft = Some(next_ft);
    }
    out.write_csv("forgetting.csv", &rows)?;
    out.write_csv("forgetting_timing.csv", &timing)?;
    Ok(ForgettingResult { rows, timing })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardRow {
    pub shard_size: usize,
    pub documents: usize,
    pub adapter_count: usize,
    pub mean_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardTiming {
    pub shard_size: usize,
    pub mean_train_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardResult {
    pub rows: Vec<ShardRow>,
    pub timing: Vec<ShardTiming>,
}

/// Re-partitions the pooled documents of the leading groups at each shard
/// size, trains one adapter per shard and scores every pooled document
/// under its own shard's adapter.
pub fn shard_tradeoff_eval(desk: &Desk, out: &mut OutputDir) -> Result<ShardResult> {
    let snap = desk.store.snapshot();
    let base = snap.base()?;
    let pool_labels = &LABELS[..desk.config.shard_groups];
    let pool: Vec<(String, String)> = desk
        .config
        .corpus
        .group_docs()?
        .into_iter()
        .filter(|d| pool_labels.contains(&d.label.as_str()))
        .map(|d| (sha256_hex(d.text.as_bytes()), d.doc_id))
        .collect();
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for &size in &desk.config.shard_sizes {
        let shards = shard_members(&pool, size);
        let mut seconds = Vec::new();
        let mut ppl = Vec::new();
        for (i, shard) in shards.iter().enumerate() {
            let docs: Vec<&[u8]> = shard.iter().map(|(_, d)| desk.text(d)).collect::<Result<_>>()?;
            let (adapter, log) = train_adapter(base, &format!("shard{size}.s{i}"), &docs, &desk.config.adapter)?;
            seconds.push(log.seconds);
            for ((_, d), text) in shard.iter().zip(&docs) {
                ppl.push(single_adapter_perplexity(base, &adapter, text, d)?);
            }
        }
        rows.push(ShardRow {
            shard_size: size,
            documents: pool.len(),
            adapter_count: shards.len(),
            mean_perplexity: mean(ppl),
        });
        timing.push(ShardTiming {
            shard_size: size,
            mean_train_seconds: mean(seconds.iter().copied()),
            total_seconds: seconds.iter().sum(),
        });
    }
    out.write_csv("shards.csv", &rows)?;
    out.write_csv("shards_timing.csv", &timing)?;
    Ok(ShardResult { rows, timing })
}
