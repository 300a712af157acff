mod common;

use std::collections::{BTreeMap, BTreeSet};

use adapterswap::codec::manifest_hash;
use adapterswap::lm::{BaseModel, ModelConfig};
use adapterswap::lora::{Adapter, AdapterConfig, AdapterMix, ComposedDelta, Weighting};
use adapterswap::registry::{shard_members, Registry, UserCredential};
use adapterswap::retriever::{fit_gmm, rank_and_filter, GmmComponent, GmmModel, HeldoutPolicy};
use proptest::prelude::*;

fn gmm(means: &[(f64, f64)]) -> GmmModel {
    let components = means
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            GmmComponent::new(format!("g{i}"), vec![x, y], vec![1.0, 0.2, 0.2, 1.5], -(means.len() as f64).ln())
                .unwrap()
        })
        .collect();
    GmmModel { components, ridge: 0.0 }
}

fn point() -> impl Strategy<Value = (f64, f64)> {
    (-5.0..5.0f64, -5.0..5.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Only accessible groups are ever ranked, at most k of them, best first.
    #[test]
    fn ranking_is_access_sound(
        means in prop::collection::vec(point(), 2..8),
        mask in prop::collection::vec(any::<bool>(), 8),
        query in point(),
        k in 1usize..5,
    ) {
        let model = gmm(&means);
        let accessible: BTreeMap<String, String> = (0..means.len())
            .filter(|&i| mask[i])
            .map(|i| (format!("g{i}"), format!("adapter-{i}")))
            .collect();
        match rank_and_filter(&model, &[query.0, query.1], &accessible, k, Weighting::Uniform) {
            Ok(ranked) => {
                prop_assert_eq!(ranked.entries.len(), k.min(accessible.len()));
                for e in &ranked.entries {
                    prop_assert_eq!(accessible.get(&e.group_id), Some(&e.adapter_id));
                }
                prop_assert!(ranked.entries.windows(2).all(|w| w[0].log_density >= w[1].log_density));
            }
            Err(e) => prop_assert!(accessible.is_empty(), "{e}"),
        }
    }

    /// The top-k set is contained in the top-(k+1) set.
    #[test]
    fn retrieval_sets_are_nested(means in prop::collection::vec(point(), 2..8), query in point()) {
        let model = gmm(&means);
        let all: BTreeMap<String, String> = (0..means.len()).map(|i| (format!("g{i}"), format!("a{i}"))).collect();
        let mut previous: BTreeSet<String> = BTreeSet::new();
        for k in 1..=means.len() {
            let ranked = rank_and_filter(&model, &[query.0, query.1], &all, k, Weighting::Uniform).unwrap();
            let ids: BTreeSet<String> = ranked.entries.iter().map(|e| e.group_id.clone()).collect();
            prop_assert!(previous.is_subset(&ids));
            previous = ids;
        }
    }

    /// Every EM iteration leaves the penalized log-likelihood non-decreasing.
    #[test]
    fn em_is_monotone(
        data in prop::collection::vec((point(), 0usize..3), 12..40),
        eps in 0.01..1.0f64,
    ) {
        let mut vectors: Vec<Vec<f64>> = data.iter().map(|((x, y), _)| vec![*x, *y]).collect();
        let mut labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
        // Guarantee two samples per label.
        for l in 0..3 {
            vectors.push(vec![l as f64, 0.5]);
            vectors.push(vec![l as f64 + 0.3, -0.5]);
            labels.extend([l, l]);
        }
        let ids: Vec<String> = (0..3).map(|i| format!("g{i}")).collect();
        let fit = fit_gmm(&vectors, &labels, &ids, eps, 6).unwrap();
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", fit.objective_trace);
        }
    }

    /// Held-out selection depends on the set of hashes, not their order.
    #[test]
    fn heldout_selection_is_order_free(
        hashes in prop::collection::btree_set("[0-9a-f]{8}", 1..40),
        seed in any::<u64>(),
    ) {
        let policy = HeldoutPolicy { seed, ..Default::default() };
        let forward: Vec<String> = hashes.iter().cloned().collect();
        let backward: Vec<String> = forward.iter().rev().cloned().collect();
        let chosen = policy.select("group", &forward);
        prop_assert_eq!(&chosen, &policy.select("group", &backward));
        prop_assert_eq!(chosen.len(), policy.count(hashes.len()));
        prop_assert!(chosen.iter().all(|h| hashes.contains(h)));
    }

    /// Shards partition the members into ⌈n/max⌉ pieces of at most `max`.
    #[test]
    fn shards_partition_members(n in 1usize..60, max in 1usize..20) {
        let members: Vec<(String, String)> = (0..n).map(|i| (format!("{:08x}", i * 7919 % 1000), format!("d{i}"))).collect();
        let shards = shard_members(&members, max);
        prop_assert_eq!(shards.len(), n.div_ceil(max));
        prop_assert!(shards.iter().all(|s| !s.is_empty() && s.len() <= max));
        let flat: BTreeSet<&(String, String)> = shards.iter().flatten().collect();
        prop_assert_eq!(flat.len(), n);
    }

    /// The manifest digest ignores document order.
    #[test]
    fn manifest_is_order_free(mut hashes in prop::collection::vec("[0-9a-f]{64}", 0..20)) {
        let a = manifest_hash(hashes.iter().map(String::as_str));
        hashes.reverse();
        prop_assert_eq!(a, manifest_hash(hashes.iter().map(String::as_str)));
    }

    /// Density-softmax weights form a distribution.
    #[test]
    fn mix_weights_sum_to_one(logs in prop::collection::vec(-500.0..50.0f64, 1..8)) {
        let ids: Vec<String> = (0..logs.len()).map(|i| format!("a{i}")).collect();
        let mix = AdapterMix::density_softmax(&ids, &logs).unwrap();
        prop_assert!(mix.validate().is_ok());
    }

    /// Access is allowed exactly when the adapter's label is held.
    #[test]
    fn check_access_is_label_membership(held in prop::collection::btree_set(0usize..4, 0..4), target in 0usize..4) {
        let mut reg = Registry::default();
        let json = format!(
            r#"{{"group_id":"g{target}","access_label":"l{target}","shard_of":null,"document_ids":[],"adapter_id":"a","manifest_hash":""}}"#
        );
        reg.groups.insert(format!("g{target}"), serde_json::from_str(&json).unwrap());
        let rec = format!(
            r#"{{"adapter_id":"a","group_id":"g{target}","file":"x","manifest_hash":"","base_model_hash":"","config":{{}}}}"#
        );
        reg.adapters.insert("a".into(), serde_json::from_str(&rec).unwrap());
        let user = UserCredential::new("u", held.iter().map(|l| format!("l{l}")));
        prop_assert_eq!(reg.check_access(&user, "a").unwrap(), held.contains(&target));
        prop_assert_eq!(reg.accessible_adapters(&user).is_empty(), !held.contains(&target));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Composition is linear in the mix weights.
    #[test]
    fn composition_is_linear(w in 0.0..1.0f64, seed_a in 0u64..1000, seed_b in 0u64..1000) {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ffn: 16, context_len: 8, ..Default::default() };
        let mut base = BaseModel::new(cfg).unwrap();
        let hash = base.freeze();
        let make = |id: &str, seed: u64| {
            let mut a = Adapter::init(&cfg, &AdapterConfig { init_seed: seed, ..Default::default() }).unwrap();
            a.adapter_id = id.into();
            a.base_model_hash = hash.clone();
            for (i, p) in a.pairs.iter_mut().enumerate() {
                p.b.data_mut().iter_mut().enumerate().for_each(|(j, x)| *x = ((seed as usize + i * 31 + j * 7) % 13) as f32 / 13.0 - 0.5);
            }
            a
        };
        let adapters: BTreeMap<String, Adapter> = [("x".to_string(), make("x", seed_a)), ("y".to_string(), make("y", seed_b))].into();
        let mix = AdapterMix { entries: vec![("x".into(), w), ("y".into(), 1.0 - w)], weighting: Weighting::Uniform };
        let delta = ComposedDelta::from_mix(&mix, |id| adapters.get(id)).unwrap();
        for layer in delta.layers() {
            let dx = adapters["x"].effective_delta(layer).unwrap();
            let dy = adapters["y"].effective_delta(layer).unwrap();
            for ((c, a), b) in delta.get(layer).unwrap().iter().zip(&dx).zip(&dy) {
                let expected = w * f64::from(*a) + (1.0 - w) * f64::from(*b);
                prop_assert!((f64::from(*c) - expected).abs() <= 1e-6);
            }
        }
    }
}
