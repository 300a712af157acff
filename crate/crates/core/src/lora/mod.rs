//! Low-rank adapters: `ΔW = (α / r) · B · A` per targeted projection, trained
//! against a frozen base and composed by weighted delta summation.

mod train;

pub use train::{continue_training, train_adapter, TrainLog};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{hash_from_hex, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::lm::{LinearId, LinearKind, ModelConfig};
use crate::tensor::{matmul_into, Tensor};

const ADAPTER_MAGIC: &[u8; 4] = b"ASWA";
const ADAPTER_VERSION: u32 = 1;
const A_INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSet {
    AttentionOnly,
    AllLinear,
}

impl TargetSet {
    pub fn kinds(self) -> &'static [LinearKind] {
        match self {
            TargetSet::AttentionOnly => &LinearKind::ATTENTION,
            TargetSet::AllLinear => &LinearKind::ALL,
        }
    }

    /// Targeted projections in layer order.
    pub fn targets(self, model: &ModelConfig) -> Vec<LinearId> {
        (0..model.n_layers).flat_map(|layer| self.kinds().iter().map(move |&kind| LinearId { layer, kind })).collect()
    }

    fn code(self) -> u8 {
        match self {
            TargetSet::AttentionOnly => 0,
            TargetSet::AllLinear => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(TargetSet::AttentionOnly),
            1 => Ok(TargetSet::AllLinear),
            _ => Err(Error::Format(format!("unknown target set {c}"))),
        }
    }
}

/// Optimization schedule for one adapter. The effective batch is
/// `batch_size × grad_accum_steps` documents per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Desk-scale preset: a few hundred optimizer steps per adapter, so small
/// partitions are memorized in seconds on one CPU core.
impl Default for TrainSchedule {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 4, grad_accum_steps: 1, lr: 1e-2, weight_decay: 0.01 }
    }
}

impl TrainSchedule {
    /// The large-model recipe: 10 epochs, batch 4 with 5 accumulation steps,
    /// AdamW defaults.
    pub fn reference() -> Self {
        Self { epochs: 10, batch_size: 4, grad_accum_steps: 5, lr: 1e-3, weight_decay: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target_set: TargetSet,
    pub init_seed: u64,
    pub train: TrainSchedule,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0, target_set: TargetSet::AllLinear, init_seed: 42, train: TrainSchedule::default() }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("adapter alpha must be positive".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.grad_accum_steps == 0 || !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::Config("degenerate training schedule".into()));
        }
        Ok(())
    }
}

/// Factors for one targeted projection: `a [r, d_in]`, `b [d_out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub target: LinearId,
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub adapter_id: String,
    pub group_id: String,
    pub config: AdapterConfig,
    pub pairs: Vec<LoraPair>,
    pub base_model_hash: String,
    /// Digest of the exact document set this adapter was trained on.
    pub manifest_hash: String,
    /// Unix seconds; kept out of the adapter file.
    pub trained_at: u64,
}

impl Adapter {
    /// Fresh adapter: `A ~ N(0, 0.02²)` from `init_seed`, `B = 0`.
    pub fn init(model: &ModelConfig, config: &AdapterConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0f32, A_INIT_STD).unwrap();
        let mut pairs = Vec::new();
        for target in config.target_set.targets(model) {
            let (d_out, d_in) = model.linear_shape(target.kind);
            let limit = d_out.min(d_in);
            if config.rank > limit {
                return Err(Error::RankTooLarge { rank: config.rank, limit });
            }
            let a: Vec<f32> = (0..config.rank * d_in).map(|_| normal.sample(&mut rng)).collect();
            pairs.push(LoraPair {
                target,
                a: Tensor::new([config.rank, d_in], a)?,
                b: Tensor::zeros([d_out, config.rank]),
            });
        }
        Ok(Self {
            adapter_id: String::new(),
            group_id: String::new(),
            config: *config,
            pairs,
            base_model_hash: String::new(),
            manifest_hash: String::new(),
            trained_at: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.pairs.iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub(crate) fn check_model(&self, model: &ModelConfig) -> Result<()> {
        for p in &self.pairs {
            let (d_out, d_in) = model.linear_shape(p.target.kind);
            let r = self.config.rank;
            if p.target.layer >= model.n_layers || p.a.shape() != [r, d_in] || p.b.shape() != [d_out, r] {
                return Err(Error::Shape(format!("adapter pair {} does not fit the model configuration", p.target)));
            }
        }
        Ok(())
    }

    /// `(α / r) · B · A` for one targeted projection, row-major `[d_out, d_in]`.
    pub fn effective_delta(&self, layer: LinearId) -> Result<Vec<f32>> {
        let pair =
            self.pairs.iter().find(|p| p.target == layer).ok_or_else(|| Error::LayerNotTargeted(layer.to_string()))?;
        let (d_out, r) = pair.b.dims2()?;
        let d_in = pair.a.shape()[1];
        let mut delta = vec![0.0f32; d_out * d_in];
        matmul_into(d_out, r, d_in, pair.b.data(), false, pair.a.data(), false, &mut delta, false);
        let s = self.config.scaling() as f32;
        delta.iter_mut().for_each(|x| *x *= s);
        Ok(delta)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(ADAPTER_MAGIC, ADAPTER_VERSION);
        e.str(&self.adapter_id);
        e.str(&self.group_id);
        e.bytes(&hash_from_hex(&self.base_model_hash)?);
        e.u32(self.config.rank as u32);
        e.f64(self.config.alpha);
        e.u8(self.config.target_set.code());
        e.u64(self.config.init_seed);
        e.bytes(&hash_from_hex(&self.manifest_hash)?);
        for p in &self.pairs {
            e.f32s(p.a.data());
            e.f32s(p.b.data());
        }
        Ok(e.finish())
    }

    /// Parses an adapter file; factor shapes come from `model`. The training
    /// schedule is not stored in the file and comes back as the default.
    pub fn from_bytes(bytes: &[u8], model: &ModelConfig) -> Result<Self> {
        let mut d = Decoder::new(bytes, ADAPTER_MAGIC)?;
        if d.version != ADAPTER_VERSION {
            return Err(Error::Format(format!("unsupported adapter version {}", d.version)));
        }
        let adapter_id = d.str()?;
        let group_id = d.str()?;
        let base_model_hash = hex::encode(d.bytes(32)?);
        let rank = d.u32()? as usize;
        let alpha = d.f64()?;
        let target_set = TargetSet::from_code(d.u8()?)?;
        let init_seed = d.u64()?;
        let manifest_hash = hex::encode(d.bytes(32)?);
        let config = AdapterConfig { rank, alpha, target_set, init_seed, train: TrainSchedule::default() };
        config.validate()?;
        let mut pairs = Vec::new();
        for target in target_set.targets(model) {
            let (d_out, d_in) = model.linear_shape(target.kind);
            let a = Tensor::new([rank, d_in], d.f32s(rank * d_in)?)?;
            let b = Tensor::new([d_out, rank], d.f32s(d_out * rank)?)?;
            pairs.push(LoraPair { target, a, b });
        }
        d.finish()?;
        Ok(Self { adapter_id, group_id, config, pairs, base_model_hash, manifest_hash, trained_at: 0 })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    DensitySoftmax,
}

/// Weighted set of adapters to apply together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMix {
    pub entries: Vec<(String, f64)>,
    pub weighting: Weighting,
}

impl AdapterMix {
    pub fn single(adapter_id: &str) -> Self {
        Self { entries: vec![(adapter_id.to_string(), 1.0)], weighting: Weighting::Uniform }
    }

    pub fn uniform<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::NoAccessibleAdapters);
        }
        let w = 1.0 / ids.len() as f64;
        Ok(Self { entries: ids.iter().map(|id| (id.as_ref().to_string(), w)).collect(), weighting: Weighting::Uniform })
    }

    /// Softmax over log densities.
    pub fn density_softmax<S: AsRef<str>>(ids: &[S], log_densities: &[f64]) -> Result<Self> {
        if ids.is_empty() || ids.len() != log_densities.len() {
            return Err(Error::Config("density weights need one log density per adapter".into()));
        }
        let max = log_densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = log_densities.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(Self {
            entries: ids.iter().zip(&exps).map(|(id, e)| (id.as_ref().to_string(), e / total)).collect(),
            weighting: Weighting::DensitySoftmax,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("adapter mix is empty".into()));
        }
        if self.entries.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("mix weights must be finite and non-negative".into()));
        }
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Summed weight-space deltas of a mix, keyed by projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedDelta {
    deltas: BTreeMap<LinearId, Vec<f32>>,
    pub base_model_hash: String,
}

impl ComposedDelta {
    /// Resolves `mix` against `adapters` (looked up by id).
    pub fn from_mix<'a>(mix: &AdapterMix, adapters: impl Fn(&str) -> Option<&'a Adapter>) -> Result<Self> {
        mix.validate()?;
        let resolved: Vec<(&Adapter, f64)> = mix
            .entries
            .iter()
            .map(|(id, w)| adapters(id).map(|a| (a, *w)).ok_or_else(|| Error::UnknownAdapter(id.clone())))
            .collect::<Result<_>>()?;
        let base = &resolved[0].0.base_model_hash;
        if let Some((a, _)) = resolved.iter().find(|(a, _)| &a.base_model_hash != base) {
            return Err(Error::BaseHashMismatch { expected: base.clone(), found: a.base_model_hash.clone() });
        }
        let mut deltas: BTreeMap<LinearId, Vec<f32>> = BTreeMap::new();
        for (adapter, w) in &resolved {
            let w = *w as f32;
            for pair in &adapter.pairs {
                let delta = adapter.effective_delta(pair.target)?;
                let acc = deltas.entry(pair.target).or_insert_with(|| vec![0.0; delta.len()]);
                if acc.len() != delta.len() {
                    return Err(Error::Shape(format!("mixed adapters disagree on {}", pair.target)));
                }
                acc.iter_mut().zip(&delta).for_each(|(s, &d)| *s += w * d);
            }
        }
        Ok(Self { deltas, base_model_hash: base.clone() })
    }

    pub fn get(&self, layer: LinearId) -> Option<&[f32]> {
        self.deltas.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = LinearId> + '_ {
        self.deltas.keys().copied()
    }

    pub(crate) fn check_model(&self, model: &ModelConfig) -> Result<()> {
        for (id, d) in &self.deltas {
            let (o, i) = model.linear_shape(id.kind);
            if id.layer >= model.n_layers || d.len() != o * i {
                return Err(Error::Shape(format!("delta for {id} does not fit the model")));
            }
        }
        Ok(())
    }
}

/// `Σ weightᵢ · effective_delta(adapterᵢ, layer)`.
pub fn compose<'a>(
    mix: &AdapterMix,
    adapters: impl Fn(&str) -> Option<&'a Adapter>,
    layer: LinearId,
) -> Result<Vec<f32>> {
    let composed = ComposedDelta::from_mix(mix, adapters)?;
    composed.get(layer).map(<[f32]>::to_vec).ok_or_else(|| Error::LayerNotTargeted(layer.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelConfig {
        ModelConfig { d_model: 8, n_heads: 2, d_ffn: 16, context_len: 8, ..Default::default() }
    }

    fn with_ids(mut a: Adapter, id: &str) -> Adapter {
        a.adapter_id = id.into();
        a.group_id = "g".into();
        a.base_model_hash = "00".repeat(32);
        a.manifest_hash = "11".repeat(32);
        a
    }

    #[test]
    fn init_is_seeded_and_b_is_zero() {
        let cfg = AdapterConfig::default();
        let a = Adapter::init(&model(), &cfg).unwrap();
        let b = Adapter::init(&model(), &cfg).unwrap();
        let c = Adapter::init(&model(), &AdapterConfig { init_seed: 43, ..cfg }).unwrap();
        assert_eq!(a.pairs.len(), 2 * 6);
        for ((pa, pb), pc) in a.pairs.iter().zip(&b.pairs).zip(&c.pairs) {
            assert_eq!(pa.a, pb.a);
            assert_ne!(pa.a, pc.a);
            assert!(pa.b.data().iter().all(|&x| x == 0.0));
        }
        let attn = Adapter::init(&model(), &AdapterConfig { target_set: TargetSet::AttentionOnly, ..cfg });
        assert_eq!(attn.unwrap().pairs.len(), 2 * 4);
    }

    #[test]
    fn rank_limit() {
        let cfg = AdapterConfig { rank: 9, ..Default::default() };
        assert!(matches!(Adapter::init(&model(), &cfg), Err(Error::RankTooLarge { rank: 9, limit: 8 })));
    }

    #[test]
    fn hand_delta() {
        let m = ModelConfig { d_model: 2, n_heads: 1, d_ffn: 2, context_len: 4, ..Default::default() };
        let cfg = AdapterConfig { rank: 1, alpha: 2.0, target_set: TargetSet::AttentionOnly, ..Default::default() };
        let mut a = Adapter::init(&m, &cfg).unwrap();
        let q = LinearId { layer: 0, kind: LinearKind::Query };
        a.pairs[0].a = Tensor::new([1, 2], vec![3.0, 4.0]).unwrap();
        a.pairs[0].b = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(a.effective_delta(q).unwrap(), vec![6.0, 8.0, 0.0, 0.0]);
        let k = LinearId { layer: 0, kind: LinearKind::Key };
        assert_eq!(a.effective_delta(k).unwrap(), vec![0.0; 4]);
        let up = LinearId { layer: 0, kind: LinearKind::Up };
        assert!(matches!(a.effective_delta(up), Err(Error::LayerNotTargeted(_))));
    }

    #[test]
    fn mix_validation_and_weights() {
        assert!(AdapterMix { entries: vec![], weighting: Weighting::Uniform }.validate().is_err());
        let bad = AdapterMix { entries: vec![("a".into(), 0.5)], weighting: Weighting::Uniform };
        assert!(bad.validate().is_err());
        let m = AdapterMix::uniform(&["a", "b", "c"]).unwrap();
        m.validate().unwrap();
        let s = AdapterMix::density_softmax(&["a", "b"], &[-3.0, -3.0]).unwrap();
        assert_eq!(s.entries[0].1, 0.5);
        assert_eq!(s.entries[1].1, 0.5);
    }

    #[test]
    fn composing_equal_deltas_is_a_fixed_point() {
        let cfg = AdapterConfig::default();
        let mut a = with_ids(Adapter::init(&model(), &cfg).unwrap(), "a");
        for p in &mut a.pairs {
            p.b.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.25 * i as f32);
        }
        let mut b = a.clone();
        b.adapter_id = "b".into();
        let lookup = |id: &str| [&a, &b].into_iter().find(|x| x.adapter_id == id);
        let q = LinearId { layer: 1, kind: LinearKind::Value };
        let mix = AdapterMix::uniform(&["a", "b"]).unwrap();
        assert_eq!(compose(&mix, lookup, q).unwrap(), a.effective_delta(q).unwrap());
        let single = AdapterMix::single("a");
        assert_eq!(compose(&single, lookup, q).unwrap(), a.effective_delta(q).unwrap());
    }

    #[test]
    fn composition_rejects_mixed_bases() {
        let cfg = AdapterConfig::default();
        let a = with_ids(Adapter::init(&model(), &cfg).unwrap(), "a");
        let mut b = with_ids(Adapter::init(&model(), &cfg).unwrap(), "b");
        b.base_model_hash = "22".repeat(32);
        let lookup = |id: &str| [&a, &b].into_iter().find(|x| x.adapter_id == id);
        let mix = AdapterMix::uniform(&["a", "b"]).unwrap();
        assert!(matches!(ComposedDelta::from_mix(&mix, lookup), Err(Error::BaseHashMismatch { .. })));
    }

    #[test]
    fn adapter_file_round_trip() {
        let cfg = AdapterConfig { target_set: TargetSet::AttentionOnly, ..Default::default() };
        let a = with_ids(Adapter::init(&model(), &cfg).unwrap(), "grp-abc");
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ASWA");
        let back = Adapter::from_bytes(&bytes, &model()).unwrap();
        assert_eq!(back.pairs, a.pairs);
        assert_eq!(back.manifest_hash, a.manifest_hash);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
