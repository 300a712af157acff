use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tokenizer;
use crate::codec::{sha256_hex, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::lora::{Adapter, ComposedDelta};
use crate::tensor::{Graph, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"ASWP";
const CHECKPOINT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            context_len: 128,
            vocab_size: Tokenizer::VOCAB_SIZE,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.vocab_size < Tokenizer::VOCAB_SIZE {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a linear projection.
    pub fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        match kind {
            LinearKind::Up => (self.d_ffn, self.d_model),
            LinearKind::Down => (self.d_model, self.d_ffn),
            _ => (self.d_model, self.d_model),
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, v) = (self.d_model, self.vocab_size);
        let mut shapes = vec![vec![v, d], vec![self.context_len, d]];
        for _ in 0..self.n_layers {
            shapes.push(vec![d]);
            shapes.push(vec![d]);
            for kind in LinearKind::ATTENTION {
                let (o, i) = self.linear_shape(kind);
                shapes.push(vec![o, i]);
            }
            shapes.push(vec![d]);
            shapes.push(vec![d]);
            for kind in [LinearKind::Up, LinearKind::Down] {
                let (o, i) = self.linear_shape(kind);
                shapes.push(vec![o, i]);
            }
        }
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        shapes.push(vec![v, d]);
        shapes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinearKind {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl LinearKind {
    pub const ATTENTION: [LinearKind; 4] = [LinearKind::Query, LinearKind::Key, LinearKind::Value, LinearKind::Output];
    pub const ALL: [LinearKind; 6] =
        [LinearKind::Query, LinearKind::Key, LinearKind::Value, LinearKind::Output, LinearKind::Up, LinearKind::Down];

    fn slot(self) -> usize {
        match self {
            LinearKind::Query => 2,
            LinearKind::Key => 3,
            LinearKind::Value => 4,
            LinearKind::Output => 5,
            LinearKind::Up => 8,
            LinearKind::Down => 9,
        }
    }
}

/// A linear projection inside a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinearId {
    pub layer: usize,
    pub kind: LinearKind,
}

impl fmt::Display for LinearId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{:?}", self.layer, self.kind)
    }
}

/// How adapters enter a forward pass.
pub(crate) enum Adaptation<'a> {
    None,
    /// Fixed weight-space deltas added to the base projections.
    Delta(&'a ComposedDelta),
    /// A single adapter whose factors are differentiable leaves.
    Train(&'a Adapter),
}

pub(crate) struct Trace {
    pub logits: Var,
    pub hidden: Var,
    /// One var per base parameter, declaration order.
    pub base: Vec<Var>,
    /// `(A, B)` vars per adapter pair, in the adapter's pair order.
    pub lora: Vec<(Var, Var)>,
}

/// Pre-norm decoder-only transformer with learned positional embeddings.
#[derive(Clone, Debug)]
pub struct BaseModel {
    config: ModelConfig,
    params: Vec<Tensor<f32>>,
    frozen: bool,
    weights_hash: Option<String>,
}

impl BaseModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0f32, INIT_STD as f32).unwrap();
        let shapes = config.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let len = shape.iter().product();
                Tensor::new(shape, (0..len).map(|_| normal.sample(&mut rng)).collect())?
            };
            params.push(t);
        }
        let mut model = Self { config, params, frozen: false, weights_hash: None };
        for l in 0..config.n_layers {
            let base = 2 + l * PARAMS_PER_LAYER;
            model.params[base].data_mut().fill(1.0);
            model.params[base + 6].data_mut().fill(1.0);
        }
        let lnf = model.params.len() - 3;
        model.params[lnf].data_mut().fill(1.0);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> Result<&mut [Tensor<f32>]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn linear_weight(&self, id: LinearId) -> &Tensor<f32> {
        &self.params[2 + id.layer * PARAMS_PER_LAYER + id.kind.slot()]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model immutable and caches its weights hash.
    pub fn freeze(&mut self) -> String {
        self.frozen = true;
        let hash = self.compute_hash();
        self.weights_hash = Some(hash.clone());
        hash
    }

    /// SHA-256 over all parameters as little-endian `f32`, declaration order.
    pub fn weights_hash(&self) -> String {
        match &self.weights_hash {
            Some(h) if self.frozen => h.clone(),
            _ => self.compute_hash(),
        }
    }

    fn compute_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.param_count() * 4);
        for p in &self.params {
            for v in p.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    /// Logits `[len, vocab]`; position `i` depends only on tokens `0..=i`.
    pub fn forward_logits(&self, tokens: &[u32], delta: Option<&ComposedDelta>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let adaptation = delta.map_or(Adaptation::None, Adaptation::Delta);
        let trace = self.trace(&mut g, tokens, false, adaptation)?;
        Tensor::new(g.shape(trace.logits).to_vec(), g.value(trace.logits).to_vec())
    }

    /// Final (post-norm) hidden states `[len, d_model]` of the bare base model.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let trace = self.trace(&mut g, tokens, false, Adaptation::None)?;
        Tensor::new(g.shape(trace.hidden).to_vec(), g.value(trace.hidden).to_vec())
    }

    pub(crate) fn trace(
        &self,
        g: &mut Graph<f32>,
        tokens: &[u32],
        train_base: bool,
        adaptation: Adaptation<'_>,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if n > cfg.context_len {
            return Err(Error::SequenceTooLong { len: n, max: cfg.context_len });
        }
        match &adaptation {
            Adaptation::None => {}
            Adaptation::Delta(d) => d.check_model(cfg)?,
            Adaptation::Train(a) => a.check_model(cfg)?,
        }

        let mut base = Vec::with_capacity(self.params.len());
        for (idx, p) in self.params.iter().enumerate() {
            let id = self.linear_at(idx);
            let var = match (&adaptation, id) {
                (Adaptation::Delta(d), Some(id)) if d.get(id).is_some() => {
                    let delta = d.get(id).unwrap();
                    let data = p.data().iter().zip(delta).map(|(&w, &dw)| w + dw).collect();
                    g.constant(p.shape().to_vec(), data)?
                }
                _ if train_base => g.param(p.shape().to_vec(), p.data().to_vec())?,
                _ => g.constant(p.shape().to_vec(), p.data().to_vec())?,
            };
            base.push(var);
        }

        let mut lora = Vec::new();
        let mut effective = base.clone();
        if let Adaptation::Train(adapter) = &adaptation {
            let scaling = adapter.config.scaling() as f32;
            for pair in &adapter.pairs {
                let a = g.param(pair.a.shape().to_vec(), pair.a.data().to_vec())?;
                let b = g.param(pair.b.shape().to_vec(), pair.b.data().to_vec())?;
                let ba = g.matmul(b, a)?;
                let scaled = g.scale(ba, scaling);
                let idx = 2 + pair.target.layer * PARAMS_PER_LAYER + pair.target.kind.slot();
                effective[idx] = g.add(base[idx], scaled)?;
                lora.push((a, b));
            }
        }

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.embedding(effective[0], &ids)?;
        let pos = g.embedding(effective[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..cfg.n_layers {
            let w = |slot: usize| effective[2 + l * PARAMS_PER_LAYER + slot];
            let h = g.layer_norm(x, w(0), w(1))?;
            let q = g.matmul_nt(h, w(2))?;
            let k = g.matmul_nt(h, w(3))?;
            let v = g.matmul_nt(h, w(4))?;
            let attn = g.causal_attention(q, k, v, cfg.n_heads)?;
            let o = g.matmul_nt(attn, w(5))?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, w(6), w(7))?;
            let up = g.matmul_nt(h, w(8))?;
            let act = g.gelu(up);
            let down = g.matmul_nt(act, w(9))?;
            x = g.add(x, down)?;
        }
        let tail = 2 + cfg.n_layers * PARAMS_PER_LAYER;
        let hidden = g.layer_norm(x, effective[tail], effective[tail + 1])?;
        let logits = g.matmul_nt(hidden, effective[tail + 2])?;
        Ok(Trace { logits, hidden, base, lora })
    }

    fn linear_at(&self, idx: usize) -> Option<LinearId> {
        if idx < 2 || idx >= 2 + self.config.n_layers * PARAMS_PER_LAYER {
            return None;
        }
        let layer = (idx - 2) / PARAMS_PER_LAYER;
        let slot = (idx - 2) % PARAMS_PER_LAYER;
        LinearKind::ALL.into_iter().find(|k| k.slot() == slot).map(|kind| LinearId { layer, kind })
    }

    /// Serializes the checkpoint: header, parameters, trailing SHA-256.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut e = Encoder::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.context_len, c.vocab_size] {
            e.u32(v as u32);
        }
        e.u64(c.init_seed);
        for p in &self.params {
            e.f32s(p.data());
        }
        e.finish()
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, CHECKPOINT_MAGIC)?;
        if d.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", d.version)));
        }
        let mut dims = [0usize; 6];
        for v in dims.iter_mut() {
            *v = d.u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_ffn: dims[3],
            context_len: dims[4],
            vocab_size: dims[5],
            init_seed: d.u64()?,
        };
        config.validate()?;
        let mut params = Vec::new();
        for shape in config.param_shapes() {
            let len = shape.iter().product();
            params.push(Tensor::new(shape, d.f32s(len)?)?);
        }
        d.finish()?;
        let mut model = Self { config, params, frozen: false, weights_hash: None };
        model.freeze();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 2, d_ffn: 32, context_len: 16, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { context_len: 1, ..Default::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn causal_logits() {
        let model = BaseModel::new(tiny()).unwrap();
        let a = model.forward_logits(&[256, 10, 20, 30, 40, 50], None).unwrap();
        let b = model.forward_logits(&[256, 10, 20, 99, 7, 1], None).unwrap();
        let v = model.config().vocab_size;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..4 * v], &b.data()[3 * v..4 * v]);
    }

    #[test]
    fn too_long_sequence_rejected() {
        let model = BaseModel::new(tiny()).unwrap();
        let tokens = vec![1u32; 17];
        assert!(matches!(model.forward_logits(&tokens, None), Err(Error::SequenceTooLong { len: 17, max: 16 })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = BaseModel::new(tiny()).unwrap();
        let hash = model.freeze();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], b"ASWP");
        let back = BaseModel::from_bytes(&bytes).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.weights_hash(), hash);
        assert_eq!(back.config(), model.config());
        let mut bad = bytes;
        bad[40] ^= 0x10;
        assert!(BaseModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn frozen_model_refuses_mutation() {
        let mut model = BaseModel::new(tiny()).unwrap();
        model.freeze();
        assert!(matches!(model.params_mut(), Err(Error::Frozen)));
    }
}
