//! Browser demo over a tiny registry built in memory from a seeded
//! synthetic corpus: retriever projections, access-filtered ranking and
//! weighted adapter composition.

use std::collections::BTreeMap;

use adapterswap::eval::{CorpusDoc, CorpusSpec};
use adapterswap::lm::{force_decode_nll, pretrain, BaseModel, ModelConfig, PretrainConfig, Tokenizer};
use adapterswap::lora::{train_adapter, Adapter, AdapterConfig, AdapterMix, ComposedDelta, TrainSchedule, Weighting};
use adapterswap::retriever::{EmbeddingProvider, ProjectionKind, RankedEntry, Retriever, RetrieverConfig};
use adapterswap::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Training documents per group scored by `compose`. Adapters memorize
/// their partition, so these show the effect of each mix.
const EVAL_DOCS: usize = 2;

#[derive(Clone, Debug, Serialize)]
pub struct Point {
    pub doc_id: String,
    pub group: String,
    /// Context half of the document, usable as a query.
    pub prompt: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Ranking {
    /// Query position in the first two retriever coordinates.
    pub query: (f64, f64),
    pub entries: Vec<RankedEntry>,
    /// Mix weight of each entry, same order.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Composition {
    /// Normalized weight per group; empty means the bare base model.
    pub weights: Vec<(String, f64)>,
    /// Most likely next characters after the prompt with their probabilities.
    pub next: Vec<(String, f64)>,
    /// Mean perplexity on the first few documents of each group.
    pub perplexity: BTreeMap<String, f64>,
}

pub struct DemoCore {
    base: BaseModel,
    docs: Vec<CorpusDoc>,
    embeddings: Vec<Vec<f64>>,
    lda: Retriever,
    pca: Retriever,
    /// Group id to its adapter.
    adapters: BTreeMap<String, Adapter>,
}

impl DemoCore {
    /// Pretrains a small base, trains one adapter per group and fits LDA and
    /// PCA retrievers on every document's context half.
    pub fn build(seed: u64, groups: usize) -> Result<Self> {
        let spec = CorpusSpec {
            seed,
            groups,
            docs_per_group: 12,
            neutral_docs: 60,
            words_per_doc: 6,
            filler_min: 4,
            filler_max: 8,
            ..Default::default()
        };
        let docs = spec.group_docs()?;
        let model =
            ModelConfig { d_model: 32, n_heads: 2, d_ffn: 64, context_len: 64, init_seed: seed, ..Default::default() };
        let mut base = BaseModel::new(model)?;
        pretrain(
            &mut base,
            &spec.neutral_docs()?,
            &PretrainConfig { steps: 300, batch_size: 4, seed, ..Default::default() },
        )?;
        base.freeze();

        let embedder = EmbeddingProvider::new(&base);
        let embeddings: Vec<Vec<f64>> =
            docs.iter().map(|d| embedder.embed_prompt(d.text.as_bytes())).collect::<Result<_>>()?;
        let labels: Vec<String> = docs.iter().map(|d| d.label.clone()).collect();
        let lda = Retriever::fit(&embeddings, &labels, &RetrieverConfig::default())?;
        let pca = Retriever::fit(
            &embeddings,
            &labels,
            &RetrieverConfig { projection: ProjectionKind::Pca, ..Default::default() },
        )?;

        let config = AdapterConfig { train: TrainSchedule { epochs: 30, ..Default::default() }, ..Default::default() };
        let mut adapters = BTreeMap::new();
        for label in group_ids(&docs) {
            let texts: Vec<&[u8]> = members(&docs, &label).map(|d| d.text.as_bytes()).collect();
            let (adapter, _) = train_adapter(&base, &label, &texts, &config)?;
            adapters.insert(label, adapter);
        }
        Ok(Self { base, docs, embeddings, lda, pca, adapters })
    }

    pub fn groups(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    fn retriever(&self, kind: ProjectionKind) -> &Retriever {
        match kind {
            ProjectionKind::Lda => &self.lda,
            ProjectionKind::Pca => &self.pca,
        }
    }

    /// Every document in the first two coordinates of the chosen projection.
    pub fn scatter(&self, kind: ProjectionKind) -> Result<Vec<Point>> {
        let r = self.retriever(kind);
        self.docs
            .iter()
            .zip(&self.embeddings)
            .map(|(d, e)| {
                let (x, y) = plane(&r.project(e)?);
                let half = d.text.len().div_ceil(2);
                let prompt = String::from_utf8_lossy(&d.text.as_bytes()[..half]).into_owned();
                Ok(Point { doc_id: d.doc_id.clone(), group: d.label.clone(), prompt, x, y })
            })
            .collect()
    }

    /// Ranks the groups whose labels the caller holds by LDA-GMM density.
    pub fn rank(&self, query: &str, held: &[String], k: usize, weighting: Weighting) -> Result<Ranking> {
        let embedding = EmbeddingProvider::new(&self.base).embed_query(query.as_bytes())?;
        let accessible: BTreeMap<String, String> = self
            .adapters
            .iter()
            .filter(|(g, _)| held.contains(g))
            .map(|(g, a)| (g.clone(), a.adapter_id.clone()))
            .collect();
        let ranked = self.lda.rank(&embedding, &accessible, k, weighting)?;
        let mix = ranked.mix()?;
        Ok(Ranking {
            query: plane(&self.lda.project(&embedding)?),
            weights: mix.entries.iter().map(|(_, w)| *w).collect(),
            entries: ranked.entries,
        })
    }

    /// Mixes group adapters with the given non-negative weights, normalized
    /// to sum to one. All-zero weights leave the base model unchanged.
    pub fn compose(&self, weights: &[(String, f64)], prompt: &str) -> Result<Composition> {
        for (g, w) in weights {
            if !self.adapters.contains_key(g) {
                return Err(Error::UnknownGroup(g.clone()));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("weight for {g} must be non-negative")));
            }
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let normalized: Vec<(String, f64)> = if total > 0.0 {
            weights.iter().filter(|(_, w)| *w > 0.0).map(|(g, w)| (g.clone(), w / total)).collect()
        } else {
            Vec::new()
        };
        let delta = if normalized.is_empty() {
            None
        } else {
            let mix = AdapterMix {
                entries: normalized.iter().map(|(g, w)| (self.adapters[g].adapter_id.clone(), *w)).collect(),
                weighting: Weighting::Uniform,
            };
            let by_id: BTreeMap<&str, &Adapter> = self.adapters.values().map(|a| (a.adapter_id.as_str(), a)).collect();
            Some(ComposedDelta::from_mix(&mix, |id| by_id.get(id).copied())?)
        };

        let mut perplexity = BTreeMap::new();
        for g in self.adapters.keys() {
            let mut sum = 0.0;
            for d in members(&self.docs, g).take(EVAL_DOCS) {
                sum += force_decode_nll(&self.base, delta.as_ref(), d.text.as_bytes(), &d.doc_id)?.perplexity;
            }
            perplexity.insert(g.clone(), sum / EVAL_DOCS as f64);
        }
        Ok(Composition { next: self.next_chars(prompt, delta.as_ref(), 8)?, weights: normalized, perplexity })
    }

    fn next_chars(&self, prompt: &str, delta: Option<&ComposedDelta>, top: usize) -> Result<Vec<(String, f64)>> {
        let ctx = self.base.config().context_len;
        let mut tokens = vec![Tokenizer::BOS];
        tokens.extend(prompt.bytes().map(u32::from));
        if tokens.len() > ctx {
            tokens.drain(1..tokens.len() - ctx + 1);
        }
        let logits = self.base.forward_logits(&tokens, delta)?;
        let v = self.base.config().vocab_size;
        let last = &logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
        let max = last.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exp: Vec<f64> = last.iter().map(|&l| f64::from(l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let mut ranked: Vec<(usize, f64)> = exp.iter().map(|e| e / z).enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked.into_iter().take(top).map(|(t, p)| (token_label(t), p)).collect())
    }
}

fn group_ids(docs: &[CorpusDoc]) -> Vec<String> {
    let mut ids: Vec<String> = docs.iter().map(|d| d.label.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

fn members<'a>(docs: &'a [CorpusDoc], label: &'a str) -> impl Iterator<Item = &'a CorpusDoc> + 'a {
    docs.iter().filter(move |d| d.label == label)
}

fn plane(z: &[f64]) -> (f64, f64) {
    (z.first().copied().unwrap_or(0.0), z.get(1).copied().unwrap_or(0.0))
}

fn token_label(token: usize) -> String {
    match u8::try_from(token) {
        Ok(b' ') => "␣".into(),
        Ok(b) if b.is_ascii_graphic() => char::from(b).to_string(),
        Ok(b) => format!("0x{b:02x}"),
        Err(_) if token == Tokenizer::EOS as usize => "<eos>".into(),
        Err(_) => format!("<{token}>"),
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(value).map_err(js)
}

fn projection(kind: &str) -> std::result::Result<ProjectionKind, JsError> {
    match kind {
        "lda" => Ok(ProjectionKind::Lda),
        "pca" => Ok(ProjectionKind::Pca),
        other => Err(JsError::new(&format!("unknown projection {other}"))),
    }
}

/// JavaScript handle. Results are returned as JSON strings.
#[wasm_bindgen]
pub struct Demo(DemoCore);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, groups: u32) -> std::result::Result<Demo, JsError> {
        DemoCore::build(u64::from(seed), groups as usize).map(Demo).map_err(js)
    }

    /// JSON array of group ids.
    pub fn groups(&self) -> std::result::Result<String, JsError> {
        to_json(&self.0.groups())
    }

    /// `kind` is `"lda"` or `"pca"`.
    pub fn scatter(&self, kind: &str) -> std::result::Result<String, JsError> {
        to_json(&self.0.scatter(projection(kind)?).map_err(js)?)
    }

    /// `held` is a JSON array of labels; `density` selects density-softmax weights.
    pub fn rank(&self, query: &str, held: &str, k: u32, density: bool) -> std::result::Result<String, JsError> {
        let held: Vec<String> = serde_json::from_str(held).map_err(js)?;
        let weighting = if density { Weighting::DensitySoftmax } else { Weighting::Uniform };
        to_json(&self.0.rank(query, &held, k as usize, weighting).map_err(js)?)
    }

    /// `weights` is a JSON object from group id to a non-negative weight.
    pub fn compose(&self, weights: &str, prompt: &str) -> std::result::Result<String, JsError> {
        let weights: BTreeMap<String, f64> = serde_json::from_str(weights).map_err(js)?;
        let weights: Vec<(String, f64)> = weights.into_iter().collect();
        to_json(&self.0.compose(&weights, prompt).map_err(js)?)
    }
}
