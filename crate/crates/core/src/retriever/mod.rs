//! Query routing: embed, project (LDA or PCA), and rank adapter groups by
//! Gaussian joint density.

mod embed;
mod gmm;
mod projection;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use embed::EmbeddingProvider;
pub use gmm::{fit_gmm, GmmComponent, GmmFit, GmmModel};
pub use projection::{covariance_spectrum, fit_lda, fit_pca, Projection, ProjectionKind};

use crate::codec::{sha256, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::lora::{AdapterMix, Weighting};

const MAGIC: &[u8; 4] = b"ASWR";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverConfig {
    pub projection: ProjectionKind,
    /// LDA within-class ridge, relative to the mean within-class variance.
    pub lda_ridge: f64,
    /// GMM covariance ridge, relative to the mean projected variance.
    pub gmm_ridge: f64,
    pub em_iterations: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self { projection: ProjectionKind::Lda, lda_ridge: 0.01, gmm_ridge: 0.1, em_iterations: 0 }
    }
}

/// Which documents of a group are embedded to fit the retriever.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldoutPolicy {
    pub fraction: f64,
    pub min_docs: usize,
    pub seed: u64,
}

impl Default for HeldoutPolicy {
    fn default() -> Self {
        Self { fraction: 0.1, min_docs: 8, seed: 1 }
    }
}

impl HeldoutPolicy {
    pub fn count(&self, group_size: usize) -> usize {
        let wanted = (self.fraction * group_size as f64).ceil() as usize;
        wanted.max(self.min_docs).min(group_size)
    }

    /// Picks held-out documents by content hash. The choice depends only on
    /// the group id, the set of hashes and the seed, never on history, so a
    /// rebuild after a purge selects exactly what a fresh build would.
    pub fn select<S: AsRef<str>>(&self, group_id: &str, content_hashes: &[S]) -> Vec<String> {
        let mut sorted: Vec<String> = content_hashes.iter().map(|h| h.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        let salt = sha256(group_id.as_bytes());
        let group_seed = u64::from_le_bytes(salt[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ group_seed);
        sorted.shuffle(&mut rng);
        sorted.truncate(self.count(sorted.len()));
        sorted.sort();
        sorted
    }
}

/// Fitted projection plus one Gaussian per group.
#[derive(Clone, Debug, PartialEq)]
pub struct Retriever {
    pub projection: Projection,
    pub gmm: GmmModel,
    pub lda_ridge: f64,
    pub gmm_ridge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub group_id: String,
    pub adapter_id: String,
    pub log_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAdapters {
    pub entries: Vec<RankedEntry>,
    pub k: usize,
    pub weighting: Weighting,
}

impl RankedAdapters {
    pub fn adapter_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.adapter_id.as_str()).collect()
    }

    pub fn mix(&self) -> Result<AdapterMix> {
        let ids = self.adapter_ids();
        match self.weighting {
            Weighting::Uniform => AdapterMix::uniform(&ids),
            Weighting::DensitySoftmax => {
                let logs: Vec<f64> = self.entries.iter().map(|e| e.log_density).collect();
                AdapterMix::density_softmax(&ids, &logs)
            }
        }
    }
}

impl Retriever {
    /// Fits on labelled held-out embeddings. Groups are indexed in sorted
    /// order so the result does not depend on label spelling order.
    pub fn fit(vectors: &[Vec<f64>], groups: &[String], config: &RetrieverConfig) -> Result<Self> {
        if vectors.len() != groups.len() {
            return Err(Error::Shape("one group label per vector".into()));
        }
        let mut ids: Vec<String> = groups.to_vec();
        ids.sort();
        ids.dedup();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let labels: Vec<usize> = groups.iter().map(|g| index[g.as_str()]).collect();
        let projection = match config.projection {
            ProjectionKind::Lda => fit_lda(vectors, &labels, config.lda_ridge)?,
            ProjectionKind::Pca => {
                if ids.len() < 2 {
                    return Err(Error::TooFewSamples("need at least two groups".into()));
                }
                let d_in = vectors.first().map_or(0, Vec::len);
                fit_pca(vectors, (ids.len() - 1).min(d_in))?
            }
        };
        let projected: Vec<Vec<f64>> = vectors.iter().map(|v| projection.apply(v)).collect::<Result<_>>()?;
        let fit = fit_gmm(&projected, &labels, &ids, config.gmm_ridge, config.em_iterations)?;
        Ok(Self { projection, gmm: fit.model, lda_ridge: config.lda_ridge, gmm_ridge: config.gmm_ridge })
    }

    pub fn group_ids(&self) -> Vec<&str> {
        self.gmm.components.iter().map(|c| c.group_id.as_str()).collect()
    }

    pub fn project(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.projection.apply(embedding)
    }

    /// Ranks the accessible groups for a query embedding.
    ///
    /// `accessible` maps each group the caller may use to its live adapter.
    pub fn rank(
        &self,
        embedding: &[f64],
        accessible: &BTreeMap<String, String>,
        k: usize,
        weighting: Weighting,
    ) -> Result<RankedAdapters> {
        let z = self.project(embedding)?;
        rank_and_filter(&self.gmm, &z, accessible, k, weighting)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.projection;
        let mut e = Encoder::new(MAGIC, VERSION);
        e.u8(p.kind.code());
        e.u32(p.d_in as u32);
        e.u32(p.d_out as u32);
        e.u32(self.gmm.components.len() as u32);
        e.f64(self.gmm_ridge);
        e.f64(self.lda_ridge);
        e.f64(self.gmm.ridge);
        e.f64s(&p.matrix);
        for c in &self.gmm.components {
            e.str(&c.group_id);
            e.f64s(&c.mean);
            e.f64s(&c.covariance);
            e.f64(c.log_weight);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC)?;
        if d.version != VERSION {
            return Err(Error::Format(format!("unsupported retriever version {}", d.version)));
        }
        let kind = ProjectionKind::from_code(d.u8()?)?;
        let d_in = d.u32()? as usize;
        let d_out = d.u32()? as usize;
        let k = d.u32()? as usize;
        let gmm_ridge = d.f64()?;
        let lda_ridge = d.f64()?;
        let abs_ridge = d.f64()?;
        let matrix = d.f64s(d_in * d_out)?;
        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let group = d.str()?;
            let mean = d.f64s(d_out)?;
            let cov = d.f64s(d_out * d_out)?;
            let lw = d.f64()?;
            components.push(GmmComponent::new(group, mean, cov, lw)?);
        }
        d.finish()?;
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("retriever projection".into()));
        }
        let class_count = if kind == ProjectionKind::Lda { k } else { 0 };
        Ok(Self {
            projection: Projection { kind, d_in, d_out, class_count, matrix },
            gmm: GmmModel { components, ridge: abs_ridge },
            lda_ridge,
            gmm_ridge,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Scores only the accessible components, then keeps the best
/// `min(k, |accessible|)` by joint log density, ties by adapter id.
pub fn rank_and_filter(
    gmm: &GmmModel,
    projected_query: &[f64],
    accessible: &BTreeMap<String, String>,
    k: usize,
    weighting: Weighting,
) -> Result<RankedAdapters> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if accessible.is_empty() {
        return Err(Error::NoAccessibleAdapters);
    }
    let mut entries = Vec::new();
    for c in &gmm.components {
        if let Some(adapter_id) = accessible.get(&c.group_id) {
            let log_density = c.log_weight + c.log_density(projected_query)?;
            entries.push(RankedEntry { group_id: c.group_id.clone(), adapter_id: adapter_id.clone(), log_density });
        }
    }
    if entries.is_empty() {
        return Err(Error::NoAccessibleAdapters);
    }
    entries.sort_by(|a, b| b.log_density.total_cmp(&a.log_density).then_with(|| a.adapter_id.cmp(&b.adapter_id)));
    entries.truncate(k);
    Ok(RankedAdapters { entries, k, weighting })
}
