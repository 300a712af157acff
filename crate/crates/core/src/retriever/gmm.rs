use nalgebra::{DMatrix, DVector};

use super::projection::covariance;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One Gaussian per adapter group, full covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmComponent {
    pub group_id: String,
    pub mean: Vec<f64>,
    /// Row-major `[d, d]`, symmetric positive-definite.
    pub covariance: Vec<f64>,
    pub log_weight: f64,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl GmmComponent {
    pub fn new(group_id: String, mean: Vec<f64>, covariance: Vec<f64>, log_weight: f64) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.len() != d * d {
            return Err(Error::Shape(format!("component {group_id}: mean {d}, covariance {}", covariance.len())));
        }
        if mean.iter().chain(&covariance).any(|x| !x.is_finite()) || !log_weight.is_finite() {
            return Err(Error::NonFinite(format!("component {group_id}")));
        }
        let m = DMatrix::from_row_slice(d, d, &covariance);
        if (&m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) {
            return Err(Error::Config(format!("component {group_id}: covariance is not symmetric")));
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Config(format!("component {group_id}: covariance is not positive-definite")))?
            .unpack();
        let log_det = 2.0 * chol.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self { group_id, mean, covariance, log_weight, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log N(x | mean, covariance)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("query has {} dims, component {}", x.len(), self.dim())));
        }
        let diff = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let z = self.chol.solve_lower_triangular(&diff).expect("cholesky factor is invertible");
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det + z.norm_squared()))
    }

    fn inverse_trace(&self) -> f64 {
        let d = self.dim();
        let inv_l = self.chol.solve_lower_triangular(&DMatrix::identity(d, d)).expect("cholesky factor is invertible");
        inv_l.norm_squared()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
    /// Absolute covariance ridge added at fit time.
    pub ridge: f64,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, GmmComponent::dim)
    }

    pub fn component(&self, group_id: &str) -> Option<&GmmComponent> {
        self.components.iter().find(|c| c.group_id == group_id)
    }

    /// `log_weight + log density` for every component, in component order.
    pub fn joint_log_densities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.components.iter().map(|c| Ok(c.log_weight + c.log_density(x)?)).collect()
    }

    /// `Σ_i log Σ_k π_k N(x_i | μ_k, Σ_k)`.
    pub fn log_likelihood(&self, vectors: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for x in vectors {
            total += log_sum_exp(&self.joint_log_densities(x)?);
        }
        Ok(total)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Result of [`fit_gmm`]: the model plus the penalized log-likelihood before
/// and after each EM iteration (a single entry when no EM is run).
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub objective_trace: Vec<f64>,
}

/// Supervised fit: component `c` takes the mean and population covariance
/// of the vectors labelled `c`, plus `ε·mean_diag·I`, and weight
/// `count_c / total`.
///
/// Optional EM refinement maximizes the log-likelihood penalized by a fixed
/// prior `−½ Σ_k tr(Ψ_k Σ_k⁻¹)` with `Ψ_k = ridge · n_k · I`. That prior is
/// exactly what reproduces the supervised ridge, and it makes each EM
/// iteration non-decreasing in the penalized objective.
pub fn fit_gmm(
    vectors: &[Vec<f64>],
    labels: &[usize],
    group_ids: &[String],
    eps: f64,
    em_iterations: usize,
) -> Result<GmmFit> {
    if labels.len() != vectors.len() {
        return Err(Error::Shape("one label per vector".into()));
    }
    let d = vectors.first().map(Vec::len).ok_or_else(|| Error::TooFewSamples("no vectors".into()))?;
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("vectors must share a non-zero dimension".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("GMM input".into()));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("GMM ridge must be positive, got {eps}")));
    }
    let k = group_ids.len();
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::Config("label outside the group list".into()));
    }
    let mut buckets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    for (v, &l) in vectors.iter().zip(labels) {
        buckets[l].push(v.clone());
    }
    if let Some(c) = buckets.iter().position(|b| b.len() < 2) {
        return Err(Error::TooFewSamples(format!("group {} has {} samples, need 2", group_ids[c], buckets[c].len())));
    }
    let overall = covariance(vectors, d);
    let mean_diag = overall.trace() / d as f64;
    let ridge = eps * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let n = vectors.len() as f64;

    let mut components = Vec::with_capacity(k);
    for (g, bucket) in group_ids.iter().zip(&buckets) {
        let mut mean = vec![0.0; d];
        for v in bucket {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= bucket.len() as f64);
        let cov = covariance(bucket, d) + DMatrix::identity(d, d) * ridge;
        let cov = row_major(&cov);
        components.push(GmmComponent::new(g.clone(), mean, cov, (bucket.len() as f64 / n).ln())?);
    }
    let mut model = GmmModel { components, ridge };
    let priors: Vec<f64> = buckets.iter().map(|b| ridge * b.len() as f64).collect();
    let mut trace = vec![penalized(&model, vectors, &priors)?];
    for _ in 0..em_iterations {
        model = em_step(&model, vectors, &priors)?;
        trace.push(penalized(&model, vectors, &priors)?);
    }
    Ok(GmmFit { model, objective_trace: trace })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
    out
}

fn penalized(model: &GmmModel, vectors: &[Vec<f64>], priors: &[f64]) -> Result<f64> {
    let penalty: f64 = model.components.iter().zip(priors).map(|(c, psi)| 0.5 * psi * c.inverse_trace()).sum();
    Ok(model.log_likelihood(vectors)? - penalty)
}

fn em_step(model: &GmmModel, vectors: &[Vec<f64>], priors: &[f64]) -> Result<GmmModel> {
    let k = model.components.len();
    let d = model.dim();
    let n = vectors.len() as f64;
    let mut resp = Vec::with_capacity(vectors.len());
    for x in vectors {
        let joint = model.joint_log_densities(x)?;
        let lse = log_sum_exp(&joint);
        resp.push(joint.iter().map(|j| (j - lse).exp()).collect::<Vec<f64>>());
    }
    let mut components = Vec::with_capacity(k);
    for (c, old) in model.components.iter().enumerate() {
        let nk = resp.iter().map(|r| r[c]).sum::<f64>().max(1e-12);
        let mut mean = DVector::<f64>::zeros(d);
        for (x, r) in vectors.iter().zip(&resp) {
            mean += DVector::from_column_slice(x) * r[c];
        }
        mean /= nk;
        let mut scatter = DMatrix::<f64>::identity(d, d) * priors[c];
        for (x, r) in vectors.iter().zip(&resp) {
            let diff = DVector::from_column_slice(x) - &mean;
            scatter += (&diff * diff.transpose()) * r[c];
        }
        let cov = scatter / nk;
        let cov = (&cov + cov.transpose()) * 0.5;
        components.push(GmmComponent::new(
            old.group_id.clone(),
            mean.iter().copied().collect(),
            row_major(&cov),
            (nk / n).ln(),
        )?);
    }
    Ok(GmmModel { components, ridge: model.ridge })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gaussian_density_at_mean() {
        let c = GmmComponent::new("g".into(), vec![0.0], vec![1.0], 0.0).unwrap();
        let density = c.log_density(&[0.0]).unwrap().exp();
        assert!((density - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn equal_counts_give_half_weights() {
        let vs = vec![vec![0.0], vec![1.0], vec![5.0], vec![6.0]];
        let fit = fit_gmm(&vs, &[0, 0, 1, 1], &["a".into(), "b".into()], 1e-6, 0).unwrap();
        for c in &fit.model.components {
            assert!((c.log_weight - 0.5f64.ln()).abs() < 1e-15);
        }
        assert_eq!(fit.objective_trace.len(), 1);
    }

    #[test]
    fn singleton_group_is_rejected() {
        let vs = vec![vec![0.0], vec![1.0], vec![5.0]];
        let err = fit_gmm(&vs, &[0, 0, 1], &["a".into(), "b".into()], 1e-6, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewSamples(_)));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        assert!(GmmComponent::new("g".into(), vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0], 0.0).is_err());
    }
}
