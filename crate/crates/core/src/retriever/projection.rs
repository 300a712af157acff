use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Lda,
    Pca,
}

impl ProjectionKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            ProjectionKind::Lda => 0,
            ProjectionKind::Pca => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ProjectionKind::Lda),
            1 => Ok(ProjectionKind::Pca),
            _ => Err(Error::Format(format!("unknown projection kind {c}"))),
        }
    }
}

/// Linear map `[d_out × d_in]`, rows unit-norm with their first non-zero
/// coefficient positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub kind: ProjectionKind,
    pub d_in: usize,
    pub d_out: usize,
    pub class_count: usize,
    /// Row-major `[d_out, d_in]`.
    pub matrix: Vec<f64>,
}

impl Projection {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Shape(format!("projection expects {} dims, got {}", self.d_in, x.len())));
        }
        Ok(self.matrix.chunks_exact(self.d_in).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.d_in..(i + 1) * self.d_in]
    }
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let d = vectors.first().map(Vec::len).ok_or_else(|| Error::TooFewSamples("no vectors".into()))?;
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("vectors must share a non-zero dimension".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    Ok(d)
}

fn mean_of<'a>(vs: impl Iterator<Item = &'a Vec<f64>>, d: usize) -> DVector<f64> {
    let mut m = DVector::zeros(d);
    let mut n = 0;
    for v in vs {
        m += DVector::from_column_slice(v);
        n += 1;
    }
    m / n.max(1) as f64
}

/// Unit-normalizes and fixes the sign so the first non-negligible entry is positive.
fn canonical_row(v: &DVector<f64>) -> Vec<f64> {
    let norm = v.norm();
    let mut row: Vec<f64> = v.iter().map(|x| x / norm).collect();
    if let Some(first) = row.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
    }
    row
}

/// Eigenpairs sorted by eigenvalue, descending; ties keep index order.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, DVector<f64>)> =
        eig.eigenvalues.iter().enumerate().map(|(i, &l)| (l, eig.eigenvectors.column(i).into_owned())).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Fisher discriminant directions: the top generalized eigenvectors of
/// `S_b w = λ (S_w + ridge · tr(S_w)/d · I) w`.
///
/// `labels[i]` is the class index of `vectors[i]`; classes are `0..K`.
pub fn fit_lda(vectors: &[Vec<f64>], labels: &[usize], ridge: f64) -> Result<Projection> {
    let d = check_vectors(vectors)?;
    if labels.len() != vectors.len() {
        return Err(Error::Shape("one label per vector".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::TooFewSamples("LDA needs at least two classes".into()));
    }
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::TooFewSamples(format!("class {c} has {} samples, need 2", counts[c])));
    }
    let overall = mean_of(vectors.iter(), d);
    let means: Vec<DVector<f64>> =
        (0..k).map(|c| mean_of(vectors.iter().zip(labels).filter(|(_, &l)| l == c).map(|(v, _)| v), d)).collect();
    let mut sw = DMatrix::<f64>::zeros(d, d);
    for (v, &l) in vectors.iter().zip(labels) {
        let diff = DVector::from_column_slice(v) - &means[l];
        sw += &diff * diff.transpose();
    }
    let mut sb = DMatrix::<f64>::zeros(d, d);
    for (c, m) in means.iter().enumerate() {
        let diff = m - &overall;
        sb += (&diff * diff.transpose()) * counts[c] as f64;
    }
    let trace_scale = sw.trace() / d as f64;
    let shift = ridge * if trace_scale > 0.0 { trace_scale } else { 1.0 };
    let sw_reg = sw + DMatrix::identity(d, d) * shift;
    let chol = sw_reg
        .cholesky()
        .ok_or_else(|| Error::Config("within-class scatter is singular; increase the ridge".into()))?;
    let l = chol.l();
    // M = L⁻¹ S_b L⁻ᵀ is symmetric with the same spectrum as S_w⁻¹ S_b.
    let left = l.solve_lower_triangular(&sb).expect("cholesky factor is invertible");
    let m = l.solve_lower_triangular(&left.transpose()).expect("cholesky factor is invertible");
    let m = (&m + m.transpose()) * 0.5;
    let d_out = (k - 1).min(d);
    let lt = l.transpose();
    let mut matrix = Vec::with_capacity(d_out * d);
    for (_, u) in sorted_eigen(m).into_iter().take(d_out) {
        let w = lt.solve_upper_triangular(&u).expect("cholesky factor is invertible");
        matrix.extend(canonical_row(&w));
    }
    Ok(Projection { kind: ProjectionKind::Lda, d_in: d, d_out, class_count: k, matrix })
}

/// Top principal axes of the centered (population) covariance.
pub fn fit_pca(vectors: &[Vec<f64>], d_out: usize) -> Result<Projection> {
    let d = check_vectors(vectors)?;
    if d_out == 0 || d_out > d {
        return Err(Error::Config(format!("PCA output dimension {d_out} must be in 1..={d}")));
    }
    if vectors.len() < d_out {
        return Err(Error::TooFewSamples(format!("{} samples for {d_out} components", vectors.len())));
    }
    let cov = covariance(vectors, d);
    let mut matrix = Vec::with_capacity(d_out * d);
    for (_, u) in sorted_eigen(cov).into_iter().take(d_out) {
        matrix.extend(canonical_row(&u));
    }
    Ok(Projection { kind: ProjectionKind::Pca, d_in: d, d_out, class_count: 0, matrix })
}

/// Population covariance `(1/n) Σ (x − μ)(x − μ)ᵀ`.
pub(crate) fn covariance(vectors: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    let mean = mean_of(vectors.iter(), d);
    let mut cov = DMatrix::zeros(d, d);
    for v in vectors {
        let diff = DVector::from_column_slice(v) - &mean;
        cov += &diff * diff.transpose();
    }
    cov / vectors.len() as f64
}

/// Eigenvalues of the population covariance, descending.
pub fn covariance_spectrum(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_vectors(vectors)?;
    Ok(sorted_eigen(covariance(vectors, d)).into_iter().map(|(l, _)| l).collect())
}
