//! Fisher-LDA scores and Gaussian category densities for one level.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::csp::FeatureVector;
use crate::error::{HcspError, Result};
use crate::matrix_serde::{rows_to_matrix, matrix_to_rows};

/// Floor on the pooled per-component variance in the Fisher weight.
pub const FISHER_VARIANCE_FLOOR: f64 = 1e-12;
/// Ridge on fitted density covariances, relative to the mean diagonal.
pub const DENSITY_RIDGE: f64 = 1e-6;
/// Absolute ridge used when the fitted covariance is identically zero.
pub const DENSITY_RIDGE_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdaMode {
    /// One scalar LDA per feature component; the score has 2k entries.
    #[default]
    PerComponent,
    /// One LDA direction over all components; the score is a scalar.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherWeights {
    pub mode: LdaMode,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

fn check_sets(neg: &[FeatureVector], pos: &[FeatureVector]) -> Result<usize> {
    if neg.is_empty() || pos.is_empty() {
        return Err(HcspError::Training(
            "Fisher LDA needs at least one feature vector per category".into(),
        ));
    }
    let dim = neg[0].len();
    if neg.iter().chain(pos).any(|f| f.len() != dim) {
        return Err(HcspError::param("features", "feature vectors differ in length"));
    }
    Ok(dim)
}

/// Component means and population variances.
fn moments(set: &[FeatureVector], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = set.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in set {
        for (m, x) in mean.iter_mut().zip(&f.0) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for f in set {
        for ((v, x), m) in var.iter_mut().zip(&f.0).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// `w_K = (σ²₋ + σ²₊)⁻¹ (μ₊ − μ₋)` for each component `K`.
pub fn fit_fisher(neg: &[FeatureVector], pos: &[FeatureVector]) -> Result<FisherWeights> {
    let dim = check_sets(neg, pos)?;
    let (mu_n, var_n) = moments(neg, dim);
    let (mu_p, var_p) = moments(pos, dim);
    let w = (0..dim)
        .map(|k| (mu_p[k] - mu_n[k]) / (var_n[k] + var_p[k]).max(FISHER_VARIANCE_FLOOR))
        .collect();
    Ok(FisherWeights {
        mode: LdaMode::PerComponent,
        w,
    })
}

fn scatter(set: &[FeatureVector], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut s = DMatrix::zeros(d, d);
    for f in set {
        let x = DVector::from_column_slice(&f.0) - mean;
        s += &x * x.transpose();
    }
    s / set.len() as f64
}

/// Multivariate LDA: `w = (Σ₋ + Σ₊)⁻¹ (μ₊ − μ₋)`, with a ridge when the
/// pooled covariance is singular.
pub fn fit_fisher_joint(neg: &[FeatureVector], pos: &[FeatureVector]) -> Result<FisherWeights> {
    let dim = check_sets(neg, pos)?;
    let mean = |set: &[FeatureVector]| {
        set.iter()
            .fold(DVector::zeros(dim), |acc, f| acc + DVector::from_column_slice(&f.0))
            / set.len() as f64
    };
    let (mu_n, mu_p) = (mean(neg), mean(pos));
    let mut pooled = scatter(neg, &mu_n) + scatter(pos, &mu_p);
    let ridge = (DENSITY_RIDGE * pooled.trace() / dim as f64).max(FISHER_VARIANCE_FLOOR);
    for i in 0..dim {
        pooled[(i, i)] += ridge;
    }
    let chol = Cholesky::new(pooled)
        .ok_or_else(|| HcspError::Numerical("pooled LDA covariance is not positive definite".into()))?;
    let w = chol.solve(&(mu_p - mu_n));
    Ok(FisherWeights {
        mode: LdaMode::Joint,
        w: w.iter().copied().collect(),
    })
}

pub fn fit_lda(mode: LdaMode, neg: &[FeatureVector], pos: &[FeatureVector]) -> Result<FisherWeights> {
    match mode {
        LdaMode::PerComponent => fit_fisher(neg, pos),
        LdaMode::Joint => fit_fisher_joint(neg, pos),
    }
}

impl FisherWeights {
    /// Dimension of the scores this projection produces.
    pub fn score_dim(&self) -> usize {
        match self.mode {
            LdaMode::PerComponent => self.w.len(),
            LdaMode::Joint => 1,
        }
    }
}

pub fn score(w: &FisherWeights, f: &FeatureVector) -> Result<ScoreVector> {
    if w.w.len() != f.len() {
        return Err(HcspError::Model(format!(
            "feature vector has {} components, weights expect {}",
            f.len(),
            w.w.len()
        )));
    }
    let products = w.w.iter().zip(&f.0).map(|(a, b)| a * b);
    Ok(match w.mode {
        LdaMode::PerComponent => ScoreVector(products.collect()),
        LdaMode::Joint => ScoreVector(vec![products.sum()]),
    })
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DensityRepr", into = "DensityRepr")]
pub struct GaussianDensity {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl PartialEq for GaussianDensity {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) || d == 0 {
            return Err(HcspError::Model(format!(
                "density mean has {d} entries but covariance is {:?}",
                covariance.shape()
            )));
        }
        let chol = Cholesky::new(covariance.clone()).ok_or_else(|| {
            HcspError::Numerical("density covariance is not positive definite".into())
        })?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            mean,
            covariance,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

/// Sample mean and `n − 1` covariance, ridged by `1e-6 · mean(diag)`.
pub fn fit_density(scores: &[ScoreVector]) -> Result<GaussianDensity> {
    if scores.len() < 2 {
        return Err(HcspError::Training(format!(
            "density estimation needs at least 2 samples, got {}",
            scores.len()
        )));
    }
    let d = scores[0].0.len();
    if d == 0 || scores.iter().any(|s| s.0.len() != d) {
        return Err(HcspError::param("scores", "score vectors differ in length"));
    }
    let n = scores.len() as f64;
    let mean = scores
        .iter()
        .fold(DVector::zeros(d), |acc, s| acc + DVector::from_column_slice(&s.0))
        / n;
    let mut cov = DMatrix::zeros(d, d);
    for s in scores {
        let x = DVector::from_column_slice(&s.0) - &mean;
        cov += &x * x.transpose();
    }
    cov /= n - 1.0;
    let ridge = (DENSITY_RIDGE * cov.trace() / d as f64).max(DENSITY_RIDGE_MIN);
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    GaussianDensity::new(mean, cov)
}

pub fn log_likelihood(density: &GaussianDensity, f: &ScoreVector) -> Result<f64> {
    if f.0.len() != density.dim() {
        return Err(HcspError::Model(format!(
            "score has {} entries, density expects {}",
            f.0.len(),
            density.dim()
        )));
    }
    let x = DVector::from_column_slice(&f.0) - &density.mean;
    let z = density
        .chol
        .l_dirty()
        .solve_lower_triangular(&x)
        .expect("Cholesky factor has a positive diagonal");
    Ok(density.log_norm - 0.5 * z.norm_squared())
}

#[derive(Serialize, Deserialize)]
struct DensityRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl TryFrom<DensityRepr> for GaussianDensity {
    type Error = HcspError;
    fn try_from(r: DensityRepr) -> Result<Self> {
        let cov = rows_to_matrix(&r.covariance)?;
        GaussianDensity::new(DVector::from_vec(r.mean), cov)
    }
}

impl From<GaussianDensity> for DensityRepr {
    fn from(g: GaussianDensity) -> Self {
        DensityRepr {
            mean: g.mean.iter().copied().collect(),
            covariance: matrix_to_rows(&g.covariance),
        }
    }
}
