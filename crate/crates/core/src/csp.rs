//! Common spatial patterns for one binary split.
//!
//! The filter pair is the solution of the generalized symmetric eigenproblem
//! `Σ₋ v = λ (Σ₋ + Σ₊) v`, found by whitening with the composite covariance
//! and diagonalizing the whitened `Σ₋`. Columns of `V` are sorted by
//! descending `λ`, so the first columns favour category −1 and the last ones
//! category +1.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{HcspError, Result};
use crate::matrix_serde::{matrix_to_rows, rows_to_matrix};

/// Relative ridge added to an ill-conditioned composite covariance.
pub const COMPOSITE_RIDGE: f64 = 1e-6;
/// Row variances are floored at this fraction of the total before the log.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Symmetric spatial covariance, channels × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(pub DMatrix<f64>);

impl CovMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `E Eᵀ / trace(E Eᵀ)` for a channels × samples block.
pub fn normalized_covariance(e: &DMatrix<f64>) -> Result<CovMatrix> {
    let mut c = e * e.transpose();
    symmetrize(&mut c);
    let tr = c.trace();
    if !(tr.is_finite() && tr > 0.0) {
        return Err(HcspError::DegenerateTrial(format!(
            "covariance trace is {tr}; the trial carries no signal"
        )));
    }
    c /= tr;
    Ok(CovMatrix(c))
}

/// Mean-removed scatter `(E − Ē)(E − Ē)ᵀ / n`. Its quadratic form `vᵀSv` is
/// the population variance of the projection `vᵀE`.
pub fn centered_scatter(e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = e.ncols() as f64;
    let mean = e.column_mean();
    let mut centered = e.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut s = &centered * centered.transpose();
    s /= n;
    symmetrize(&mut s);
    s
}

/// Count-weighted mean `Σ N_j C_j / Σ N_j` of per-class covariances.
pub fn category_covariance(covs: &[CovMatrix], counts: &[usize]) -> Result<CovMatrix> {
    if covs.is_empty() || covs.len() != counts.len() {
        return Err(HcspError::param(
            "covs",
            format!("{} covariances for {} counts", covs.len(), counts.len()),
        ));
    }
    let m = covs[0].dim();
    if covs.iter().any(|c| c.dim() != m) {
        return Err(HcspError::param("covs", "covariances differ in size"));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(HcspError::param("counts", "every class needs at least one trial"));
    }
    let total: usize = counts.iter().sum();
    let mut acc = DMatrix::zeros(m, m);
    for (c, &n) in covs.iter().zip(counts) {
        acc += &c.0 * n as f64;
    }
    acc /= total as f64;
    Ok(CovMatrix(acc))
}

/// Mean of a set of same-sized covariances.
pub fn mean_covariance<'a>(covs: impl IntoIterator<Item = &'a CovMatrix>) -> Option<CovMatrix> {
    let mut iter = covs.into_iter();
    let first = iter.next()?;
    let mut acc = first.0.clone();
    let mut n = 1usize;
    for c in iter {
        acc += &c.0;
        n += 1;
    }
    acc /= n as f64;
    Some(CovMatrix(acc))
}

/// CSP solution: `Vᵀ(Σ₋+Σ₊)V = I` and `VᵀΣ₋V = diag(D)`, `D` descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FilterRepr", into = "FilterRepr")]
pub struct SpatialFilter {
    /// Columns are spatial filters.
    pub v: DMatrix<f64>,
    pub d: Vec<f64>,
}

impl SpatialFilter {
    pub fn channels(&self) -> usize {
        self.v.nrows()
    }

    /// Column indices kept for `k` filters per side: first `k` then last `k`.
    pub fn selected_columns(&self, k: usize) -> Vec<usize> {
        let m = self.v.ncols();
        (0..k).chain(m - k..m).collect()
    }

    /// The `m × 2k` sub-matrix of retained filters.
    pub fn selected(&self, k: usize) -> Result<DMatrix<f64>> {
        check_k(k, self.channels())?;
        Ok(self.v.select_columns(&self.selected_columns(k)))
    }
}

#[derive(Serialize, Deserialize)]
struct FilterRepr {
    v: Vec<Vec<f64>>,
    d: Vec<f64>,
}

impl TryFrom<FilterRepr> for SpatialFilter {
    type Error = HcspError;
    fn try_from(r: FilterRepr) -> Result<Self> {
        let v = rows_to_matrix(&r.v)?;
        if !v.is_square() || v.ncols() != r.d.len() {
            return Err(HcspError::Schema(format!(
                "spatial filter is {:?} with {} eigenvalues",
                v.shape(),
                r.d.len()
            )));
        }
        Ok(SpatialFilter { v, d: r.d })
    }
}

impl From<SpatialFilter> for FilterRepr {
    fn from(f: SpatialFilter) -> Self {
        FilterRepr {
            v: matrix_to_rows(&f.v),
            d: f.d,
        }
    }
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k == 0 || 2 * k > m {
        return Err(HcspError::param(
            "k",
            format!("need 1 <= k and 2k <= {m} channels, got k = {k}"),
        ));
    }
    Ok(())
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

fn min_max(values: &DVector<f64>) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Solve the CSP generalized eigenproblem for one category pair.
///
/// A ridge of `1e-6 · trace/m` is split evenly between the two categories
/// when the composite covariance has an eigenvalue below that level.
pub fn solve_csp(sigma_neg: &CovMatrix, sigma_pos: &CovMatrix) -> Result<SpatialFilter> {
    let m = sigma_neg.dim();
    if sigma_pos.dim() != m || m == 0 {
        return Err(HcspError::param("sigma", "category covariances differ in size"));
    }
    let mut neg = sigma_neg.0.clone();
    let mut pos = sigma_pos.0.clone();
    symmetrize(&mut neg);
    symmetrize(&mut pos);
    if neg.iter().chain(pos.iter()).any(|v| !v.is_finite()) {
        return Err(HcspError::Numerical("non-finite covariance entries".into()));
    }

    let mut composite = &neg + &pos;
    let mut eig = SymmetricEigen::new(composite.clone());
    let ridge = COMPOSITE_RIDGE * composite.trace() / m as f64;
    let (lo, _) = min_max(&eig.eigenvalues);
    if lo < ridge {
        for i in 0..m {
            neg[(i, i)] += 0.5 * ridge;
            pos[(i, i)] += 0.5 * ridge;
        }
        composite = &neg + &pos;
        eig = SymmetricEigen::new(composite);
    }
    let (lo, hi) = min_max(&eig.eigenvalues);
    if !(lo > 0.0 && hi.is_finite()) || lo <= hi * f64::EPSILON {
        return Err(HcspError::Numerical(format!(
            "composite covariance is singular (eigenvalues in [{lo:e}, {hi:e}], condition ~{:e})",
            hi / lo.max(f64::MIN_POSITIVE)
        )));
    }

    // Symmetric inverse square root of the composite.
    let inv_sqrt = DVector::from_iterator(m, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let u = &eig.eigenvectors;
    let whitening = u * DMatrix::from_diagonal(&inv_sqrt) * u.transpose();

    let mut whitened_neg = &whitening * &neg * &whitening;
    symmetrize(&mut whitened_neg);
    let inner = SymmetricEigen::new(whitened_neg);

    let mut order: Vec<usize> = (0..m).collect();
    // Stable: equal eigenvalues keep the order returned by the solver.
    order.sort_by(|&a, &b| inner.eigenvalues[b].total_cmp(&inner.eigenvalues[a]));

    let mut v = DMatrix::zeros(m, m);
    let mut d = Vec::with_capacity(m);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = &whitening * inner.eigenvectors.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
        v.set_column(dst, &col);
        d.push(inner.eigenvalues[src].clamp(0.0, 1.0));
    }
    Ok(SpatialFilter { v, d })
}

/// Rows `Vᵀ E` for the first `k` and last `k` filters.
pub fn project(filter: &SpatialFilter, e: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let w = filter.selected(k)?;
    if e.nrows() != filter.channels() {
        return Err(HcspError::param(
            "e",
            format!("{} channels, filter expects {}", e.nrows(), filter.channels()),
        ));
    }
    Ok(w.transpose() * e)
}

/// Log-variance-ratio features, one per projected component.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `log(var_K / Σ_q var_q)` from a vector of component variances.
pub fn features_from_variances(vars: &[f64]) -> FeatureVector {
    let total: f64 = vars.iter().sum();
    let floor = VARIANCE_FLOOR * total;
    let clamped: Vec<f64> = vars.iter().map(|v| v.max(floor)).collect();
    let denom: f64 = clamped.iter().sum();
    FeatureVector(clamped.iter().map(|v| (v / denom).ln()).collect())
}

/// Features of a projected trial (rows are components).
pub fn csp_features(p: &DMatrix<f64>) -> FeatureVector {
    let n = p.ncols() as f64;
    let vars: Vec<f64> = p
        .row_iter()
        .map(|row| {
            let mean = row.sum() / n;
            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
        })
        .collect();
    features_from_variances(&vars)
}

/// Same features as `csp_features(project(filter, E, k))`, computed from the
/// centered scatter of `E` instead of the samples.
pub fn features_from_scatter(selected: &DMatrix<f64>, scatter: &DMatrix<f64>) -> FeatureVector {
    let vars: Vec<f64> = selected
        .column_iter()
        .map(|w| (w.transpose() * scatter * w)[(0, 0)].max(0.0))
        .collect();
    features_from_variances(&vars)
}
