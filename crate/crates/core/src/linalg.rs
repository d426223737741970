//! Dense linear-algebra helpers shared by the basis, prior and sampler modules.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Entries with magnitude at or below this are skipped when fixing eigenvector signs.
pub const SIGN_TOLERANCE: f64 = 1e-12;
/// Eigenvalues closer than this are treated as one cluster when ordering eigenvectors.
pub const CLUSTER_GAP: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Flips `v` so that its first entry with `|entry| > 1e-12` is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > SIGN_TOLERANCE) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

fn lexicographic_desc(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match y.partial_cmp(x).unwrap_or(Ordering::Equal) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Eigendecomposition of a symmetric matrix with a reproducible layout.
#[derive(Debug, Clone)]
pub struct OrderedEigen {
    /// Eigenvalues, non-increasing.
    pub values: DVector<f64>,
    /// Unit eigenvectors as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

/// Symmetric eigendecomposition ordered by descending eigenvalue.
///
/// Each eigenvector carries the first-significant-entry-positive sign convention.
/// Inside a cluster of eigenvalues separated by less than [`CLUSTER_GAP`] the
/// vectors are ordered lexicographically (descending) so the layout does not
/// depend on the order the solver happened to return them in.
pub fn ordered_eigen(m: &DMatrix<f64>) -> OrderedEigen {
    let eig = symmetrize(m).symmetric_eigen();
    order_eigenpairs(&eig.eigenvalues, &eig.eigenvectors)
}

/// Applies the ordering and sign convention of [`ordered_eigen`] to eigenpairs
/// given as a value vector and a matrix of column vectors.
pub fn order_eigenpairs(values: &DVector<f64>, vectors: &DMatrix<f64>) -> OrderedEigen {
    let k = values.len();
    let mut pairs: Vec<(f64, DVector<f64>)> = (0..k)
        .map(|i| {
            let mut v = vectors.column(i).into_owned();
            fix_sign(&mut v);
            (values[i], v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end - 1].0 - pairs[end].0 < CLUSTER_GAP {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|a, b| lexicographic_desc(&a.1, &b.1));
        }
        start = end;
    }

    let values = DVector::from_iterator(k, pairs.iter().map(|p| p.0));
    let mut out = DMatrix::zeros(vectors.nrows(), k);
    for (j, (_, v)) in pairs.iter().enumerate() {
        out.set_column(j, v);
    }
    OrderedEigen { values, vectors: out }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Numerical rank via singular values, threshold `max(rows, cols) * eps * sigma_max`.
pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.is_empty() {
        return 0;
    }
    let sv = x.singular_values();
    let smax = sv.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = x.nrows().max(x.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Moore-Penrose pseudoinverse; singular values at or below `tol` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            out += (vt.row(i).transpose() / s) * u.column(i).transpose();
        }
    }
    out
}

/// Default pseudoinverse tolerance for a matrix: `max(rows, cols) * eps * sigma_max`.
pub fn default_pinv_tolerance(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let smax = m.singular_values().iter().copied().fold(0.0_f64, f64::max);
    m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax
}

/// Reconstructs `V diag(max(lambda, 0)) V'` from a symmetric matrix.
pub fn clip_to_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

/// Inverse of a symmetric positive definite matrix, `None` if Cholesky fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetrize(m).cholesky().map(|c| symmetrize(&c.inverse()))
}

/// Returns `L` with `L L' = m` for a symmetric PSD matrix.
///
/// Cholesky is tried first; on failure the factor comes from the eigendecomposition
/// with negative eigenvalues clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(m);
    if let Some(c) = s.clone().cholesky() {
        return c.l();
    }
    let eig = s.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws from `N(mean, cov)` for a symmetric PSD covariance.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let l = psd_factor(cov);
    mean + l * standard_normal_vector(mean.len(), rng)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Counts dense factorizations performed in the sampler hot path and tracks
/// the largest matrix dimension factorized.
#[derive(Debug, Default)]
pub struct OpCounter {
    factorizations: AtomicU64,
    max_dim: AtomicUsize,
    pinv_fallbacks: AtomicU64,
}

impl OpCounter {
    pub fn record(&self, dim: usize) {
        self.factorizations.fetch_add(1, AtomicOrdering::Relaxed);
        self.max_dim.fetch_max(dim, AtomicOrdering::Relaxed);
    }

    pub fn record_pinv_fallback(&self) {
        self.pinv_fallbacks.fetch_add(1, AtomicOrdering::Relaxed);
    }

    pub fn snapshot(&self) -> OpStats {
        OpStats {
            factorizations: self.factorizations.load(AtomicOrdering::Relaxed),
            max_factor_dim: self.max_dim.load(AtomicOrdering::Relaxed),
            pinv_fallbacks: self.pinv_fallbacks.load(AtomicOrdering::Relaxed),
        }
    }
}

/// Snapshot of [`OpCounter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpStats {
    pub factorizations: u64,
    pub max_factor_dim: usize,
    pub pinv_fallbacks: u64,
}
