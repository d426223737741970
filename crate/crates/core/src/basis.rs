//! Moran's I operator, reduced-rank MI basis and MI propagator.
//!
//! The basis for time `t` is the leading eigenvectors of
//! `G(X_t, A_t) = (I - P_X) A_t (I - P_X)`, where `P_X` projects onto the
//! column space of the covariates. The propagator `M_t` is the eigenvector
//! matrix of the projector complement of `Ψ_t = S_t' X_t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ArealGraph, DesignMatrices, VariableLinks};
use crate::linalg::{self, max_abs, numerical_rank, order_eigenpairs, ordered_eigen, pseudo_inverse, symmetrize};
use crate::{Error, Result};

/// Propagator construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagatorMode {
    /// Eigenvectors of `I_r - Ψ (Ψ'Ψ)⁺ Ψ'` with `Ψ = S'X`.
    #[default]
    Default,
    /// Eigenvectors of `G(B, I_r)` with `B = (S'X, I_r)`. Since `B` spans all of
    /// `R^r` that operator is the zero matrix, so the result is always the identity.
    LiteralB,
}

impl std::fmt::Display for PropagatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PropagatorMode::Default => "default",
            PropagatorMode::LiteralB => "literal-b",
        })
    }
}

/// Relative tolerance below which `S'X` entries are treated as exact zeros
/// when forming the propagator.
const PSI_TOLERANCE: f64 = 1e-10;

fn check_design_rank(x: &DMatrix<f64>) -> Result<()> {
    let rank = numerical_rank(x);
    if rank < x.ncols() {
        return Err(Error::Validation(format!(
            "rank-deficient design: rank {rank} < {} columns",
            x.ncols()
        )));
    }
    Ok(())
}

/// Orthonormal basis (as columns) of the orthogonal complement of `col(X)`.
fn complement_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut augmented = DMatrix::zeros(n, p + n);
    augmented.view_mut((0, 0), (n, p)).copy_from(x);
    augmented.view_mut((0, p), (n, n)).fill_with_identity();
    let q = augmented.qr().q();
    q.columns(p, n - p).into_owned()
}

/// `(I - X(X'X)⁻¹X') A (I - X(X'X)⁻¹X')`.
pub fn mi_operator(x: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if a.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "adjacency is {:?}, expected {n}x{n}",
            a.shape()
        )));
    }
    check_design_rank(x)?;
    let xtx_inv = (x.transpose() * x)
        .cholesky()
        .ok_or_else(|| Error::Validation("rank-deficient design: X'X is singular".into()))?
        .inverse();
    let complement = DMatrix::identity(n, n) - x * xtx_inv * x.transpose();
    Ok(symmetrize(&(&complement * a * &complement)))
}

/// Leading `r` eigenpairs of the MI operator.
///
/// Eigenvectors are taken inside the orthogonal complement of `col(X)`, so every
/// retained column is orthogonal to the covariates even when the retained
/// eigenvalues reach zero. Returns `(S, eigenvalues)` with eigenvalues non-increasing.
pub fn mi_basis(x: &DMatrix<f64>, a: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = x.nrows();
    if a.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "adjacency is {:?}, expected {n}x{n}",
            a.shape()
        )));
    }
    let rank = numerical_rank(x);
    if rank < x.ncols() {
        return Err(Error::Validation(format!(
            "rank-deficient design: rank {rank} < {} columns",
            x.ncols()
        )));
    }
    let max = n - rank;
    if r > max || r == 0 {
        return Err(Error::RankTooLarge { requested: r, max });
    }
    let u = complement_basis(x);
    let reduced = symmetrize(&(u.transpose() * a * &u));
    let eig = reduced.symmetric_eigen();
    let lifted = &u * &eig.eigenvectors;
    let ordered = order_eigenpairs(&eig.eigenvalues, &lifted);
    Ok((
        ordered.vectors.columns(0, r).into_owned(),
        ordered.values.rows(0, r).into_owned(),
    ))
}

/// Propagator eigendecomposition: vectors as columns, eigenvalues non-increasing.
fn propagator_eigen(s: &DMatrix<f64>, x: &DMatrix<f64>, mode: PropagatorMode) -> Result<linalg::OrderedEigen> {
    if s.nrows() != x.nrows() {
        return Err(Error::Dimension(format!(
            "basis has {} rows but covariates have {}",
            s.nrows(),
            x.nrows()
        )));
    }
    let r = s.ncols();
    let psi = s.transpose() * x;
    let operator = match mode {
        PropagatorMode::Default => {
            let tol = PSI_TOLERANCE * x.norm().max(1.0);
            let projector = &psi * pseudo_inverse(&psi, tol);
            symmetrize(&(DMatrix::identity(r, r) - projector))
        }
        PropagatorMode::LiteralB => {
            let mut b = DMatrix::zeros(r, psi.ncols() + r);
            b.view_mut((0, 0), psi.shape()).copy_from(&psi);
            b.view_mut((0, psi.ncols()), (r, r)).fill_with_identity();
            let btb = b.transpose() * &b;
            let pinv = pseudo_inverse(&btb, linalg::default_pinv_tolerance(&btb));
            let mut g = symmetrize(&(DMatrix::identity(r, r) - &b * pinv * b.transpose()));
            if max_abs(&g) < PSI_TOLERANCE {
                log::warn!("literal-b propagator operator is the zero matrix; its eigenvectors are undetermined");
                g.fill(0.0);
            }
            g
        }
    };
    Ok(ordered_eigen(&operator))
}

/// MI propagator `M_t` (r x r) from the basis `S_t` and covariates `X_t`.
pub fn mi_propagator(s: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    mi_propagator_with(s, x, PropagatorMode::Default)
}

pub fn mi_propagator_with(s: &DMatrix<f64>, x: &DMatrix<f64>, mode: PropagatorMode) -> Result<DMatrix<f64>> {
    Ok(propagator_eigen(s, x, mode)?.vectors)
}

/// Basis quantities for one time point.
#[derive(Debug, Clone)]
pub struct BasisSlice {
    pub time: usize,
    /// `S_t`, N_t x r with orthonormal columns.
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    /// `M_t` for `t >= 2`.
    pub propagator: Option<DMatrix<f64>>,
    pub propagator_eigenvalues: Option<DVector<f64>>,
}

/// Per-time MI bases and propagators.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    slices: Vec<BasisSlice>,
    rank: usize,
    mode: PropagatorMode,
    links: VariableLinks,
}

impl BasisSystem {
    pub fn build(
        design: &DesignMatrices,
        graph: &ArealGraph,
        rank: usize,
        mode: PropagatorMode,
        links: VariableLinks,
    ) -> Result<Self> {
        let mut slices = Vec::with_capacity(design.horizon());
        for slice in design.slices() {
            let a = graph.location_adjacency(&slice.locations, links);
            let (basis, eigenvalues) = mi_basis(&slice.x, &a, rank).map_err(|e| match e {
                Error::RankTooLarge { requested, max } => Error::Validation(format!(
                    "time {}: requested rank {requested} exceeds maximum admissible rank {max}",
                    slice.time
                )),
                other => other,
            })?;
            let (propagator, propagator_eigenvalues) = if slice.time >= 2 {
                let eig = propagator_eigen(&basis, &slice.x, mode)?;
                let radius = eig
                    .vectors
                    .complex_eigenvalues()
                    .iter()
                    .map(|c| c.norm())
                    .fold(0.0_f64, f64::max);
                if radius > 1.0 + 1e-8 {
                    log::warn!("propagator at time {} has spectral radius {radius:.6} > 1", slice.time);
                }
                (Some(eig.vectors), Some(eig.values))
            } else {
                (None, None)
            };
            slices.push(BasisSlice {
                time: slice.time,
                basis,
                eigenvalues,
                propagator,
                propagator_eigenvalues,
            });
        }
        Ok(Self {
            slices,
            rank,
            mode,
            links,
        })
    }

    pub fn slices(&self) -> &[BasisSlice] {
        &self.slices
    }

    pub fn slice(&self, t: usize) -> &BasisSlice {
        &self.slices[t - 1]
    }

    /// `S_t` for 1-based `t`.
    pub fn basis(&self, t: usize) -> &DMatrix<f64> {
        &self.slices[t - 1].basis
    }

    /// `M_t` for `t >= 2`.
    pub fn propagator(&self, t: usize) -> &DMatrix<f64> {
        self.slices[t - 1]
            .propagator
            .as_ref()
            .expect("propagators exist for t >= 2")
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn horizon(&self) -> usize {
        self.slices.len()
    }

    pub fn mode(&self) -> PropagatorMode {
        self.mode
    }

    pub fn links(&self) -> VariableLinks {
        self.links
    }

    /// Confounding diagnostics against the given covariates.
    pub fn confounding_report(&self, design: &DesignMatrices) -> Result<ConfoundingReport> {
        if design.horizon() != self.horizon() {
            return Err(Error::Dimension("design and basis cover different horizons".into()));
        }
        let mut report = ConfoundingReport::default();
        for (b, d) in self.slices.iter().zip(design.slices()) {
            if d.x.nrows() != b.basis.nrows() {
                return Err(Error::Dimension(format!(
                    "time {}: design rows differ from basis rows",
                    b.time
                )));
            }
            let psi = b.basis.transpose() * &d.x;
            report.basis_sup = report.basis_sup.max(max_abs(&psi));
            if let (Some(m), Some(values)) = (&b.propagator, &b.propagator_eigenvalues) {
                for (j, &lambda) in values.iter().enumerate() {
                    if lambda > 0.5 {
                        let col = m.column(j);
                        let proj = col.transpose() * &psi;
                        report.propagator_sup = report.propagator_sup.max(proj.amax());
                    }
                }
            }
        }
        Ok(report)
    }
}

/// Sup-norms of `S_t'X_t` and of the eigenvalue-1 propagator columns against `Ψ_t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingReport {
    pub basis_sup: f64,
    pub propagator_sup: f64,
}
