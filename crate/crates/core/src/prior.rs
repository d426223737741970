//! Frobenius-nearest prior covariances for the reduced-rank random effects.
//!
//! `K*_t = {A⁺(S_t' P_t S_t)}⁻¹` is the minimizer of `‖P_t - S_t C⁻¹ S_t'‖_F`
//! over positive definite `C`, where `A⁺` is the best positive approximant and
//! `P_t` a target precision (the CAR precision `D_t - A_t` by default).
//! `W*_t = K*_t - M_t K*_{t-1} M_t'` follows from the VAR(1) dynamics and is
//! lifted to the PSD cone when it comes out indefinite.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::data::{ArealGraph, DesignMatrices};
use crate::linalg::{clip_to_psd, min_eigenvalue, spd_inverse, symmetrize};
use crate::{Error, Result};

/// Eigenvalues below this are genuine indefiniteness rather than rounding noise.
pub const LIFT_THRESHOLD: f64 = -1e-10;
/// Default relative regularization: `ε = 1e-8 · trace / r`.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Which minimizer defines `K*_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorForm {
    /// `K* = {A⁺(S'PS)}⁻¹`, the inverted parameterization.
    #[default]
    Inverted,
    /// `K* = A⁺(S'PS)`, the non-inverted minimizer, kept for comparison.
    Direct,
}

/// CAR precision `Q = D - A` with `D` the diagonal of row sums.
pub fn car_precision(adjacency: &DMatrix<f64>) -> DMatrix<f64> {
    let n = adjacency.nrows();
    let mut q = -adjacency.clone();
    for i in 0..n {
        q[(i, i)] += adjacency.row(i).sum();
    }
    q
}

/// Frobenius-nearest symmetric PSD matrix to `R`: symmetrize, clip negative eigenvalues.
pub fn best_positive_approximant(r: &DMatrix<f64>) -> DMatrix<f64> {
    clip_to_psd(r)
}

/// `‖P - S C⁻¹ S'‖_F²` when `inverted`, else `‖P - S C S'‖_F²`.
pub fn frobenius_objective(p: &DMatrix<f64>, s: &DMatrix<f64>, c: &DMatrix<f64>, inverted: bool) -> Result<f64> {
    let inner = if inverted {
        c.clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("C is not invertible".into()))?
    } else {
        c.clone()
    };
    Ok((p - s * inner * s.transpose()).norm_squared())
}

/// Summed objective `Σ_k ‖P_k - S_k C⁻¹ S_k'‖_F²` (or the non-inverted form).
pub fn frobenius_objective_sum(
    targets: &[DMatrix<f64>],
    bases: &[DMatrix<f64>],
    c: &DMatrix<f64>,
    inverted: bool,
) -> Result<f64> {
    targets
        .iter()
        .zip(bases)
        .map(|(p, s)| frobenius_objective(p, s, c, inverted))
        .sum()
}

/// What happened to one prior matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LiftKind {
    /// An indefinite matrix was replaced by its best positive approximant.
    PsdLift,
    /// A singular matrix received `ε I` before inversion.
    Regularization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMatrix {
    K,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftRecord {
    pub matrix: PriorMatrix,
    /// 1-based time; 0 for the pooled `K*`.
    pub time: usize,
    pub kind: LiftKind,
    pub min_eigenvalue_before: f64,
    pub epsilon: f64,
}

fn regularization(m: &DMatrix<f64>, epsilon: f64) -> f64 {
    let r = m.nrows().max(1) as f64;
    let scale = m.trace() / r;
    epsilon * if scale > 0.0 { scale } else { 1.0 }
}

/// Whether a symmetric PSD matrix is numerically singular.
fn is_singular(m: &DMatrix<f64>) -> bool {
    let values = symmetrize(m).symmetric_eigenvalues();
    let lambda_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = values.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    lambda_max == 0.0 || lambda_min <= lambda_max * m.nrows() as f64 * f64::EPSILON * 16.0
}

fn projected_mean(bases: &[&DMatrix<f64>], targets: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let r = bases
        .first()
        .map(|s| s.ncols())
        .ok_or_else(|| Error::Dimension("at least one basis is required".into()))?;
    if bases.len() != targets.len() {
        return Err(Error::Dimension("one target precision per basis is required".into()));
    }
    let mut sum = DMatrix::zeros(r, r);
    for (s, p) in bases.iter().zip(targets) {
        if s.ncols() != r {
            return Err(Error::Dimension(format!("basis ranks differ: {} vs {r}", s.ncols())));
        }
        if p.shape() != (s.nrows(), s.nrows()) {
            return Err(Error::Dimension(
                "target precision does not match the basis rows".into(),
            ));
        }
        sum += s.transpose() * *p * *s;
    }
    Ok(sum / bases.len() as f64)
}

/// Output of [`kstar`]: the matrix and the regularization applied, if any.
#[derive(Debug, Clone)]
pub struct KStar {
    pub matrix: DMatrix<f64>,
    /// `(min eigenvalue of the approximant, ε)` when `ε I` had to be added.
    pub regularized: Option<(f64, f64)>,
}

fn kstar_from_mean(mean: &DMatrix<f64>, epsilon: f64, form: PriorForm) -> Result<KStar> {
    let approx = best_positive_approximant(mean);
    match form {
        PriorForm::Inverted => {
            if !is_singular(&approx) {
                if let Some(inv) = spd_inverse(&approx) {
                    return Ok(KStar {
                        matrix: inv,
                        regularized: None,
                    });
                }
            }
            let eps = regularization(&approx, epsilon);
            let before = min_eigenvalue(&approx);
            let shifted = &approx + DMatrix::identity(approx.nrows(), approx.nrows()) * eps;
            let inv = spd_inverse(&shifted)
                .ok_or_else(|| Error::Singular("regularized approximant is not invertible".into()))?;
            Ok(KStar {
                matrix: inv,
                regularized: Some((before, eps)),
            })
        }
        PriorForm::Direct => Ok(KStar {
            matrix: approx,
            regularized: None,
        }),
    }
}

/// Per-time `K*_t = {A⁺(S_t' P_t S_t) + εI}⁻¹`, with `ε > 0` only when the approximant is singular.
pub fn kstar(s: &DMatrix<f64>, p: &DMatrix<f64>, epsilon: f64) -> Result<KStar> {
    kstar_with(s, p, epsilon, PriorForm::Inverted)
}

pub fn kstar_with(s: &DMatrix<f64>, p: &DMatrix<f64>, epsilon: f64, form: PriorForm) -> Result<KStar> {
    kstar_from_mean(&projected_mean(&[s], &[p])?, epsilon, form)
}

/// Pooled `K* = {A⁺((1/T) Σ_t S_t' P_t S_t) + εI}⁻¹`.
pub fn kstar_pooled(bases: &[DMatrix<f64>], targets: &[DMatrix<f64>], epsilon: f64) -> Result<KStar> {
    kstar_pooled_with(bases, targets, epsilon, PriorForm::Inverted)
}

pub fn kstar_pooled_with(
    bases: &[DMatrix<f64>],
    targets: &[DMatrix<f64>],
    epsilon: f64,
    form: PriorForm,
) -> Result<KStar> {
    let bases: Vec<&DMatrix<f64>> = bases.iter().collect();
    let targets: Vec<&DMatrix<f64>> = targets.iter().collect();
    kstar_from_mean(&projected_mean(&bases, &targets)?, epsilon, form)
}

/// Output of [`wstar`]: the PSD matrix and the minimum eigenvalue of the raw
/// difference when a lift was needed.
#[derive(Debug, Clone)]
pub struct WStar {
    pub matrix: DMatrix<f64>,
    pub lifted_from: Option<f64>,
}

/// `W*_t = K*_t - M_t K*_{t-1} M_t'`, lifted to the PSD cone when indefinite.
pub fn wstar(k_t: &DMatrix<f64>, k_prev: &DMatrix<f64>, m_t: &DMatrix<f64>) -> Result<WStar> {
    let r = k_t.nrows();
    if k_t.shape() != (r, r) || k_prev.shape() != (r, r) || m_t.shape() != (r, r) {
        return Err(Error::Dimension("W* inputs must all be r x r".into()));
    }
    let raw = symmetrize(&(k_t - m_t * k_prev * m_t.transpose()));
    let lambda_min = min_eigenvalue(&raw);
    if lambda_min < LIFT_THRESHOLD {
        Ok(WStar {
            matrix: best_positive_approximant(&raw),
            lifted_from: Some(lambda_min),
        })
    } else {
        Ok(WStar {
            matrix: raw,
            lifted_from: None,
        })
    }
}

/// Configuration of the prior construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOptions {
    pub form: PriorForm,
    pub pooled: bool,
    pub epsilon: f64,
}

impl Default for PriorOptions {
    fn default() -> Self {
        Self {
            form: PriorForm::Inverted,
            pooled: false,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// `K*_t`, `W*_t` and the record of lifts and regularizations.
#[derive(Debug, Clone)]
pub struct PriorStructure {
    k_star: Vec<DMatrix<f64>>,
    w_star: Vec<Option<DMatrix<f64>>>,
    lift_log: Vec<LiftRecord>,
    options: PriorOptions,
}

impl PriorStructure {
    /// Builds the prior with the CAR target precisions `P_t = D_t - A_t`.
    pub fn build(
        basis: &BasisSystem,
        design: &DesignMatrices,
        graph: &ArealGraph,
        options: PriorOptions,
    ) -> Result<Self> {
        let targets: Vec<DMatrix<f64>> = design
            .slices()
            .iter()
            .map(|s| car_precision(&graph.location_adjacency(&s.locations, basis.links())))
            .collect();
        Self::from_targets(basis, &targets, options)
    }

    /// Builds the prior from arbitrary target precisions, one per time point.
    pub fn from_targets(basis: &BasisSystem, targets: &[DMatrix<f64>], options: PriorOptions) -> Result<Self> {
        let bases: Vec<DMatrix<f64>> = basis.slices().iter().map(|s| s.basis.clone()).collect();
        let propagators: Vec<DMatrix<f64>> = (2..=basis.horizon()).map(|t| basis.propagator(t).clone()).collect();
        Self::from_parts(&bases, &propagators, targets, options)
    }

    /// Builds the prior from explicit bases `S_1..S_T`, propagators `M_2..M_T`
    /// and target precisions `P_1..P_T`.
    pub fn from_parts(
        bases: &[DMatrix<f64>],
        propagators: &[DMatrix<f64>],
        targets: &[DMatrix<f64>],
        options: PriorOptions,
    ) -> Result<Self> {
        let horizon = bases.len();
        if targets.len() != horizon || propagators.len() + 1 != horizon.max(1) {
            return Err(Error::Dimension(format!(
                "{} bases, {} propagators and {} target precisions do not line up",
                horizon,
                propagators.len(),
                targets.len()
            )));
        }
        let mut lift_log = Vec::new();
        let mut k_star = Vec::with_capacity(horizon);
        if options.pooled {
            let k = kstar_pooled_with(bases, targets, options.epsilon, options.form)?;
            if let Some((before, eps)) = k.regularized {
                lift_log.push(LiftRecord {
                    matrix: PriorMatrix::K,
                    time: 0,
                    kind: LiftKind::Regularization,
                    min_eigenvalue_before: before,
                    epsilon: eps,
                });
            }
            k_star = vec![k.matrix; horizon];
        } else {
            for (t, (s, target)) in (1..=horizon).zip(bases.iter().zip(targets)) {
                let k = kstar_with(s, target, options.epsilon, options.form)?;
                if let Some((before, eps)) = k.regularized {
                    lift_log.push(LiftRecord {
                        matrix: PriorMatrix::K,
                        time: t,
                        kind: LiftKind::Regularization,
                        min_eigenvalue_before: before,
                        epsilon: eps,
                    });
                }
                k_star.push(k.matrix);
            }
        }

        let mut w_star = vec![None];
        for t in 2..=horizon {
            let w = wstar(&k_star[t - 1], &k_star[t - 2], &propagators[t - 2])?;
            if let Some(before) = w.lifted_from {
                log::info!("W*_{t} was indefinite (min eigenvalue {before:.3e}); lifted to the PSD cone");
                lift_log.push(LiftRecord {
                    matrix: PriorMatrix::W,
                    time: t,
                    kind: LiftKind::PsdLift,
                    min_eigenvalue_before: before,
                    epsilon: 0.0,
                });
            }
            w_star.push(Some(w.matrix));
        }

        Ok(Self {
            k_star,
            w_star,
            lift_log,
            options,
        })
    }

    pub fn horizon(&self) -> usize {
        self.k_star.len()
    }

    pub fn rank(&self) -> usize {
        self.k_star.first().map_or(0, |k| k.nrows())
    }

    /// `K*_t` for 1-based `t`.
    pub fn k_star(&self, t: usize) -> &DMatrix<f64> {
        &self.k_star[t - 1]
    }

    /// `W*_t` for `t >= 2`.
    pub fn w_star(&self, t: usize) -> &DMatrix<f64> {
        self.w_star[t - 1].as_ref().expect("W* exists for t >= 2")
    }

    pub fn lift_log(&self) -> &[LiftRecord] {
        &self.lift_log
    }

    pub fn options(&self) -> PriorOptions {
        self.options
    }

    /// Scale matrices used by the sampler and the simulator: `K*_1` and `W*_t`,
    /// each with `ε I` added when singular, together with their inverses.
    ///
    /// Both the FFBS recursion and the `σ_K²` full conditional use these same
    /// matrices, so the sampled model is the one whose density is evaluated.
    pub fn sampler_scales(&self) -> Result<SamplerScales> {
        let eps = self.options.epsilon;
        let mut regularizations = Vec::new();
        let mut prepare = |m: &DMatrix<f64>, matrix: PriorMatrix, t: usize| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let sym = symmetrize(m);
            if !is_singular(&sym) {
                if let Some(inv) = spd_inverse(&sym) {
                    return Ok((sym, inv));
                }
            }
            let e = regularization(&sym, eps);
            let before = min_eigenvalue(&sym);
            let shifted = &sym + DMatrix::identity(sym.nrows(), sym.nrows()) * e;
            let inv = spd_inverse(&shifted)
                .ok_or_else(|| Error::Singular(format!("{matrix:?}*_{t} is not invertible after regularization")))?;
            regularizations.push(LiftRecord {
                matrix,
                time: t,
                kind: LiftKind::Regularization,
                min_eigenvalue_before: before,
                epsilon: e,
            });
            Ok((shifted, inv))
        };
        let (initial, initial_inverse) = prepare(&self.k_star[0], PriorMatrix::K, 1)?;
        let mut innovation = vec![DMatrix::zeros(0, 0)];
        let mut innovation_inverse = vec![DMatrix::zeros(0, 0)];
        for t in 2..=self.horizon() {
            let (w, w_inv) = prepare(self.w_star(t), PriorMatrix::W, t)?;
            innovation.push(w);
            innovation_inverse.push(w_inv);
        }
        Ok(SamplerScales {
            initial,
            initial_inverse,
            innovation,
            innovation_inverse,
            regularizations,
        })
    }
}

/// Invertible scale matrices consumed by the sampler (see [`PriorStructure::sampler_scales`]).
#[derive(Debug, Clone)]
pub struct SamplerScales {
    pub initial: DMatrix<f64>,
    pub initial_inverse: DMatrix<f64>,
    /// Index `t - 1`; entry 0 is an empty placeholder.
    pub innovation: Vec<DMatrix<f64>>,
    pub innovation_inverse: Vec<DMatrix<f64>>,
    pub regularizations: Vec<LiftRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn cycle4() -> DMatrix<f64> {
        ArealGraph::with_edges(["a", "b", "c", "d"], [(0, 1), (1, 2), (2, 3), (3, 0)])
            .unwrap()
            .adjacency()
    }

    fn orthonormal(n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        m.symmetric_eigen().eigenvectors
    }

    #[test]
    fn car_two_units() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(
            car_precision(&a),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
        assert_eq!(car_precision(&DMatrix::zeros(3, 3)), DMatrix::zeros(3, 3));
    }

    #[test]
    fn car_four_cycle_spectrum() {
        let q = car_precision(&cycle4());
        let mut values: Vec<f64> = q.symmetric_eigenvalues().iter().copied().collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (v, e) in values.iter().zip([0.0, 2.0, 2.0, 4.0]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
        assert_eq!(q * DVector::from_element(4, 1.0), DVector::zeros(4));
    }

    #[test]
    fn approximant_cases() {
        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_abs_diff_eq!(best_positive_approximant(&psd), psd, epsilon = 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        assert_abs_diff_eq!(
            best_positive_approximant(&d),
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0])),
            epsilon = 1e-12
        );
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert_abs_diff_eq!(
            best_positive_approximant(&r),
            DMatrix::from_element(2, 2, 1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn objective_by_hand() {
        let s = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let c = DMatrix::from_element(1, 1, 1.0);
        let v = frobenius_objective(&DMatrix::identity(2, 2), &s, &c, true).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);

        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let p = &s * s.transpose();
        assert_abs_diff_eq!(
            frobenius_objective(&p, &s, &DMatrix::identity(2, 2), true).unwrap(),
            0.0
        );
        assert!(frobenius_objective(&p, &s, &DMatrix::zeros(2, 2), true).is_err());
    }

    #[test]
    fn complete_basis_is_exact() {
        let q = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -0.5, 0.0, -0.5, 1.5]);
        let s = orthonormal(3);
        let k = kstar(&s, &q, DEFAULT_EPSILON).unwrap();
        assert!(k.regularized.is_none());
        let expected = (s.transpose() * &q * &s).try_inverse().unwrap();
        assert_abs_diff_eq!(k.matrix, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(
            frobenius_objective(&q, &s, &k.matrix, true).unwrap(),
            0.0,
            epsilon = 1e-20
        );
    }

    #[test]
    fn pooled_reduces_to_single() {
        let q = car_precision(&cycle4()) + DMatrix::identity(4, 4);
        let s = orthonormal(4).columns(0, 2).into_owned();
        let single = kstar(&s, &q, DEFAULT_EPSILON).unwrap().matrix;
        let pooled = kstar_pooled(std::slice::from_ref(&s), std::slice::from_ref(&q), DEFAULT_EPSILON)
            .unwrap()
            .matrix;
        assert_eq!(single, pooled);
        let twice = kstar_pooled(&[s.clone(), s.clone()], &[q.clone(), q.clone()], DEFAULT_EPSILON)
            .unwrap()
            .matrix;
        assert_abs_diff_eq!(single, twice, epsilon = 1e-14);
        let other = orthonormal(4).columns(0, 3).into_owned();
        assert!(kstar_pooled(&[s, other], &[q.clone(), q], DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn singular_approximant_is_regularized() {
        let s = DMatrix::identity(2, 2);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0]));
        let k = kstar(&s, &p, DEFAULT_EPSILON).unwrap();
        let (before, eps) = k.regularized.expect("regularized");
        assert_abs_diff_eq!(before, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eps, 0.5e-8, epsilon = 1e-20);
        assert!(k.matrix.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wstar_cases() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let w = wstar(&k, &k, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(w.matrix, k);
        assert!(w.lifted_from.is_none());

        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let i = DMatrix::identity(2, 2);
        let w = wstar(&i, &i, &rot).unwrap();
        assert_abs_diff_eq!(w.matrix, DMatrix::zeros(2, 2), epsilon = 1e-15);
        assert!(w.lifted_from.is_none());

        let w = wstar(&i, &(&i * 2.0), &i).unwrap();
        assert_abs_diff_eq!(w.matrix, DMatrix::zeros(2, 2), epsilon = 1e-15);
        assert_abs_diff_eq!(w.lifted_from.unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn structure_logs_exactly_the_indefinite_step() {
        let i = DMatrix::identity(2, 2);
        let bases = vec![i.clone(), i.clone(), i.clone()];
        let targets = vec![i.clone(), &i * 0.5, &i * 0.25];
        // K*_t = I, 2I, 4I with identity propagators: W* = I and 2I, no lift.
        let prior =
            PriorStructure::from_parts(&bases, &[i.clone(), i.clone()], &targets, PriorOptions::default()).unwrap();
        assert!(prior.lift_log().is_empty());
        // Reversed targets shrink K*, so both W* steps are indefinite.
        let targets = vec![&i * 0.25, &i * 0.5, i.clone()];
        let prior =
            PriorStructure::from_parts(&bases, &[i.clone(), i.clone()], &targets, PriorOptions::default()).unwrap();
        assert_eq!(prior.lift_log().len(), 2);
        assert!(prior.lift_log().iter().all(|l| l.kind == LiftKind::PsdLift));
        let scales = prior.sampler_scales().unwrap();
        assert_eq!(scales.regularizations.len(), 2);
    }
}
