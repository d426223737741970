//! Conjugate full conditionals for `ξ_t`, `β_t`, `σ_K²` and `σ_{ξ,t}²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{sample_mvn, symmetrize};
use crate::{Error, Result};

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Prior mean of `β_t`; empty means zero.
    pub mu_beta: Vec<f64>,
    pub sigma_beta2: f64,
    pub alpha_xi: f64,
    pub beta_xi: f64,
    pub alpha_k: f64,
    pub beta_k: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            mu_beta: Vec::new(),
            sigma_beta2: 1e15,
            alpha_xi: 2.0,
            beta_xi: 1.0,
            alpha_k: 2.0,
            beta_k: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, covariates: usize) -> Result<()> {
        let positive = [
            ("sigma_beta2", self.sigma_beta2),
            ("alpha_xi", self.alpha_xi),
            ("beta_xi", self.beta_xi),
            ("alpha_k", self.alpha_k),
            ("beta_k", self.beta_k),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Config(format!(
                    "hyperparameter {name} must be positive and finite, got {value}"
                )));
            }
        }
        if !self.mu_beta.is_empty() && self.mu_beta.len() != covariates {
            return Err(Error::Config(format!(
                "mu_beta has {} entries but the design has {covariates} covariates",
                self.mu_beta.len()
            )));
        }
        if self.mu_beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mu_beta must be finite".into()));
        }
        Ok(())
    }

    /// `μ_β` as a p-vector.
    pub fn mu_beta_vector(&self, covariates: usize) -> DVector<f64> {
        if self.mu_beta.is_empty() {
            DVector::zeros(covariates)
        } else {
            DVector::from_column_slice(&self.mu_beta)
        }
    }
}

/// Shape and rate of an inverse-gamma law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
            return Err(Error::NonFinite(format!("inverse gamma parameters ({shape}, {rate})")));
        }
        Ok(Self { shape, rate })
    }

    /// Mean, finite for shape > 1.
    pub fn mean(&self) -> f64 {
        self.rate / (self.shape - 1.0)
    }

    /// Variance, finite for shape > 2.
    pub fn variance(&self) -> f64 {
        self.rate * self.rate / ((self.shape - 1.0).powi(2) * (self.shape - 2.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let gamma = Gamma::new(self.shape, 1.0 / self.rate).expect("validated parameters");
        1.0 / gamma.sample(rng)
    }
}

/// Diagonal Gaussian conditional of `ξ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl DiagonalGaussian {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.mean.len(),
            self.mean.iter().zip(self.variance.iter()).map(|(m, v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            }),
        )
    }
}

/// `ξ_t | ·` given the residual `z_t − X_tβ_t − S_tη_t` and measurement precisions `1/v`.
///
/// `Σ* = (V⁻¹ + σ⁻² I)⁻¹`, `μ* = Σ* V⁻¹ resid`, elementwise.
pub fn xi_conditional(residual: &DVector<f64>, precision: &DVector<f64>, sigma_xi2: f64) -> DiagonalGaussian {
    let n = residual.len();
    if sigma_xi2 <= 0.0 {
        return DiagonalGaussian {
            mean: DVector::zeros(n),
            variance: DVector::zeros(n),
        };
    }
    let prior_precision = 1.0 / sigma_xi2;
    let variance = precision.map(|w| 1.0 / (w + prior_precision));
    let mean = DVector::from_iterator(n, (0..n).map(|i| variance[i] * precision[i] * residual[i]));
    DiagonalGaussian { mean, variance }
}

/// Draws `ξ_t` from its full conditional; `v` holds the diagonal of `V_t`.
#[allow(clippy::too_many_arguments)]
pub fn sample_xi<R: Rng + ?Sized>(
    z: &DVector<f64>,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    s: &DMatrix<f64>,
    eta: &DVector<f64>,
    v: &DVector<f64>,
    sigma_xi2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_rows(z.len(), &[("X", x.nrows()), ("S", s.nrows()), ("V", v.len())])?;
    let residual = z - x * beta - s * eta;
    Ok(xi_conditional(&residual, &v.map(|v| 1.0 / v), sigma_xi2).sample(rng))
}

/// Gaussian conditional of `β_t`.
#[derive(Debug, Clone)]
pub struct BetaConditional {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Precision of the `β_t` conditional, `X'V⁻¹X + σ_β⁻² I`.
pub fn beta_precision(x: &DMatrix<f64>, precision: &DVector<f64>, sigma_beta2: f64) -> DMatrix<f64> {
    let p = x.ncols();
    let mut weighted = x.clone();
    for (mut row, w) in weighted.row_iter_mut().zip(precision.iter()) {
        row *= *w;
    }
    symmetrize(&(x.transpose() * weighted + DMatrix::identity(p, p) / sigma_beta2))
}

/// `β_t | ·` given the residual `z_t − ξ_t − S_tη_t`.
///
/// `Σ*_β = (X'V⁻¹X + σ_β⁻² I)⁻¹`, `μ*_β = Σ*_β (X'V⁻¹ resid + μ_β/σ_β²)`.
pub fn beta_conditional(
    x: &DMatrix<f64>,
    residual: &DVector<f64>,
    precision: &DVector<f64>,
    mu_beta: &DVector<f64>,
    sigma_beta2: f64,
) -> Result<BetaConditional> {
    let prec = beta_precision(x, precision, sigma_beta2);
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::Singular("β full-conditional precision".into()))?;
    let score = x.transpose() * residual.component_mul(precision) + mu_beta / sigma_beta2;
    let p = x.ncols();
    Ok(BetaConditional {
        mean: chol.solve(&score),
        covariance: symmetrize(&chol.solve(&DMatrix::identity(p, p))),
    })
}

/// Draws `β_t` from its full conditional; `v` holds the diagonal of `V_t`.
#[allow(clippy::too_many_arguments)]
pub fn sample_beta<R: Rng + ?Sized>(
    z: &DVector<f64>,
    x: &DMatrix<f64>,
    xi: &DVector<f64>,
    s: &DMatrix<f64>,
    eta: &DVector<f64>,
    v: &DVector<f64>,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_rows(
        z.len(),
        &[("X", x.nrows()), ("ξ", xi.len()), ("S", s.nrows()), ("V", v.len())],
    )?;
    let residual = z - xi - s * eta;
    let cond = beta_conditional(
        x,
        &residual,
        &v.map(|v| 1.0 / v),
        &hyper.mu_beta_vector(x.ncols()),
        hyper.sigma_beta2,
    )?;
    Ok(sample_mvn(&cond.mean, &cond.covariance, rng))
}

/// `IG(Tr/2 + α_K, β_K + η_1'K⁻¹η_1/2 + Σ_t (η_t − M_tη_{t−1})'W_t⁻¹(η_t − M_tη_{t−1})/2)`.
///
/// `transitions` and `innovation_inverses` are indexed `t − 2` for `t = 2..T`.
pub fn sigma_k_conditional(
    eta: &[DVector<f64>],
    initial_inverse: &DMatrix<f64>,
    innovation_inverses: &[DMatrix<f64>],
    transitions: &[DMatrix<f64>],
    hyper: &Hyperparams,
) -> Result<InverseGamma> {
    let horizon = eta.len();
    if horizon == 0 || innovation_inverses.len() + 1 != horizon || transitions.len() + 1 != horizon {
        return Err(Error::Dimension(
            "σ_K² conditional needs T states and T − 1 transitions".into(),
        ));
    }
    let r = eta[0].len();
    let mut quad = eta[0].dot(&(initial_inverse * &eta[0]));
    for t in 1..horizon {
        let u = &eta[t] - &transitions[t - 1] * &eta[t - 1];
        quad += u.dot(&(&innovation_inverses[t - 1] * &u));
    }
    InverseGamma::new((horizon * r) as f64 / 2.0 + hyper.alpha_k, hyper.beta_k + quad / 2.0)
}

pub fn sample_sigma_k<R: Rng + ?Sized>(
    eta: &[DVector<f64>],
    initial_inverse: &DMatrix<f64>,
    innovation_inverses: &[DMatrix<f64>],
    transitions: &[DMatrix<f64>],
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    Ok(sigma_k_conditional(eta, initial_inverse, innovation_inverses, transitions, hyper)?.sample(rng))
}

/// `IG(n_t/2 + α_ξ, β_ξ + ξ_t'ξ_t/2)` with `n_t = len(ξ_t)`.
pub fn sigma_xi_conditional(xi: &DVector<f64>, hyper: &Hyperparams) -> Result<InverseGamma> {
    InverseGamma::new(
        xi.len() as f64 / 2.0 + hyper.alpha_xi,
        hyper.beta_xi + xi.norm_squared() / 2.0,
    )
}

pub fn sample_sigma_xi<R: Rng + ?Sized>(xi: &DVector<f64>, hyper: &Hyperparams, rng: &mut R) -> Result<f64> {
    Ok(sigma_xi_conditional(xi, hyper)?.sample(rng))
}

fn check_rows(n: usize, others: &[(&str, usize)]) -> Result<()> {
    for (name, rows) in others {
        if *rows != n {
            return Err(Error::Dimension(format!("z has {n} entries but {name} has {rows}")));
        }
    }
    Ok(())
}
