//! Forward simulation from the model, used to produce synthetic truth.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::data::{ArealGraph, DesignMatrices, Location, Observation, ObservationSet, StudyDesign};
use crate::linalg::sample_mvn;
use crate::prior::PriorStructure;
use crate::{Error, Result};

/// Generating parameters. Vectors of length one are reused for every time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthParams {
    /// `β_t` per time (or one vector for all).
    pub beta: Vec<Vec<f64>>,
    pub sigma_k2: f64,
    /// `σ_{ξ,t}²` per time (or one value for all).
    pub sigma_xi2: Vec<f64>,
}

impl TruthParams {
    fn beta_at(&self, t: usize) -> &[f64] {
        if self.beta.len() == 1 {
            &self.beta[0]
        } else {
            &self.beta[t - 1]
        }
    }

    fn sigma_xi2_at(&self, t: usize) -> f64 {
        if self.sigma_xi2.len() == 1 {
            self.sigma_xi2[0]
        } else {
            self.sigma_xi2[t - 1]
        }
    }

    fn validate(&self, horizon: usize, covariates: usize) -> Result<()> {
        if self.beta.len() != 1 && self.beta.len() != horizon {
            return Err(Error::Config(format!(
                "truth beta needs 1 or {horizon} vectors, got {}",
                self.beta.len()
            )));
        }
        if self.beta.iter().any(|b| b.len() != covariates) {
            return Err(Error::Config(format!(
                "every truth beta vector needs {covariates} entries"
            )));
        }
        if self.sigma_xi2.len() != 1 && self.sigma_xi2.len() != horizon {
            return Err(Error::Config(format!("truth sigma_xi2 needs 1 or {horizon} values")));
        }
        if !(self.sigma_k2 >= 0.0) || self.sigma_xi2.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("truth variances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Measurement-error variance `v = base[ℓ] · survey_scale[m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceSchedule {
    /// Per variable, or one value for all.
    pub base: Vec<f64>,
    /// One entry per survey; every survey observes every unmasked location.
    #[serde(default = "one_survey")]
    pub survey_scale: Vec<f64>,
}

fn one_survey() -> Vec<f64> {
    vec![1.0]
}

impl VarianceSchedule {
    pub fn uniform(v: f64) -> Self {
        Self {
            base: vec![v],
            survey_scale: one_survey(),
        }
    }

    pub fn variance(&self, variable: usize, survey: usize) -> f64 {
        let base = if self.base.len() == 1 {
            self.base[0]
        } else {
            self.base[variable - 1]
        };
        base * self.survey_scale[survey - 1]
    }

    fn validate(&self, variables: usize) -> Result<()> {
        if self.base.len() != 1 && self.base.len() != variables {
            return Err(Error::Config(format!("variance base needs 1 or {variables} values")));
        }
        if self.survey_scale.is_empty() {
            return Err(Error::Config("at least one survey is required".into()));
        }
        if self
            .base
            .iter()
            .chain(&self.survey_scale)
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::Config("variances must be nonnegative and finite".into()));
        }
        Ok(())
    }
}

/// Locations `(variable, time, unit index)` that no survey observes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingMask {
    pub missing: BTreeSet<(usize, usize, usize)>,
}

impl MissingMask {
    pub fn contains(&self, variable: usize, time: usize, unit: usize) -> bool {
        self.missing.contains(&(variable, time, unit))
    }

    /// Masks one unit for every variable and time point.
    pub fn unit(design: &DesignMatrices, unit: usize) -> Self {
        let mut missing = BTreeSet::new();
        for slice in design.slices() {
            for loc in slice.locations.iter().filter(|l| l.unit == unit) {
                missing.insert((loc.variable, slice.time, unit));
            }
        }
        Self { missing }
    }
}

/// A realization of the model together with its generating inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub seed: u64,
    pub params: TruthParams,
    pub eta: Vec<DVector<f64>>,
    /// `ξ_t` on all of `D_{P,t}`, in design row order.
    pub xi: Vec<DVector<f64>>,
    /// `Y_t` on all of `D_{P,t}`, in design row order.
    pub y: Vec<DVector<f64>>,
    /// Emitted survey estimates, on the modeling scale.
    pub observations: Vec<Observation>,
}

impl SyntheticTruth {
    /// The emitted observations as a validated set; fails when any `v` is zero.
    pub fn observation_set(&self, design: &StudyDesign, graph: &ArealGraph) -> Result<ObservationSet> {
        ObservationSet::new(self.observations.clone(), design, graph)
    }

    /// True `Y` at a location.
    pub fn y_at(&self, design: &DesignMatrices, time: usize, location: Location) -> Option<f64> {
        design.slice(time).row_of(location).map(|row| self.y[time - 1][row])
    }
}

/// Simulates `η`, `ξ`, `Y` and noisy survey estimates.
///
/// `η_1 ~ N(0, σ_K² K*_1)`, `η_t = M_t η_{t−1} + u_t` with `u_t ~ N(0, σ_K² W*_t)`,
/// `ξ_t ~ N(0, σ_{ξ,t}² I)`, `Y_t = X_tβ_t + S_tη_t + ξ_t` and `Z = Y + ε`, `ε ~ N(0, v)`.
/// The scale matrices are the ones the sampler uses. Random numbers are consumed
/// in a fixed order (η, then ξ, then ε by time, survey and design row).
pub fn simulate(
    design: &DesignMatrices,
    basis: &BasisSystem,
    prior: &PriorStructure,
    truth: &TruthParams,
    schedule: &VarianceSchedule,
    mask: &MissingMask,
    seed: u64,
) -> Result<SyntheticTruth> {
    let horizon = design.horizon();
    let variables = design
        .slices()
        .iter()
        .flat_map(|s| s.locations.iter().map(|l| l.variable))
        .max()
        .unwrap_or(1);
    truth.validate(horizon, design.covariates())?;
    schedule.validate(variables)?;
    if basis.horizon() != horizon || prior.horizon() != horizon {
        return Err(Error::Dimension(
            "design, basis and prior must cover the same time points".into(),
        ));
    }
    let scales = prior.sampler_scales()?;
    let r = basis.rank();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut eta: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    let initial: DMatrix<f64> = &scales.initial * truth.sigma_k2;
    eta.push(sample_mvn(&DVector::zeros(r), &initial, &mut rng));
    for t in 2..=horizon {
        let mean = basis.propagator(t) * &eta[t - 2];
        let cov: DMatrix<f64> = &scales.innovation[t - 1] * truth.sigma_k2;
        eta.push(sample_mvn(&mean, &cov, &mut rng));
    }

    let mut xi = Vec::with_capacity(horizon);
    let mut y = Vec::with_capacity(horizon);
    for slice in design.slices() {
        let t = slice.time;
        let sd = truth.sigma_xi2_at(t).sqrt();
        let xi_t = DVector::from_iterator(
            slice.len(),
            (0..slice.len()).map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)),
        );
        let beta = DVector::from_column_slice(truth.beta_at(t));
        y.push(&slice.x * beta + basis.basis(t) * &eta[t - 1] + &xi_t);
        xi.push(xi_t);
    }

    let mut observations = Vec::new();
    for slice in design.slices() {
        let t = slice.time;
        for survey in 1..=schedule.survey_scale.len() {
            for (row, loc) in slice.locations.iter().enumerate() {
                if mask.contains(loc.variable, t, loc.unit) {
                    continue;
                }
                let v = schedule.variance(loc.variable, survey);
                let e: f64 = StandardNormal.sample(&mut rng);
                observations.push(Observation {
                    variable: loc.variable,
                    time: t,
                    unit: loc.unit,
                    survey,
                    z: y[t - 1][row] + v.sqrt() * e,
                    v,
                });
            }
        }
    }

    Ok(SyntheticTruth {
        seed,
        params: truth.clone(),
        eta,
        xi,
        y,
        observations,
    })
}
