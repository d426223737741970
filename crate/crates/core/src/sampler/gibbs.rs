//! The Gibbs sweep: η by FFBS, then ξ_t, β_t, σ_K² and σ_{ξ,t}².

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conditionals::{sigma_k_conditional, sigma_xi_conditional, xi_conditional, Hyperparams};
use super::kalman::{backward_sample, filter_information, Measurement};
use super::model::{ChainLayout, ModelData};
use crate::basis::BasisSystem;
use crate::data::{DesignMatrices, ObservationSet};
use crate::linalg::{psd_factor, sample_mvn, standard_normal_vector, symmetrize, OpCounter, OpStats};
use crate::prior::{PriorStructure, SamplerScales};
use crate::{Error, Result};

/// Order in which blocks are updated within one iteration.
pub const SWEEP_ORDER: [&str; 5] = ["eta", "xi", "beta", "sigma_k2", "sigma_xi2"];

/// Iterations between sink flushes.
pub const FLUSH_EVERY: usize = 100;

/// One state of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub eta: Vec<DVector<f64>>,
    /// `ξ_t` at the observed locations of time `t`.
    pub xi: Vec<DVector<f64>>,
    pub beta: Vec<DVector<f64>>,
    pub sigma_k2: f64,
    pub sigma_xi2: Vec<f64>,
}

impl ModelState {
    fn first_non_finite(&self) -> Option<&'static str> {
        let bad = |v: &[DVector<f64>]| v.iter().any(|x| x.iter().any(|e| !e.is_finite()));
        if bad(&self.eta) {
            Some("eta")
        } else if bad(&self.xi) {
            Some("xi")
        } else if bad(&self.beta) {
            Some("beta")
        } else if !(self.sigma_k2.is_finite() && self.sigma_k2 > 0.0) {
            Some("sigma_k2")
        } else if self.sigma_xi2.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            Some("sigma_xi2")
        } else {
            None
        }
    }
}

/// Run length, burn-in, thinning and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 1_000,
            thin: 1,
            seed: 1,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of stored draws, `(iterations − burn_in) / thin`.
    pub fn stored_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    fn keeps(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in).is_multiple_of(self.thin)
    }
}

/// Receives stored draws as the chain runs.
pub trait DrawSink {
    fn record(&mut self, iteration: usize, state: &ModelState) -> Result<()>;

    /// Called every [`FLUSH_EVERY`] iterations and once at the end.
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Stored draws of one chain plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub draws: Vec<ModelState>,
    /// Iteration index (1-based) of each stored draw.
    pub draw_iterations: Vec<usize>,
    pub settings: SamplerSettings,
    pub layout: ChainLayout,
    /// Every update is an exact Gibbs draw, so there are no acceptance rates.
    pub move_kind: String,
    pub sweep_order: Vec<String>,
    pub stats: OpStats,
}

impl PosteriorChain {
    pub fn empty(settings: SamplerSettings, layout: ChainLayout) -> Self {
        Self {
            draws: Vec::new(),
            draw_iterations: Vec::new(),
            settings,
            layout,
            move_kind: "gibbs".into(),
            sweep_order: SWEEP_ORDER.iter().map(|s| s.to_string()).collect(),
            stats: OpStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.settings.seed
    }
}

impl DrawSink for PosteriorChain {
    fn record(&mut self, iteration: usize, state: &ModelState) -> Result<()> {
        self.draws.push(state.clone());
        self.draw_iterations.push(iteration);
        Ok(())
    }
}

/// Forwards each draw to two sinks.
pub struct TeeSink<'a, A: DrawSink, B: DrawSink>(pub &'a mut A, pub &'a mut B);

impl<A: DrawSink, B: DrawSink> DrawSink for TeeSink<'_, A, B> {
    fn record(&mut self, iteration: usize, state: &ModelState) -> Result<()> {
        self.0.record(iteration, state)?;
        self.1.record(iteration, state)
    }

    fn flush(&mut self) -> Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

/// Precomputed quantities shared by every iteration of a chain.
pub struct GibbsSampler<'a> {
    data: &'a ModelData,
    hyper: Hyperparams,
    scales: SamplerScales,
    /// `M_t` for `t = 2..T`.
    transitions: Vec<DMatrix<f64>>,
    /// `Σ*_β` per time, and a factor of it.
    beta_cov: Vec<DMatrix<f64>>,
    beta_factor: Vec<DMatrix<f64>>,
    mu_beta: DVector<f64>,
    counter: OpCounter,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(data: &'a ModelData, basis: &BasisSystem, prior: &PriorStructure, hyper: &Hyperparams) -> Result<Self> {
        let r = data.rank();
        let p = data.covariates();
        if basis.rank() != r
            || prior.rank() != r
            || basis.horizon() != data.horizon()
            || prior.horizon() != data.horizon()
        {
            return Err(Error::Dimension(format!(
                "data (T = {}, r = {r}), basis (T = {}, r = {}) and prior (T = {}, r = {}) disagree",
                data.horizon(),
                basis.horizon(),
                basis.rank(),
                prior.horizon(),
                prior.rank()
            )));
        }
        hyper.validate(p)?;
        let scales = prior.sampler_scales()?;
        for reg in &scales.regularizations {
            log::info!(
                "{:?}*_{} is singular (min eigenvalue {:.3e}); the sampler uses it plus {:.3e} I",
                reg.matrix,
                reg.time,
                reg.min_eigenvalue_before,
                reg.epsilon
            );
        }
        let transitions = (2..=data.horizon()).map(|t| basis.propagator(t).clone()).collect();
        let counter = OpCounter::default();
        let mut beta_cov = Vec::with_capacity(data.horizon());
        let mut beta_factor = Vec::with_capacity(data.horizon());
        for td in data.times() {
            let prec = super::conditionals::beta_precision(&td.x, &td.precision, hyper.sigma_beta2);
            counter.record(p);
            let chol = prec
                .cholesky()
                .ok_or_else(|| Error::Singular(format!("β precision at time {}", td.time)))?;
            let cov = symmetrize(&chol.inverse());
            counter.record(p);
            beta_factor.push(psd_factor(&cov));
            beta_cov.push(cov);
        }
        Ok(Self {
            data,
            mu_beta: hyper.mu_beta_vector(p),
            hyper: hyper.clone(),
            scales,
            transitions,
            beta_cov,
            beta_factor,
            counter,
        })
    }

    /// Operation counts so far.
    pub fn stats(&self) -> OpStats {
        self.counter.snapshot()
    }

    pub fn scales(&self) -> &SamplerScales {
        &self.scales
    }

    /// The starting state: β = 0, ξ = 0, unit variances and η from its prior.
    pub fn initial_state(&self, rng: &mut ChaCha8Rng) -> ModelState {
        let r = self.data.rank();
        let mut eta = Vec::with_capacity(self.data.horizon());
        eta.push(sample_mvn(&DVector::zeros(r), &self.scales.initial, rng));
        for t in 2..=self.data.horizon() {
            let mean = &self.transitions[t - 2] * &eta[t - 2];
            eta.push(sample_mvn(&mean, &self.scales.innovation[t - 1], rng));
        }
        ModelState {
            eta,
            xi: self.data.times().iter().map(|td| DVector::zeros(td.len())).collect(),
            beta: vec![DVector::zeros(self.data.covariates()); self.data.horizon()],
            sigma_k2: 1.0,
            sigma_xi2: vec![1.0; self.data.horizon()],
        }
    }

    /// One full sweep in [`SWEEP_ORDER`].
    pub fn sweep(&self, state: &mut ModelState, rng: &mut ChaCha8Rng) -> Result<()> {
        let data = self.data;
        let horizon = data.horizon();

        // η by forward filtering, backward sampling on z̃_t = z_t − X_tβ_t − ξ_t.
        let measurements: Vec<Measurement> = data
            .times()
            .iter()
            .enumerate()
            .map(|(ti, td)| {
                let shifted = &td.z - &td.x * &state.beta[ti] - &state.xi[ti];
                Measurement {
                    information: td.information.clone(),
                    score: td.score(&shifted),
                }
            })
            .collect();
        let initial = &self.scales.initial * state.sigma_k2;
        let innovations: Vec<DMatrix<f64>> = (2..=horizon)
            .map(|t| &self.scales.innovation[t - 1] * state.sigma_k2)
            .collect();
        let filtered = filter_information(
            &initial,
            &self.transitions,
            &innovations,
            &measurements,
            Some(&self.counter),
        )?;
        state.eta = backward_sample(&filtered, &self.transitions, &innovations, rng, Some(&self.counter))?;

        for (ti, td) in data.times().iter().enumerate() {
            let residual = &td.z - &td.x * &state.beta[ti] - &td.s * &state.eta[ti];
            state.xi[ti] = xi_conditional(&residual, &td.precision, state.sigma_xi2[ti]).sample(rng);
        }

        for (ti, td) in data.times().iter().enumerate() {
            let residual = &td.z - &state.xi[ti] - &td.s * &state.eta[ti];
            let score =
                td.x.transpose() * residual.component_mul(&td.precision) + &self.mu_beta / self.hyper.sigma_beta2;
            let mean = &self.beta_cov[ti] * score;
            let noise = standard_normal_vector(data.covariates(), rng);
            state.beta[ti] = mean + &self.beta_factor[ti] * noise;
        }

        state.sigma_k2 = sigma_k_conditional(
            &state.eta,
            &self.scales.initial_inverse,
            &self.scales.innovation_inverse[1..],
            &self.transitions,
            &self.hyper,
        )?
        .sample(rng);

        for ti in 0..horizon {
            state.sigma_xi2[ti] = sigma_xi_conditional(&state.xi[ti], &self.hyper)?.sample(rng);
        }
        Ok(())
    }

    /// Runs a chain, passing stored draws to `sink`.
    pub fn run(&self, settings: &SamplerSettings, sink: &mut dyn DrawSink) -> Result<OpStats> {
        settings.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut state = self.initial_state(&mut rng);
        if let Some(what) = state.first_non_finite() {
            return Err(Error::NonFiniteState {
                iteration: 0,
                what: what.into(),
            });
        }
        for iteration in 1..=settings.iterations {
            self.sweep(&mut state, &mut rng).map_err(|e| match e {
                Error::NonFinite(what) | Error::Singular(what) => Error::NonFiniteState { iteration, what },
                other => other,
            })?;
            if let Some(what) = state.first_non_finite() {
                return Err(Error::NonFiniteState {
                    iteration,
                    what: what.into(),
                });
            }
            if settings.keeps(iteration) {
                sink.record(iteration, &state)?;
            }
            if iteration % FLUSH_EVERY == 0 {
                sink.flush()?;
            }
        }
        sink.flush()?;
        Ok(self.stats())
    }

    /// Runs a chain and keeps every stored draw in memory.
    pub fn run_chain(&self, settings: &SamplerSettings) -> Result<PosteriorChain> {
        let mut chain = PosteriorChain::empty(*settings, self.data.layout());
        chain.stats = self.run(settings, &mut chain)?;
        Ok(chain)
    }
}

/// Fits the model to `observations` and returns the stored draws.
pub fn gibbs_run(
    observations: &ObservationSet,
    design: &DesignMatrices,
    basis: &BasisSystem,
    prior: &PriorStructure,
    hyper: &Hyperparams,
    settings: &SamplerSettings,
) -> Result<PosteriorChain> {
    let data = ModelData::new(observations, design, basis)?;
    GibbsSampler::new(&data, basis, prior, hyper)?.run_chain(settings)
}
