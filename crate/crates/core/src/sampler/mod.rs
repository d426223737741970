//! Posterior sampling.

pub mod conditionals;
pub mod gibbs;
pub mod kalman;
pub mod model;

pub use conditionals::{
    beta_conditional, sample_beta, sample_sigma_k, sample_sigma_xi, sample_xi, sigma_k_conditional,
    sigma_xi_conditional, xi_conditional, BetaConditional, DiagonalGaussian, Hyperparams, InverseGamma,
};
pub use gibbs::{
    gibbs_run, DrawSink, GibbsSampler, ModelState, PosteriorChain, SamplerSettings, TeeSink, FLUSH_EVERY, SWEEP_ORDER,
};
pub use kalman::{backward_sample, filter_information, kalman_filter, rts_smoother, FilterOutput, Measurement};
pub use model::{ChainLayout, ModelData, TimeData};
