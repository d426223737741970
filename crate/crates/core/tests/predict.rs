mod common;

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use common::{problem, Problem};
use mstm::data::{Location, Observation, ObservationSet, TransformKind};
use mstm::predict::{
    all_locations, posterior_y, rls, summarize, trace_summary, traces, write_trace_csv, y_draws, DrawMatrix,
    ParameterSelector, PredictionKey,
};
use mstm::sampler::{gibbs_run, ChainLayout, Hyperparams, ModelState, PosteriorChain, SamplerSettings};
use mstm::simulate::{simulate, MissingMask, TruthParams, VarianceSchedule};
use mstm::Error;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A chain whose ξ covers every prediction location, with `draws` states from `state`.
fn chain_of(pr: &Problem, draws: usize, mut state: impl FnMut(usize) -> ModelState) -> PosteriorChain {
    let layout = ChainLayout {
        horizon: pr.design.horizon(),
        rank: pr.basis.rank(),
        covariates: pr.design.covariates(),
        xi_locations: pr.design.slices().iter().map(|s| s.locations.clone()).collect(),
    };
    let mut chain = PosteriorChain::empty(SamplerSettings::default(), layout);
    for j in 0..draws {
        chain.draws.push(state(j));
        chain.draw_iterations.push(j + 1);
    }
    chain
}

fn random_state(pr: &Problem, rng: &mut ChaCha8Rng) -> ModelState {
    let mut vec = |n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let horizon = pr.design.horizon();
    ModelState {
        eta: (0..horizon).map(|_| vec(pr.basis.rank())).collect(),
        xi: pr.design.slices().iter().map(|s| vec(s.len())).collect(),
        beta: (0..horizon).map(|_| vec(pr.design.covariates())).collect(),
        sigma_k2: 1.0,
        sigma_xi2: vec![0.5; horizon],
    }
}

#[test]
fn identical_draws_have_zero_mspe() {
    let pr = problem(2, 3, (3, 3), 2, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = random_state(&pr, &mut rng);
    let chain = chain_of(&pr, 25, |_| state.clone());
    let surface = posterior_y(&chain, &pr.basis, &pr.design, &all_locations(&pr.design), &[], 0).unwrap();
    assert_eq!(surface.entries.len(), pr.design.total_locations());
    assert!(surface.entries.iter().all(|e| e.mspe == 0.0));
    assert_eq!(surface.draws, 25);
}

#[test]
fn mspe_is_the_two_pass_sample_variance() {
    let pr = problem(2, 3, (3, 3), 2, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let chain = chain_of(&pr, 200, |_| random_state(&pr, &mut rng));
    let keys = all_locations(&pr.design);
    let surface = posterior_y(&chain, &pr.basis, &pr.design, &keys, &[], 0).unwrap();
    let draws = y_draws(&chain, &pr.basis, &pr.design, &keys, 0).unwrap();
    let n = draws.values.len() as f64;
    for (k, e) in surface.entries.iter().enumerate() {
        let mean = draws.values.iter().map(|row| row[k]).sum::<f64>() / n;
        let var = draws.values.iter().map(|row| (row[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_abs_diff_eq!(e.yhat, mean, epsilon = 1e-12);
        assert_abs_diff_eq!(e.mspe, var, epsilon = 1e-12);
    }
}

#[test]
fn back_transform_averages_the_inverse_link() {
    let pr = problem(2, 2, (2, 3), 2, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chain = chain_of(&pr, 50, |_| random_state(&pr, &mut rng));
    let keys = all_locations(&pr.design);
    let transforms = [TransformKind::Logit, TransformKind::Identity];
    let surface = posterior_y(&chain, &pr.basis, &pr.design, &keys, &transforms, 0).unwrap();
    let draws = y_draws(&chain, &pr.basis, &pr.design, &keys, 0).unwrap();
    for (k, e) in surface.entries.iter().enumerate() {
        if e.location.variable == 1 {
            let expected = draws
                .values
                .iter()
                .map(|row| 1.0 / (1.0 + (-row[k]).exp()))
                .sum::<f64>()
                / 50.0;
            assert_abs_diff_eq!(e.yhat_backtransformed.unwrap(), expected, epsilon = 1e-12);
            assert!(e.mspe_backtransformed.unwrap() >= 0.0);
        } else {
            assert_eq!(e.yhat_backtransformed, None);
            assert_eq!(e.mspe_backtransformed, None);
        }
    }
}

#[test]
fn prediction_outside_the_design_is_an_error() {
    let pr = problem(1, 2, (2, 2), 1, 1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let chain = chain_of(&pr, 3, |_| random_state(&pr, &mut rng));
    let bad = [(1, Location::new(2, 0))];
    assert!(matches!(
        posterior_y(&chain, &pr.basis, &pr.design, &bad, &[], 0),
        Err(Error::Validation(_))
    ));
    let late = [(3, Location::new(1, 0))];
    assert!(posterior_y(&chain, &pr.basis, &pr.design, &late, &[], 0).is_err());
    let empty = chain_of(&pr, 0, |_| unreachable!());
    assert!(matches!(
        posterior_y(&empty, &pr.basis, &pr.design, &all_locations(&pr.design), &[], 0),
        Err(Error::Chain(_))
    ));
}

fn keys(n: usize) -> Vec<PredictionKey> {
    (0..n).map(|u| (1, Location::new(1, u))).collect()
}

fn predictor(values: &[f64]) -> BTreeMap<PredictionKey, f64> {
    keys(values.len()).into_iter().zip(values.iter().copied()).collect()
}

#[test]
fn rls_hand_example() {
    // Denominator: 1 + 0 + 1 + 0 = 2. Numerator: 0 + 2 + 4 + 2 = 8.
    let truth = DrawMatrix {
        keys: keys(2),
        values: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
    };
    let single = BTreeMap::from([(1, predictor(&[1.0, 2f64.sqrt()]))]);
    let out = rls(&truth, &predictor(&[0.0, 0.0]), &single).unwrap();
    assert_abs_diff_eq!(out[&1].numerator, 8.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out[&1].denominator, 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out[&1].rls, 4.0, epsilon = 1e-12);
    assert_eq!((out[&1].draws, out[&1].locations), (2, 2));
}

#[test]
fn rls_of_identical_predictors_is_one() {
    let truth = DrawMatrix {
        keys: keys(3),
        values: vec![vec![0.3, 1.0, -2.0], vec![0.1, 0.7, -1.0], vec![0.5, 1.1, -1.6]],
    };
    let full = predictor(&[0.3, 0.9, -1.5]);
    let out = rls(&truth, &full, &BTreeMap::from([(2, full.clone())])).unwrap();
    assert_eq!(out[&2].rls, 1.0);
}

#[test]
fn misaligned_rls_inputs_list_the_gap() {
    let truth = DrawMatrix {
        keys: keys(3),
        values: vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 2.0]],
    };
    let short = predictor(&[0.0, 0.0]);
    let err = rls(&truth, &predictor(&[0.5, 0.5, 2.0]), &BTreeMap::from([(1, short)])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("survey 1") && msg.contains("unit index 2"), "{msg}");

    let constant = DrawMatrix {
        keys: keys(1),
        values: vec![vec![1.0], vec![1.0]],
    };
    assert!(rls(&constant, &predictor(&[1.0]), &BTreeMap::new()).is_err());
}

#[test]
fn constant_trace_collapses() {
    let s = summarize("c", &[2.5; 40]).unwrap();
    assert_eq!((s.mean, s.sd, s.lower, s.upper), (2.5, 0.0, 2.5, 2.5));
    assert_eq!(s.lag1_autocorrelation, None);
    assert!(summarize("empty", &[]).is_err());
}

#[test]
fn iid_normal_trace_summary() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let s = summarize("z", &values).unwrap();
    assert!(s.mean.abs() <= 0.03, "mean {}", s.mean);
    assert!(s.lag1_autocorrelation.unwrap().abs() <= 0.03);
    assert!((s.sd - 1.0).abs() < 0.03);
    assert!((s.lower + 1.96).abs() < 0.1 && (s.upper - 1.96).abs() < 0.1);
}

#[test]
fn selectors_and_trace_csv() {
    let pr = problem(1, 2, (2, 3), 2, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let chain = chain_of(&pr, 10, |_| random_state(&pr, &mut rng));
    let names = |sel: &str| -> Vec<String> {
        traces(&chain, &sel.parse().unwrap())
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    };
    assert_eq!(names("beta:2"), ["beta_t1_2", "beta_t2_2"]);
    assert_eq!(names("sigma_xi2"), ["sigma_xi2_t1", "sigma_xi2_t2"]);
    assert_eq!(names("all").len(), 4 + 4 + 1 + 2);
    assert!("beta:0".parse::<ParameterSelector>().is_err());
    assert!("gamma".parse::<ParameterSelector>().is_err());
    assert!(traces(&chain, &ParameterSelector::BetaComponent(3)).is_err());
    assert_eq!(trace_summary(&chain, &ParameterSelector::SigmaK2).unwrap()[0].sd, 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_csv(&chain, &ParameterSelector::Beta, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,beta_t1_1,beta_t1_2,beta_t2_1,beta_t2_2"));
    assert_eq!(lines.count(), 10);
}

#[test]
fn surface_csv_layout() {
    let pr = problem(1, 1, (1, 2), 1, 1, 6);
    let state = ModelState {
        eta: vec![DVector::zeros(1)],
        xi: vec![DVector::zeros(2)],
        beta: vec![DVector::from_element(1, 0.5)],
        sigma_k2: 1.0,
        sigma_xi2: vec![1.0],
    };
    let chain = chain_of(&pr, 2, |_| state.clone());
    let surface = posterior_y(&chain, &pr.basis, &pr.design, &all_locations(&pr.design), &[], 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    surface.write_csv(&path, &pr.graph).unwrap();
    assert_eq!(
        std::fs::read_to_string(path).unwrap(),
        "variable,time,unit,yhat,mspe,yhat_backtransformed,mspe_backtransformed\n1,1,u0,0.5,0,,\n1,1,u1,0.5,0,,\n"
    );
}

fn fit(pr: &Problem, obs: &ObservationSet, seed: u64) -> PosteriorChain {
    let settings = SamplerSettings {
        iterations: 1_500,
        burn_in: 300,
        thin: 1,
        seed,
    };
    gibbs_run(
        obs,
        &pr.design,
        &pr.basis,
        &pr.prior,
        &Hyperparams::default(),
        &settings,
    )
    .unwrap()
}

fn params() -> TruthParams {
    TruthParams {
        beta: vec![vec![1.0, 0.5]],
        sigma_k2: 1.0,
        sigma_xi2: vec![0.05],
    }
}

#[test]
fn never_observed_unit_has_finite_larger_mspe() {
    let pr = problem(1, 4, (4, 4), 2, 5, 7);
    let masked = 5;
    let mask = MissingMask::unit(&pr.design, masked);
    let truth = simulate(
        &pr.design,
        &pr.basis,
        &pr.prior,
        &params(),
        &VarianceSchedule::uniform(0.02),
        &mask,
        8,
    )
    .unwrap();
    let obs = truth.observation_set(&pr.study, &pr.graph).unwrap();
    assert!(obs.observations().iter().all(|o| o.unit != masked));
    let chain = fit(&pr, &obs, 9);
    let surface = posterior_y(&chain, &pr.basis, &pr.design, &all_locations(&pr.design), &[], 1).unwrap();
    let (mut observed, mut missing) = (Vec::new(), Vec::new());
    for e in &surface.entries {
        assert!(e.mspe.is_finite() && e.mspe >= 0.0);
        if e.location.unit == masked {
            missing.push(e.mspe);
        } else {
            observed.push(e.mspe);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(missing.iter().all(|m| *m > 0.0));
    assert!(
        mean(&missing) > mean(&observed),
        "{} vs {}",
        mean(&missing),
        mean(&observed)
    );
}

#[test]
fn doubly_observed_locations_have_smaller_mspe() {
    let pr = problem(1, 4, (4, 4), 2, 5, 10);
    let schedule = VarianceSchedule {
        base: vec![0.1],
        survey_scale: vec![1.0, 1.0],
    };
    let truth = simulate(
        &pr.design,
        &pr.basis,
        &pr.prior,
        &params(),
        &schedule,
        &MissingMask::default(),
        11,
    )
    .unwrap();
    // Survey 2 only covers the even units.
    let kept: Vec<Observation> = truth
        .observations
        .iter()
        .copied()
        .filter(|o| o.survey == 1 || o.unit % 2 == 0)
        .collect();
    let obs = ObservationSet::new(kept, &pr.study, &pr.graph).unwrap();
    let chain = fit(&pr, &obs, 12);
    let surface = posterior_y(&chain, &pr.basis, &pr.design, &all_locations(&pr.design), &[], 1).unwrap();
    let mean = |even: bool| {
        let v: Vec<f64> = surface
            .entries
            .iter()
            .filter(|e| (e.location.unit % 2 == 0) == even)
            .map(|e| e.mspe)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) < mean(false), "{} vs {}", mean(true), mean(false));
}
