//! Posterior prediction, MSPE, the leave-one-survey-out criterion and trace summaries.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::data::{ArealGraph, DesignMatrices, Location, TransformKind};
use crate::sampler::{ModelState, PosteriorChain};
use crate::{Error, Result};

/// A prediction location at a time point.
pub type PredictionKey = (usize, Location);

/// Streaming mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Sample variance with divisor `n − 1`; zero for a single draw.
    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }
}

/// Posterior summary of `Y` at one location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub time: usize,
    pub location: Location,
    pub yhat: f64,
    pub mspe: f64,
    pub yhat_backtransformed: Option<f64>,
    pub mspe_backtransformed: Option<f64>,
}

/// Posterior means and variances of `Y` over a set of locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSurface {
    pub entries: Vec<PredictionEntry>,
    pub draws: usize,
}

impl PredictionSurface {
    pub fn get(&self, time: usize, location: Location) -> Option<&PredictionEntry> {
        self.entries.iter().find(|e| e.time == time && e.location == location)
    }

    /// Posterior means keyed by location.
    pub fn point_predictions(&self) -> BTreeMap<PredictionKey, f64> {
        self.entries.iter().map(|e| ((e.time, e.location), e.yhat)).collect()
    }

    /// Writes `variable,time,unit,yhat,mspe,yhat_backtransformed,mspe_backtransformed`.
    pub fn write_csv(&self, path: &Path, graph: &ArealGraph) -> Result<()> {
        let mut out = String::from("variable,time,unit,yhat,mspe,yhat_backtransformed,mspe_backtransformed\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.location.variable,
                e.time,
                graph.unit_name(e.location.unit),
                e.yhat,
                e.mspe,
                opt(e.yhat_backtransformed),
                opt(e.mspe_backtransformed)
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Every location of `D_{P,t}` for every `t`, in design order.
pub fn all_locations(design: &DesignMatrices) -> Vec<PredictionKey> {
    design
        .slices()
        .iter()
        .flat_map(|s| s.locations.iter().map(move |l| (s.time, *l)))
        .collect()
}

/// Evaluates `Y^{[j]}` at `keys` for every stored draw and passes each value to `visit(key index, value)`.
///
/// Where the chain carries no `ξ` (unobserved locations) it is drawn from its
/// prior `N(0, σ_{ξ,t}^{2[j]})`, in a fixed order driven by `seed`.
fn for_each_draw(
    chain: &PosteriorChain,
    basis: &BasisSystem,
    design: &DesignMatrices,
    keys: &[PredictionKey],
    seed: u64,
    mut visit: impl FnMut(usize, usize, f64),
) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::Chain("the chain holds no draws".into()));
    }
    let horizon = design.horizon();
    if chain.layout.horizon != horizon || basis.horizon() != horizon || chain.layout.rank != basis.rank() {
        return Err(Error::Dimension("chain, basis and design disagree on T or r".into()));
    }
    // (row in X_t, position in ξ_t or None) per key, grouped by time.
    let mut per_time: Vec<Vec<(usize, usize, Option<usize>)>> = vec![Vec::new(); horizon];
    let xi_pos: Vec<HashMap<Location, usize>> = chain
        .layout
        .xi_locations
        .iter()
        .map(|locs| locs.iter().enumerate().map(|(i, l)| (*l, i)).collect())
        .collect();
    for (k, (t, loc)) in keys.iter().enumerate() {
        if *t == 0 || *t > horizon {
            return Err(Error::Validation(format!("prediction time {t} outside 1..={horizon}")));
        }
        let row = design.slice(*t).row_of(*loc).ok_or_else(|| {
            Error::Validation(format!(
                "location (variable {}, unit index {}) is not in the prediction set at time {t}",
                loc.variable, loc.unit
            ))
        })?;
        per_time[t - 1].push((k, row, xi_pos[t - 1].get(loc).copied()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (j, draw) in chain.draws.iter().enumerate() {
        for (ti, wanted) in per_time.iter().enumerate() {
            if wanted.is_empty() {
                continue;
            }
            let t = ti + 1;
            let x = &design.slice(t).x;
            let s = basis.basis(t);
            let sd = draw.sigma_xi2[ti].sqrt();
            for &(k, row, xi_index) in wanted {
                let mean = x.row(row).dot(&draw.beta[ti].transpose()) + s.row(row).dot(&draw.eta[ti].transpose());
                let xi = match xi_index {
                    Some(i) => draw.xi[ti][i],
                    None => sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                };
                visit(j, k, mean + xi);
            }
        }
    }
    Ok(())
}

/// Posterior mean and MSPE of `Y` at `keys`.
///
/// `transforms[ℓ − 1]` selects the inverse link for back-transformed summaries,
/// applied to each draw before averaging.
pub fn posterior_y(
    chain: &PosteriorChain,
    basis: &BasisSystem,
    design: &DesignMatrices,
    keys: &[PredictionKey],
    transforms: &[TransformKind],
    seed: u64,
) -> Result<PredictionSurface> {
    let mut moments = vec![Moments::default(); keys.len()];
    let mut back = vec![Moments::default(); keys.len()];
    let kinds: Vec<TransformKind> = keys
        .iter()
        .map(|(_, l)| transforms.get(l.variable - 1).copied().unwrap_or_default())
        .collect();
    for_each_draw(chain, basis, design, keys, seed, |_, k, y| {
        moments[k].push(y);
        if !kinds[k].is_identity() {
            back[k].push(kinds[k].inverse(y));
        }
    })?;
    let entries = keys
        .iter()
        .enumerate()
        .map(|(k, (t, loc))| {
            let transformed = !kinds[k].is_identity();
            PredictionEntry {
                time: *t,
                location: *loc,
                yhat: moments[k].mean,
                mspe: moments[k].variance(),
                yhat_backtransformed: transformed.then(|| back[k].mean),
                mspe_backtransformed: transformed.then(|| back[k].variance()),
            }
        })
        .collect();
    Ok(PredictionSurface {
        entries,
        draws: chain.len(),
    })
}

/// Per-draw values of `Y` at a fixed list of locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    pub keys: Vec<PredictionKey>,
    /// `values[j][k]` is draw `j` at `keys[k]`.
    pub values: Vec<Vec<f64>>,
}

/// Collects `Y^{[j]}` at `keys` for every stored draw.
pub fn y_draws(
    chain: &PosteriorChain,
    basis: &BasisSystem,
    design: &DesignMatrices,
    keys: &[PredictionKey],
    seed: u64,
) -> Result<DrawMatrix> {
    let mut values = vec![vec![0.0; keys.len()]; chain.len()];
    for_each_draw(chain, basis, design, keys, seed, |j, k, y| values[j][k] = y)?;
    Ok(DrawMatrix {
        keys: keys.to_vec(),
        values,
    })
}

/// One leave-one-survey-out value with its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlsValue {
    pub rls: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub draws: usize,
    pub locations: usize,
}

/// `RLS(m) = Σ_j Σ_k (Y^{[j]}_k − Ŷ^{(m)}_k)² / Σ_j Σ_k (Y^{[j]}_k − Ŷ_k)²`.
///
/// `truth` holds the draws of `Y` from the chain fitted to every survey, `full`
/// that chain's posterior means and `single[m]` the means from the chain fitted
/// to survey `m` alone. Every predictor must cover exactly `truth.keys`.
pub fn rls(
    truth: &DrawMatrix,
    full: &BTreeMap<PredictionKey, f64>,
    single: &BTreeMap<usize, BTreeMap<PredictionKey, f64>>,
) -> Result<BTreeMap<usize, RlsValue>> {
    let aligned = |name: &str, p: &BTreeMap<PredictionKey, f64>| -> Result<Vec<f64>> {
        let missing: Vec<String> = truth
            .keys
            .iter()
            .filter(|k| !p.contains_key(k))
            .take(5)
            .map(|(t, l)| format!("(variable {}, time {t}, unit index {})", l.variable, l.unit))
            .collect();
        if !missing.is_empty() || p.len() != truth.keys.len() {
            return Err(Error::Validation(format!(
                "{name} predictions are not aligned with the truth draws: {} keys vs {}; missing {}",
                p.len(),
                truth.keys.len(),
                missing.join(", ")
            )));
        }
        Ok(truth.keys.iter().map(|k| p[k]).collect())
    };
    let sse = |pred: &[f64]| -> f64 {
        truth
            .values
            .iter()
            .map(|row| row.iter().zip(pred).map(|(y, yhat)| (y - yhat).powi(2)).sum::<f64>())
            .sum()
    };
    let denominator = sse(&aligned("full-data", full)?);
    if !(denominator > 0.0) {
        return Err(Error::Validation(
            "the fused predictor has zero squared error; RLS is undefined".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for (m, pred) in single {
        let numerator = sse(&aligned(&format!("survey {m}"), pred)?);
        out.insert(
            *m,
            RlsValue {
                rls: numerator / denominator,
                numerator,
                denominator,
                draws: truth.values.len(),
                locations: truth.keys.len(),
            },
        );
    }
    Ok(out)
}

/// Which parameters to summarize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParameterSelector {
    /// Every parameter except `ξ`.
    All,
    Eta,
    Beta,
    /// One component (1-based) of `β_t` across all `t`.
    BetaComponent(usize),
    SigmaK2,
    SigmaXi2,
    Xi,
}

impl std::str::FromStr for ParameterSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "eta" => Ok(Self::Eta),
            "beta" => Ok(Self::Beta),
            "sigma_k2" => Ok(Self::SigmaK2),
            "sigma_xi2" => Ok(Self::SigmaXi2),
            "xi" => Ok(Self::Xi),
            other => match other.strip_prefix("beta:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(Self::BetaComponent(k)),
                _ => Err(Error::Config(format!(
                    "unknown parameter selector `{other}` (expected all, eta, beta, beta:K, sigma_k2, sigma_xi2 or xi)"
                ))),
            },
        }
    }
}

type VectorField = fn(&ModelState) -> &Vec<DVector<f64>>;

fn vector_traces(
    chain: &PosteriorChain,
    name: &str,
    field: VectorField,
    only: Option<usize>,
) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    let first = field(&chain.draws[0]);
    for (ti, v) in first.iter().enumerate() {
        for k in (0..v.len()).filter(|k| only.is_none_or(|o| o == *k)) {
            let values = chain.draws.iter().map(|d| field(d)[ti][k]).collect();
            out.push((format!("{name}_t{}_{}", ti + 1, k + 1), values));
        }
    }
    out
}

/// Named scalar traces selected from a chain.
pub fn traces(chain: &PosteriorChain, selector: &ParameterSelector) -> Result<Vec<(String, Vec<f64>)>> {
    if chain.is_empty() {
        return Err(Error::Chain("the chain holds no draws".into()));
    }
    let sigma_k2 = || vec![("sigma_k2".to_string(), chain.draws.iter().map(|d| d.sigma_k2).collect())];
    let sigma_xi2 = || {
        (0..chain.layout.horizon)
            .map(|ti| {
                (
                    format!("sigma_xi2_t{}", ti + 1),
                    chain.draws.iter().map(|d| d.sigma_xi2[ti]).collect(),
                )
            })
            .collect::<Vec<_>>()
    };
    Ok(match selector {
        ParameterSelector::Eta => vector_traces(chain, "eta", |d| &d.eta, None),
        ParameterSelector::Beta => vector_traces(chain, "beta", |d| &d.beta, None),
        ParameterSelector::BetaComponent(k) => {
            if *k > chain.layout.covariates {
                return Err(Error::Config(format!(
                    "beta has {} components, asked for {k}",
                    chain.layout.covariates
                )));
            }
            vector_traces(chain, "beta", |d| &d.beta, Some(k - 1))
        }
        ParameterSelector::Xi => vector_traces(chain, "xi", |d| &d.xi, None),
        ParameterSelector::SigmaK2 => sigma_k2(),
        ParameterSelector::SigmaXi2 => sigma_xi2(),
        ParameterSelector::All => {
            let mut all = vector_traces(chain, "beta", |d| &d.beta, None);
            all.extend(vector_traces(chain, "eta", |d| &d.eta, None));
            all.extend(sigma_k2());
            all.extend(sigma_xi2());
            all
        }
    })
}

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// `None` for a constant trace.
    pub lag1_autocorrelation: Option<f64>,
    pub draws: usize,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sd (divisor `n − 1`), equal-tailed 95% interval and lag-1 autocorrelation.
pub fn summarize(name: &str, values: &[f64]) -> Result<TraceSummary> {
    if values.is_empty() {
        return Err(Error::Chain(format!("trace {name} is empty")));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lag1 = if ss > 0.0 && n > 1 {
        Some(values.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / ss)
    } else {
        None
    };
    Ok(TraceSummary {
        name: name.to_string(),
        mean,
        sd,
        lower: quantile(&sorted, 0.025),
        upper: quantile(&sorted, 0.975),
        lag1_autocorrelation: lag1,
        draws: n,
    })
}

/// Summaries of the selected parameters.
pub fn trace_summary(chain: &PosteriorChain, selector: &ParameterSelector) -> Result<Vec<TraceSummary>> {
    traces(chain, selector)?
        .iter()
        .map(|(name, values)| summarize(name, values))
        .collect()
}

/// Writes one row per stored draw: `iteration,<parameter>,...`.
pub fn write_trace_csv(chain: &PosteriorChain, selector: &ParameterSelector, path: &Path) -> Result<()> {
    let traces = traces(chain, selector)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<&str> = std::iter::once("iteration")
        .chain(traces.iter().map(|(n, _)| n.as_str()))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (j, iteration) in chain.draw_iterations.iter().enumerate() {
        let mut line = iteration.to_string();
        for (_, values) in &traces {
            line.push(',');
            line.push_str(&values[j].to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Mean of `Y` over stored draws at every observed location of the chain (convenience for diagnostics).
pub fn fitted_means(chain: &PosteriorChain, basis: &BasisSystem, design: &DesignMatrices) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(design.horizon());
    for (ti, locs) in chain.layout.xi_locations.iter().enumerate() {
        let keys: Vec<PredictionKey> = locs.iter().map(|l| (ti + 1, *l)).collect();
        let surface = posterior_y(chain, basis, design, &keys, &[], 0)?;
        out.push(DVector::from_iterator(
            keys.len(),
            surface.entries.iter().map(|e| e.yhat),
        ));
    }
    Ok(out)
}
