//! Run configuration and the end-to-end commands built on it.
//!
//! A run is described by a TOML file. Relative paths are resolved against the
//! directory holding the file. Unknown keys are rejected.
//!
//! ```toml
//! [paths]
//! units = "units.csv"
//! edges = "edges.csv"
//! covariates = "covariates.csv"
//! observations = "observations.csv"
//! output = "out"
//!
//! [design]
//! variables = 2
//! horizon = 10
//! covariates = 3
//! rank = 10
//!
//! [sampler]
//! iterations = 10000
//! burn_in = 1000
//! seed = 42
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, ConfoundingReport, PropagatorMode};
use crate::data::{
    assemble_design, build_adjacency, load_observations, read_units, ArealGraph, DesignMatrices, Location,
    ObservationSet, StudyDesign, TimeWindow, TransformKind, VariableLinks,
};
use crate::predict::{all_locations, posterior_y, rls, y_draws, PredictionKey, PredictionSurface, RlsValue};
use crate::prior::{LiftRecord, PriorOptions, PriorStructure};
use crate::sampler::{GibbsSampler, Hyperparams, ModelData, SamplerSettings};
use crate::simulate::{simulate, MissingMask, SyntheticTruth, TruthParams, VarianceSchedule};
use crate::store::{read_chain, ChainManifest, ChainMeta, ChainWriter};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub units: PathBuf,
    pub edges: PathBuf,
    pub covariates: PathBuf,
    /// Not needed by `simulate`.
    pub observations: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// Number of variables when every variable spans `1..=horizon`.
    pub variables: Option<usize>,
    pub horizon: Option<usize>,
    /// Per-variable `[first, last]` observation window; overrides `variables`/`horizon`.
    pub windows: Option<Vec<[usize; 2]>>,
    pub covariates: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub propagator: PropagatorMode,
    pub variable_links: VariableLinks,
    /// Per-variable transform of the raw estimates; missing entries are identity.
    pub transforms: Vec<TransformKind>,
}

/// Inputs of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub beta: Vec<Vec<f64>>,
    pub sigma_k2: f64,
    pub sigma_xi2: Vec<f64>,
    pub variance: VarianceSchedule,
    /// Units never observed by any survey.
    #[serde(default)]
    pub missing_units: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl TruthConfig {
    pub fn params(&self) -> TruthParams {
        TruthParams {
            beta: self.beta.clone(),
            sigma_k2: self.sigma_k2,
            sigma_xi2: self.sigma_xi2.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub design: DesignConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorOptions,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub hyper: Hyperparams,
    pub truth: Option<TruthConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output)
    }

    pub fn study_design(&self) -> Result<StudyDesign> {
        let d = &self.design;
        let windows = match (&d.windows, d.variables, d.horizon) {
            (Some(w), _, _) => w.iter().map(|[a, b]| TimeWindow::new(*a, *b)).collect(),
            (None, Some(l), Some(t)) => vec![TimeWindow::new(1, t); l],
            _ => {
                return Err(Error::Config(
                    "[design] needs either `windows` or both `variables` and `horizon`".into(),
                ))
            }
        };
        StudyDesign::new(windows, d.covariates, d.rank).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn transforms(&self, variables: usize) -> Result<Vec<TransformKind>> {
        if self.model.transforms.len() > variables {
            return Err(Error::Config(format!(
                "{} transforms declared for {variables} variables",
                self.model.transforms.len()
            )));
        }
        let mut t = self.model.transforms.clone();
        t.resize(variables, TransformKind::Identity);
        Ok(t)
    }
}

/// Graph, design and covariates.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub graph: ArealGraph,
    pub study: StudyDesign,
    pub design: DesignMatrices,
    pub transforms: Vec<TransformKind>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let study = cfg.study_design()?;
    let units = read_units(&cfg.resolve(&cfg.paths.units))?;
    let graph = build_adjacency(&cfg.resolve(&cfg.paths.edges), &units)?;
    let design = assemble_design(&cfg.resolve(&cfg.paths.covariates), &study, &graph)?;
    let transforms = cfg.transforms(study.variables())?;
    Ok(Inputs {
        graph,
        study,
        design,
        transforms,
    })
}

/// Inputs plus the basis and prior built from them.
#[derive(Debug, Clone)]
pub struct Model {
    pub inputs: Inputs,
    pub basis: BasisSystem,
    pub prior: PriorStructure,
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let inputs = load_inputs(cfg)?;
    let basis = BasisSystem::build(
        &inputs.design,
        &inputs.graph,
        cfg.design.rank,
        cfg.model.propagator,
        cfg.model.variable_links,
    )?;
    let prior = PriorStructure::build(&basis, &inputs.design, &inputs.graph, cfg.prior)?;
    Ok(Model { inputs, basis, prior })
}

pub fn load_run_observations(cfg: &RunConfig, inputs: &Inputs) -> Result<ObservationSet> {
    let path = cfg
        .paths
        .observations
        .as_ref()
        .ok_or_else(|| Error::Config("[paths] observations is required for this command".into()))?;
    load_observations(&cfg.resolve(path), &inputs.study, &inputs.graph, &inputs.transforms)
}

/// Outcome of `validate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub units: usize,
    pub edges: usize,
    pub variables: usize,
    pub horizon: usize,
    pub covariates: usize,
    pub rank: usize,
    pub max_admissible_rank: usize,
    pub locations_per_time: Vec<usize>,
    pub observations_per_time: Vec<usize>,
    pub observed_locations_per_time: Vec<usize>,
    pub surveys: Vec<usize>,
    pub confounding: ConfoundingReport,
    pub lift_log: Vec<LiftRecord>,
    pub regularizations: Vec<LiftRecord>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn human(&self) -> String {
        let mut s = format!(
            "units: {}  edges: {}\nvariables: {}  time points: {}  covariates: {}  rank: {} (max admissible {})\n",
            self.units, self.edges, self.variables, self.horizon, self.covariates, self.rank, self.max_admissible_rank
        );
        s.push_str(&format!(
            "observations: {} over {} surveys\n",
            self.observations_per_time.iter().sum::<usize>(),
            self.surveys.len()
        ));
        s.push_str(&format!(
            "confounding: max |S'X| = {:.2e}, propagator = {:.2e}\n",
            self.confounding.basis_sup, self.confounding.propagator_sup
        ));
        s.push_str(&format!(
            "prior: {} lifted, {} regularized\n",
            self.lift_log.len(),
            self.regularizations.len()
        ));
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str("ok\n");
        s
    }
}

/// Checks every input and module precondition needed by `fit`.
pub fn validate(cfg: &RunConfig) -> Result<ValidationReport> {
    cfg.sampler.validate()?;
    let model = build_model(cfg)?;
    cfg.hyper.validate(model.inputs.study.covariates())?;
    let obs = load_run_observations(cfg, &model.inputs)?;
    obs.check_against(&model.inputs.design, &model.inputs.graph)?;
    let data = ModelData::new(&obs, &model.inputs.design, &model.basis)?;
    let scales = model.prior.sampler_scales()?;
    let design = &model.inputs.design;
    let mut warnings = Vec::new();
    for td in data.times() {
        if td.len() < design.slice(td.time).len() {
            warnings.push(format!(
                "time {}: {} of {} locations unobserved",
                td.time,
                design.slice(td.time).len() - td.len(),
                design.slice(td.time).len()
            ));
        }
    }
    Ok(ValidationReport {
        units: model.inputs.graph.unit_count(),
        edges: model.inputs.graph.edges().len(),
        variables: model.inputs.study.variables(),
        horizon: design.horizon(),
        covariates: design.covariates(),
        rank: cfg.design.rank,
        max_admissible_rank: design.slices().iter().map(|s| s.len()).min().unwrap_or(0) - design.covariates(),
        locations_per_time: design.slices().iter().map(|s| s.len()).collect(),
        observations_per_time: obs.counts().to_vec(),
        observed_locations_per_time: data.times().iter().map(|t| t.len()).collect(),
        surveys: obs.surveys().into_iter().collect(),
        confounding: model.basis.confounding_report(design)?,
        lift_log: model.prior.lift_log().to_vec(),
        regularizations: scales.regularizations,
        warnings,
    })
}

/// Command-line overrides for `fit`.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub seed: Option<u64>,
    pub chains: usize,
    pub output: Option<PathBuf>,
    /// Restrict the data to one survey.
    pub survey: Option<usize>,
}

/// Directory of chain `index` under `output`, optionally for a single survey.
pub fn chain_dir(output: &Path, survey: Option<usize>, index: usize) -> PathBuf {
    match survey {
        Some(m) => output.join(format!("survey_{m}")).join(format!("chain_{index}")),
        None => output.join(format!("chain_{index}")),
    }
}

/// Runs the sampler and writes one chain directory per chain.
///
/// Chain `i` uses seed `seed + i`; chains run on separate threads.
pub fn fit(cfg: &RunConfig, opts: &FitOptions) -> Result<Vec<(PathBuf, ChainManifest)>> {
    let mut settings = cfg.sampler;
    if let Some(seed) = opts.seed {
        settings.seed = seed;
    }
    settings.validate()?;
    let model = build_model(cfg)?;
    let mut obs = load_run_observations(cfg, &model.inputs)?;
    if let Some(m) = opts.survey {
        if !obs.surveys().contains(&m) {
            return Err(Error::Validation(format!("no observations from survey {m}")));
        }
        obs = obs.survey_subset(m);
    }
    let data = ModelData::new(&obs, &model.inputs.design, &model.basis)?;
    let output = opts.output.clone().unwrap_or_else(|| cfg.output_dir());
    let chains = opts.chains.max(1);
    let meta = |i: usize| ChainMeta {
        chain_index: i,
        propagator_mode: cfg.model.propagator,
        prior: cfg.prior,
        hyper: cfg.hyper.clone(),
        survey: opts.survey,
    };
    let run_one = |i: usize| -> Result<(PathBuf, ChainManifest)> {
        let chain_settings = SamplerSettings {
            seed: settings.seed.wrapping_add(i as u64),
            ..settings
        };
        let dir = chain_dir(&output, opts.survey, i);
        let sampler = GibbsSampler::new(&data, &model.basis, &model.prior, &cfg.hyper)?;
        let mut writer = ChainWriter::create(&dir, &data.layout(), &model.inputs.graph, &chain_settings, &meta(i))?;
        let stats = sampler.run(&chain_settings, &mut writer)?;
        let manifest = writer.finish(stats)?;
        log::info!("chain {i}: {} draws written to {}", manifest.draws, dir.display());
        Ok((dir, manifest))
    };
    if chains == 1 {
        return Ok(vec![run_one(0)?]);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..chains).map(|i| scope.spawn(move || run_one(i))).collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Chain("a sampler thread panicked".into()))?)
            .collect()
    })
}

/// Posterior predictions over all of `D_{P,t}` from a stored chain.
pub fn predict(cfg: &RunConfig, chain: &Path, seed: Option<u64>) -> Result<PredictionSurface> {
    let model = build_model(cfg)?;
    let (chain, _) = read_chain(chain, &model.inputs.graph)?;
    posterior_y(
        &chain,
        &model.basis,
        &model.inputs.design,
        &all_locations(&model.inputs.design),
        &model.inputs.transforms,
        seed.unwrap_or(cfg.sampler.seed),
    )
}

/// Simulated data written by [`simulate_to_dir`].
pub struct SimulationOutput {
    pub truth: SyntheticTruth,
    pub observations: PathBuf,
}

/// Writes `observations.csv` (raw scale), `truth_y.csv` and `truth.json`.
pub fn simulate_to_dir(cfg: &RunConfig, seed: Option<u64>, output: &Path) -> Result<SimulationOutput> {
    let truth_cfg = cfg
        .truth
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs a [truth] section".into()))?;
    let model = build_model(cfg)?;
    let graph = &model.inputs.graph;
    let design = &model.inputs.design;
    let mut mask = MissingMask::default();
    for id in &truth_cfg.missing_units {
        let unit = graph
            .unit_index(id)
            .ok_or_else(|| Error::Config(format!("missing_units names unknown unit `{id}`")))?;
        mask.missing.extend(MissingMask::unit(design, unit).missing);
    }
    let seed = seed.unwrap_or(truth_cfg.seed);
    let truth = simulate(
        design,
        &model.basis,
        &model.prior,
        &truth_cfg.params(),
        &truth_cfg.variance,
        &mask,
        seed,
    )?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;

    let mut obs = String::from("variable,time,unit,z,v,survey\n");
    for o in &truth.observations {
        let kind = model.inputs.transforms[o.variable - 1];
        let (raw, raw_v) = to_raw_scale(o.z, o.v, kind);
        obs.push_str(&format!(
            "{},{},{},{raw},{raw_v},{}\n",
            o.variable,
            o.time,
            graph.unit_name(o.unit),
            o.survey
        ));
    }
    let obs_path = output.join("observations.csv");
    std::fs::write(&obs_path, obs).map_err(|e| Error::io(&obs_path, e))?;

    let mut ys = String::from("variable,time,unit,y,observed\n");
    for slice in design.slices() {
        for (row, loc) in slice.locations.iter().enumerate() {
            ys.push_str(&format!(
                "{},{},{},{},{}\n",
                loc.variable,
                slice.time,
                graph.unit_name(loc.unit),
                truth.y[slice.time - 1][row],
                !mask.contains(loc.variable, slice.time, loc.unit)
            ));
        }
    }
    let y_path = output.join("truth_y.csv");
    std::fs::write(&y_path, ys).map_err(|e| Error::io(&y_path, e))?;

    #[derive(Serialize)]
    struct TruthFile<'a> {
        seed: u64,
        params: &'a TruthParams,
        variance: &'a VarianceSchedule,
        eta: Vec<Vec<f64>>,
    }
    let json = serde_json::to_string_pretty(&TruthFile {
        seed,
        params: &truth.params,
        variance: &truth_cfg.variance,
        eta: truth.eta.iter().map(|e| e.iter().copied().collect()).collect(),
    })
    .map_err(|e| Error::Chain(e.to_string()))?;
    let json_path = output.join("truth.json");
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(SimulationOutput {
        truth,
        observations: obs_path,
    })
}

/// Maps a modeled value and variance back to the raw scale, inverting the delta method.
pub fn to_raw_scale(z: f64, v: f64, kind: TransformKind) -> (f64, f64) {
    let raw = kind.inverse(z);
    let slope = match kind {
        TransformKind::Identity => 1.0,
        TransformKind::Logit => raw * (1.0 - raw),
        TransformKind::Log => raw,
    };
    (raw, v * slope * slope)
}

/// `rls.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsReport {
    pub surveys: BTreeMap<usize, RlsValue>,
    pub reference_survey: usize,
}

/// RLS of each single-survey chain against the fused chain, over the
/// locations observed by `reference_survey`.
pub fn rls_from_chains(
    cfg: &RunConfig,
    full: &Path,
    singles: &BTreeMap<usize, PathBuf>,
    reference_survey: usize,
    seed: Option<u64>,
) -> Result<RlsReport> {
    let model = build_model(cfg)?;
    let obs = load_run_observations(cfg, &model.inputs)?;
    let mut keys: Vec<PredictionKey> = obs
        .observations()
        .iter()
        .filter(|o| o.survey == reference_survey)
        .map(|o| (o.time, Location::new(o.variable, o.unit)))
        .collect();
    keys.sort();
    keys.dedup();
    if keys.is_empty() {
        return Err(Error::Validation(format!(
            "survey {reference_survey} has no observations"
        )));
    }
    let seed = seed.unwrap_or(cfg.sampler.seed);
    let design = &model.inputs.design;
    let (full_chain, _) = read_chain(full, &model.inputs.graph)?;
    let truth = y_draws(&full_chain, &model.basis, design, &keys, seed)?;
    let full_pred = posterior_y(&full_chain, &model.basis, design, &keys, &[], seed)?.point_predictions();
    let mut single_pred = BTreeMap::new();
    for (m, dir) in singles {
        let (chain, _) = read_chain(dir, &model.inputs.graph)?;
        single_pred.insert(
            *m,
            posterior_y(&chain, &model.basis, design, &keys, &[], seed)?.point_predictions(),
        );
    }
    Ok(RlsReport {
        surveys: rls(&truth, &full_pred, &single_pred)?,
        reference_survey,
    })
}

fn write_matrix(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_square(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (1..=m.ncols()).map(|k| format!("c{k}")).collect();
    write_matrix(
        path,
        &header,
        m.row_iter().map(|r| r.iter().map(f64::to_string).collect()),
    )
}

/// Writes `S_t` (with location columns), eigenvalues and `M_t` per time, plus `basis.json`.
pub fn dump_basis(cfg: &RunConfig, output: &Path) -> Result<()> {
    let model = build_model(cfg)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let graph = &model.inputs.graph;
    for slice in model.basis.slices() {
        let t = slice.time;
        let locs = &model.inputs.design.slice(t).locations;
        let mut header = vec!["variable".to_string(), "unit".to_string()];
        header.extend((1..=model.basis.rank()).map(|k| format!("s{k}")));
        write_matrix(
            &output.join(format!("basis_t{t}.csv")),
            &header,
            slice.basis.row_iter().zip(locs).map(|(r, l)| {
                let mut row = vec![l.variable.to_string(), graph.unit_name(l.unit).to_string()];
                row.extend(r.iter().map(f64::to_string));
                row
            }),
        )?;
        write_matrix(
            &output.join(format!("eigenvalues_t{t}.csv")),
            &["eigenvalue".to_string()],
            slice.eigenvalues.iter().map(|v| vec![v.to_string()]),
        )?;
        if let Some(m) = &slice.propagator {
            write_square(&output.join(format!("propagator_t{t}.csv")), m)?;
        }
    }
    let manifest = serde_json::json!({
        "format_version": crate::store::FORMAT_VERSION,
        "rank": model.basis.rank(),
        "horizon": model.basis.horizon(),
        "ordering": "eigenvalues of the Moran operator in decreasing algebraic order; columns of a numerically repeated eigenvalue ordered lexicographically descending",
        "sign_convention": "first entry with magnitude above 1e-12 is positive",
        "propagator_mode": model.basis.mode(),
        "variable_links": model.basis.links(),
        "confounding": model.basis.confounding_report(&model.inputs.design)?,
    });
    let path = output.join("basis.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).unwrap_or_default() + "\n",
    )
    .map_err(|e| Error::io(&path, e))
}

/// Writes `K*_t`, `W*_t` and `prior.json` with the lift log.
pub fn dump_prior(cfg: &RunConfig, output: &Path) -> Result<()> {
    let model = build_model(cfg)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    for t in 1..=model.prior.horizon() {
        write_square(&output.join(format!("kstar_t{t}.csv")), model.prior.k_star(t))?;
        if t >= 2 {
            write_square(&output.join(format!("wstar_t{t}.csv")), model.prior.w_star(t))?;
        }
    }
    let scales = model.prior.sampler_scales()?;
    let manifest = serde_json::json!({
        "format_version": crate::store::FORMAT_VERSION,
        "options": model.prior.options(),
        "rank": model.prior.rank(),
        "horizon": model.prior.horizon(),
        "lift_log": model.prior.lift_log(),
        "regularizations": scales.regularizations,
    });
    let path = output.join("prior.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).unwrap_or_default() + "\n",
    )
    .map_err(|e| Error::io(&path, e))
}
