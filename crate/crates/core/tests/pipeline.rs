use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mstm::data::{load_observations, TransformKind};
use mstm::pipeline::{self, chain_dir, FitOptions, RunConfig};
use mstm::store::read_manifest;
use mstm::Error;
use tempfile::TempDir;

const CONFIG: &str = r#"
[paths]
units = "units.csv"
edges = "edges.csv"
covariates = "covariates.csv"
observations = "sim/observations.csv"
output = "out"

[design]
variables = 2
horizon = 3
covariates = 2
rank = 4

[sampler]
iterations = 300
burn_in = 100
seed = 5

[truth]
beta = [[1.0, -0.5]]
sigma_k2 = 1.0
sigma_xi2 = [0.05]
missing_units = ["u4"]
seed = 3

[truth.variance]
base = [0.05]
survey_scale = [1.0, 4.0]
"#;

/// A 3 x 3 lattice, two variables, three time points.
fn study(config: &str, constant_x_at: Option<usize>) -> (TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let units: String = (0..9).map(|i| format!("u{i}\n")).collect();
    std::fs::write(p.join("units.csv"), format!("unit\n{units}")).unwrap();
    let mut edges = String::from("unit_a,unit_b\n");
    for i in 0..3 {
        for j in 0..3 {
            let a = i * 3 + j;
            if j < 2 {
                writeln!(edges, "u{a},u{}", a + 1).unwrap();
            }
            if i < 2 {
                writeln!(edges, "u{a},u{}", a + 3).unwrap();
            }
        }
    }
    std::fs::write(p.join("edges.csv"), edges).unwrap();
    let mut cov = String::from("variable,time,unit,x1,x2\n");
    for l in 1..=2 {
        for t in 1..=3 {
            for u in 0..9 {
                let x2 = if constant_x_at == Some(t) {
                    0.5
                } else {
                    ((u * 7 + t * 3 + l) % 11) as f64 / 5.0
                };
                writeln!(cov, "{l},{t},u{u},1,{x2}").unwrap();
            }
        }
    }
    std::fs::write(p.join("covariates.csv"), cov).unwrap();
    std::fs::write(p.join("config.toml"), config).unwrap();
    let cfg = RunConfig::from_file(&p.join("config.toml")).unwrap();
    (dir, cfg)
}

fn simulated(config: &str) -> (TempDir, RunConfig) {
    let (dir, cfg) = study(config, None);
    pipeline::simulate_to_dir(&cfg, None, &dir.path().join("sim")).unwrap();
    (dir, cfg)
}

fn opts(chains: usize, output: PathBuf, survey: Option<usize>) -> FitOptions {
    FitOptions {
        seed: None,
        chains,
        output: Some(output),
        survey,
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let base = Path::new(".");
    let typo = CONFIG.replace("burn_in = 100", "burnin = 100");
    assert!(matches!(RunConfig::from_toml_str(&typo, base), Err(Error::Config(_))));
    let extra = format!("{CONFIG}\n[extras]\nx = 1\n");
    assert!(RunConfig::from_toml_str(&extra, base).is_err());
    let hyper = CONFIG.replace("[sampler]", "[hyper]\nalpha = 2.0\n\n[sampler]");
    assert!(RunConfig::from_toml_str(&hyper, base).is_err());
    assert!(RunConfig::from_toml_str(CONFIG, base).is_ok());
}

#[test]
fn design_needs_windows_or_both_dimensions() {
    let cfg = RunConfig::from_toml_str(&CONFIG.replace("horizon = 3\n", ""), Path::new(".")).unwrap();
    assert!(matches!(cfg.study_design(), Err(Error::Config(_))));
    let windows = CONFIG.replace("variables = 2\nhorizon = 3\n", "windows = [[1, 3], [2, 3]]\n");
    let study = RunConfig::from_toml_str(&windows, Path::new("."))
        .unwrap()
        .study_design()
        .unwrap();
    assert_eq!((study.variables(), study.horizon()), (2, 3));
    assert!(!study.is_active(2, 1));
}

#[test]
fn missing_files_are_missing_input() {
    assert!(matches!(
        RunConfig::from_file(Path::new("/nonexistent/config.toml")),
        Err(Error::MissingInput(_))
    ));
    let (dir, cfg) = study(CONFIG, None);
    std::fs::remove_file(dir.path().join("edges.csv")).unwrap();
    match pipeline::load_inputs(&cfg) {
        Err(Error::MissingInput(path)) => assert!(path.ends_with("edges.csv")),
        other => panic!("expected a missing-input error, got {other:?}"),
    }
}

#[test]
fn rank_deficient_covariates_name_the_time() {
    let (_dir, cfg) = study(CONFIG, Some(2));
    let err = pipeline::load_inputs(&cfg).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { time: 2, .. }), "{err}");
    assert!(err.to_string().contains('2'));
}

#[test]
fn simulate_then_validate() {
    let (dir, cfg) = simulated(CONFIG);
    for f in ["observations.csv", "truth_y.csv", "truth.json"] {
        assert!(dir.path().join("sim").join(f).exists(), "{f}");
    }
    let report = pipeline::validate(&cfg).unwrap();
    assert_eq!(
        (report.units, report.edges, report.variables, report.horizon),
        (9, 12, 2, 3)
    );
    assert_eq!(report.locations_per_time, vec![18, 18, 18]);
    // Two surveys over 16 observed locations.
    assert_eq!(report.observations_per_time, vec![32, 32, 32]);
    assert_eq!(report.observed_locations_per_time, vec![16, 16, 16]);
    assert_eq!(report.surveys, vec![1, 2]);
    assert_eq!(report.max_admissible_rank, 16);
    assert!(report.confounding.basis_sup < 1e-10);
    assert_eq!(report.warnings.len(), 3);
    assert!(report.human().ends_with("ok\n"));
}

#[test]
fn validate_checks_sampler_settings() {
    let (_dir, cfg) = simulated(&CONFIG.replace("burn_in = 100", "burn_in = 300"));
    assert!(matches!(pipeline::validate(&cfg), Err(Error::Config(_))));
}

#[test]
fn logit_observations_round_trip_through_the_raw_scale() {
    let config = CONFIG.replace("[sampler]", "[model]\ntransforms = [\"logit\"]\n\n[sampler]");
    let (dir, cfg) = study(&config, None);
    let sim = pipeline::simulate_to_dir(&cfg, None, &dir.path().join("sim")).unwrap();
    let inputs = pipeline::load_inputs(&cfg).unwrap();
    assert_eq!(inputs.transforms, vec![TransformKind::Logit, TransformKind::Identity]);
    let loaded = load_observations(&sim.observations, &inputs.study, &inputs.graph, &inputs.transforms).unwrap();
    for (a, b) in loaded.observations().iter().zip(&sim.truth.observations) {
        assert!(
            (a.z - b.z).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9 * b.v.max(1.0),
            "{a:?} vs {b:?}"
        );
    }
}

#[test]
fn fit_writes_one_directory_per_chain() {
    let (dir, cfg) = simulated(CONFIG);
    let out = dir.path().join("fits");
    let result = pipeline::fit(&cfg, &opts(2, out.clone(), None)).unwrap();
    assert_eq!(result.len(), 2);
    for (i, (path, manifest)) in result.iter().enumerate() {
        assert_eq!(path, &chain_dir(&out, None, i));
        assert_eq!(manifest.settings.seed, 5 + i as u64);
        assert_eq!(manifest.draws, 200);
        assert_eq!(manifest.chain_index, i);
        assert!(manifest.complete);
        assert_eq!(&read_manifest(path).unwrap(), manifest);
    }

    let single = pipeline::fit(&cfg, &opts(1, out.clone(), Some(2))).unwrap();
    assert_eq!(single[0].0, out.join("survey_2").join("chain_0"));
    assert_eq!(single[0].1.survey, Some(2));
    assert_eq!(single[0].1.observed_counts, vec![16, 16, 16]);
    assert!(matches!(
        pipeline::fit(&cfg, &opts(1, out, Some(3))),
        Err(Error::Validation(_))
    ));
}

#[test]
fn predict_and_rls_from_stored_chains() {
    let (dir, cfg) = simulated(CONFIG);
    let out = dir.path().join("fits");
    let full = pipeline::fit(&cfg, &opts(1, out.clone(), None)).unwrap().remove(0).0;
    let mut singles = BTreeMap::new();
    for m in [1, 2] {
        singles.insert(
            m,
            pipeline::fit(&cfg, &opts(1, out.clone(), Some(m))).unwrap().remove(0).0,
        );
    }

    let surface = pipeline::predict(&cfg, &full, None).unwrap();
    assert_eq!(surface.entries.len(), 54);
    assert_eq!(surface.draws, 200);
    assert!(surface.entries.iter().all(|e| e.mspe.is_finite() && e.mspe > 0.0));
    assert_eq!(surface, pipeline::predict(&cfg, &full, None).unwrap());

    let report = pipeline::rls_from_chains(&cfg, &full, &singles, 1, None).unwrap();
    assert_eq!(report.reference_survey, 1);
    assert_eq!(report.surveys[&1].locations, 48);
    assert!(report.surveys.values().all(|v| v.rls > 1.0));
    assert!(matches!(
        pipeline::rls_from_chains(&cfg, &full, &singles, 3, None),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        pipeline::predict(&cfg, &out.join("nope"), None),
        Err(Error::Chain(_))
    ));
}

#[test]
fn basis_and_prior_dumps() {
    let (dir, cfg) = study(CONFIG, None);
    let b = dir.path().join("basis");
    pipeline::dump_basis(&cfg, &b).unwrap();
    for t in 1..=3 {
        let text = std::fs::read_to_string(b.join(format!("basis_t{t}.csv"))).unwrap();
        assert_eq!(text.lines().next(), Some("variable,unit,s1,s2,s3,s4"));
        assert_eq!(text.lines().count(), 19);
        assert_eq!(
            std::fs::read_to_string(b.join(format!("eigenvalues_t{t}.csv")))
                .unwrap()
                .lines()
                .count(),
            5
        );
    }
    assert!(!b.join("propagator_t1.csv").exists() && b.join("propagator_t2.csv").exists());
    assert!(b.join("basis.json").exists());

    let p = dir.path().join("prior");
    pipeline::dump_prior(&cfg, &p).unwrap();
    assert!(p.join("kstar_t1.csv").exists() && p.join("wstar_t3.csv").exists() && !p.join("wstar_t1.csv").exists());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("prior.json")).unwrap()).unwrap();
    assert_eq!(json["rank"], 4);
    assert!(json["lift_log"].is_array());
}
