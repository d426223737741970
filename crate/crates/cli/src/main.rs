use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mstm::pipeline::{self, FitOptions, RunConfig};
use mstm::predict::{trace_summary, write_trace_csv, ParameterSelector};
use mstm::store::read_chain;
use mstm::Error;

const USAGE: u8 = 1;
const MISSING_INPUT: u8 = 2;
const VALIDATION: u8 = 3;
const STATE: u8 = 4;

/// Reduced-rank Bayesian model for multivariate spatio-temporal survey data.
#[derive(Parser)]
#[command(name = "mstm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Number of independent chains (seed + chain index).
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    chains: usize,

    /// Overrides the output directory from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check inputs, ranks and windows without sampling.
    Validate {
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the Gibbs sampler and write chain directories.
    Fit {
        /// Fit only the estimates of this survey.
        #[arg(long, value_name = "M")]
        survey: Option<usize>,
    },
    /// Posterior means and MSPE over every prediction location.
    Predict {
        /// Chain directory (default: OUTPUT/chain_0).
        #[arg(long, value_name = "DIR")]
        chain: Option<PathBuf>,
        /// Also write trace.csv and trace_summary.json for these parameters
        /// (all, eta, beta, beta:K, sigma_k2, sigma_xi2, xi).
        #[arg(long, value_name = "SELECTOR")]
        trace: Option<String>,
    },
    /// Simulate observations from the [truth] section.
    Simulate,
    /// Leave-one-survey-out criterion from fused and single-survey chains.
    Rls {
        /// Fused chain (default: OUTPUT/chain_0).
        #[arg(long, value_name = "DIR")]
        full: Option<PathBuf>,
        /// Single-survey chain as M=DIR; repeatable (default: OUTPUT/survey_M/chain_0).
        #[arg(long = "survey-chain", value_name = "M=DIR")]
        survey_chains: Vec<String>,
        /// Survey whose observed locations are scored.
        #[arg(long, default_value_t = 1)]
        reference: usize,
    },
    /// Dump S_t, eigenvalues and M_t.
    Basis,
    /// Dump K*_t, W*_t and the lift log.
    Prior,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingInput(_) => MISSING_INPUT,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => MISSING_INPUT,
            Error::Io { .. }
            | Error::Chain(_)
            | Error::NonFiniteState { .. }
            | Error::Singular(_)
            | Error::NonFinite(_) => STATE,
            Error::Parse { .. }
            | Error::Config(_)
            | Error::Validation(_)
            | Error::RankDeficient { .. }
            | Error::RankTooLarge { .. }
            | Error::Dimension(_) => VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        message: message.into(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| usage(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config_path = cli.config.ok_or_else(|| usage("--config PATH is required"))?;
    let cfg = RunConfig::from_file(&config_path)?;
    let output = cli.output.clone().unwrap_or_else(|| cfg.output_dir());
    match cli.command {
        Command::Validate { json } => {
            let report = pipeline::validate(&cfg)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(|e| usage(e.to_string()))?
                );
            } else {
                print!("{}", report.human());
            }
        }
        Command::Fit { survey } => {
            if cli.chains == 0 {
                return Err(usage("--chains must be at least 1"));
            }
            let opts = FitOptions {
                seed: cli.seed,
                chains: cli.chains,
                output: Some(output),
                survey,
            };
            for (dir, manifest) in pipeline::fit(&cfg, &opts)? {
                println!("{}: {} draws", dir.display(), manifest.draws);
            }
        }
        Command::Predict { chain, trace } => {
            let chain = chain.unwrap_or_else(|| pipeline::chain_dir(&output, None, 0));
            let selector: Option<ParameterSelector> = trace.map(|s| s.parse()).transpose()?;
            let surface = pipeline::predict(&cfg, &chain, cli.seed)?;
            std::fs::create_dir_all(&output).map_err(|e| Failure::from(Error::io(&output, e)))?;
            let graph = pipeline::load_inputs(&cfg)?.graph;
            let path = output.join("predictions.csv");
            surface.write_csv(&path, &graph)?;
            println!(
                "{}: {} locations from {} draws",
                path.display(),
                surface.entries.len(),
                surface.draws
            );
            if let Some(selector) = selector {
                let (posterior, _) = read_chain(&chain, &graph)?;
                write_trace_csv(&posterior, &selector, &output.join("trace.csv"))?;
                write_json(
                    &output.join("trace_summary.json"),
                    &trace_summary(&posterior, &selector)?,
                )?;
            }
        }
        Command::Simulate => {
            let sim = pipeline::simulate_to_dir(&cfg, cli.seed, &output)?;
            println!(
                "{}: {} observations",
                sim.observations.display(),
                sim.truth.observations.len()
            );
        }
        Command::Rls {
            full,
            survey_chains,
            reference,
        } => {
            let full = full.unwrap_or_else(|| pipeline::chain_dir(&output, None, 0));
            let mut singles = BTreeMap::new();
            for spec in &survey_chains {
                let (m, dir) = spec
                    .split_once('=')
                    .and_then(|(m, d)| Some((m.parse::<usize>().ok()?, PathBuf::from(d))))
                    .ok_or_else(|| usage(format!("--survey-chain expects M=DIR, got `{spec}`")))?;
                singles.insert(m, dir);
            }
            if singles.is_empty() {
                for m in 1..=64 {
                    let dir = pipeline::chain_dir(&output, Some(m), 0);
                    if dir.join(mstm::store::MANIFEST_FILE).exists() {
                        singles.insert(m, dir);
                    }
                }
            }
            if singles.is_empty() {
                return Err(Error::Chain(format!("no single-survey chains under {}", output.display())).into());
            }
            let report = pipeline::rls_from_chains(&cfg, &full, &singles, reference, cli.seed)?;
            std::fs::create_dir_all(&output).map_err(|e| Failure::from(Error::io(&output, e)))?;
            let path = output.join("rls.json");
            write_json(&path, &report)?;
            for (m, v) in &report.surveys {
                println!("RLS({m}) = {:.6}", v.rls);
            }
        }
        Command::Basis => {
            let dir = cli.output.unwrap_or_else(|| cfg.output_dir().join("basis"));
            pipeline::dump_basis(&cfg, &dir)?;
            println!("{}", dir.display());
        }
        Command::Prior => {
            let dir = cli.output.unwrap_or_else(|| cfg.output_dir().join("prior"));
            pipeline::dump_prior(&cfg, &dir)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
