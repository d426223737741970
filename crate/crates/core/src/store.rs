//! Chain directories: a JSON manifest plus one CSV per parameter block, one row
//! per stored draw.
//!
//! Files are appended as the chain runs and flushed every
//! [`FLUSH_EVERY`](crate::sampler::FLUSH_EVERY) iterations, so an interrupted run
//! leaves readable partial output and a manifest with `complete: false`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::PropagatorMode;
use crate::data::{ArealGraph, Location};
use crate::linalg::OpStats;
use crate::prior::PriorOptions;
use crate::sampler::{ChainLayout, DrawSink, Hyperparams, ModelState, PosteriorChain, SamplerSettings};
use crate::{Error, Result};

/// Layout version of chain directories.
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHAIN_FILES: [&str; 5] = ["eta.csv", "beta.csv", "xi.csv", "sigma_k2.csv", "sigma_xi2.csv"];
pub const XI_INDEX_FILE: &str = "xi_index.csv";

/// Run metadata stored next to the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainManifest {
    pub format_version: u32,
    pub package_version: String,
    pub complete: bool,
    pub chain_index: usize,
    pub settings: SamplerSettings,
    pub draws: usize,
    pub horizon: usize,
    pub rank: usize,
    pub covariates: usize,
    pub observed_counts: Vec<usize>,
    pub sweep_order: Vec<String>,
    pub move_kind: String,
    pub propagator_mode: PropagatorMode,
    pub prior: PriorOptions,
    pub hyper: Hyperparams,
    /// Survey the chain was restricted to, if any.
    pub survey: Option<usize>,
    /// SHA-256 of each data file.
    pub files: BTreeMap<String, String>,
    pub op_stats: OpStats,
}

/// Model options recorded in the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMeta {
    pub chain_index: usize,
    pub propagator_mode: PropagatorMode,
    pub prior: PriorOptions,
    pub hyper: Hyperparams,
    pub survey: Option<usize>,
}

/// SHA-256 of a file as lowercase hex.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn vector_header(prefix: &str, dims: &[usize]) -> String {
    let mut cols = vec!["iteration".to_string()];
    for (ti, d) in dims.iter().enumerate() {
        for k in 1..=*d {
            cols.push(format!("{prefix}_t{}_{k}", ti + 1));
        }
    }
    cols.join(",")
}

fn vector_row(iteration: usize, blocks: &[DVector<f64>]) -> String {
    let mut line = iteration.to_string();
    for b in blocks {
        for v in b.iter() {
            line.push(',');
            line.push_str(&v.to_string());
        }
    }
    line
}

/// Streams draws into a chain directory.
pub struct ChainWriter {
    dir: PathBuf,
    writers: Vec<BufWriter<File>>,
    manifest: ChainManifest,
}

impl ChainWriter {
    pub fn create(
        dir: &Path,
        layout: &ChainLayout,
        graph: &ArealGraph,
        settings: &SamplerSettings,
        meta: &ChainMeta,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let counts = layout.observed_counts();
        let headers = [
            vector_header("eta", &vec![layout.rank; layout.horizon]),
            vector_header("beta", &vec![layout.covariates; layout.horizon]),
            vector_header("xi", &counts),
            "iteration,sigma_k2".to_string(),
            std::iter::once("iteration".to_string())
                .chain((1..=layout.horizon).map(|t| format!("sigma_xi2_t{t}")))
                .collect::<Vec<_>>()
                .join(","),
        ];
        let mut writers = Vec::new();
        for (name, header) in CHAIN_FILES.iter().zip(headers) {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            writers.push(w);
        }

        let mut index = String::from("column,time,variable,unit\n");
        for (ti, locs) in layout.xi_locations.iter().enumerate() {
            for (k, loc) in locs.iter().enumerate() {
                index.push_str(&format!(
                    "xi_t{}_{},{},{},{}\n",
                    ti + 1,
                    k + 1,
                    ti + 1,
                    loc.variable,
                    graph.unit_name(loc.unit)
                ));
            }
        }
        let index_path = dir.join(XI_INDEX_FILE);
        std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;

        let manifest = ChainManifest {
            format_version: FORMAT_VERSION,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            complete: false,
            chain_index: meta.chain_index,
            settings: *settings,
            draws: 0,
            horizon: layout.horizon,
            rank: layout.rank,
            covariates: layout.covariates,
            observed_counts: counts,
            sweep_order: crate::sampler::SWEEP_ORDER.iter().map(|s| s.to_string()).collect(),
            move_kind: "gibbs".into(),
            propagator_mode: meta.propagator_mode,
            prior: meta.prior,
            hyper: meta.hyper.clone(),
            survey: meta.survey,
            files: BTreeMap::new(),
            op_stats: OpStats::default(),
        };
        let writer = Self {
            dir: dir.to_path_buf(),
            writers,
            manifest,
        };
        writer.write_manifest()?;
        Ok(writer)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Chain(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Flushes all files, records digests and operation counts and marks the run complete.
    pub fn finish(mut self, stats: OpStats) -> Result<ChainManifest> {
        self.flush()?;
        for name in CHAIN_FILES.iter().chain(std::iter::once(&XI_INDEX_FILE)) {
            self.manifest
                .files
                .insert(name.to_string(), file_digest(&self.dir.join(name))?);
        }
        self.manifest.op_stats = stats;
        self.manifest.complete = true;
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

impl DrawSink for ChainWriter {
    fn record(&mut self, iteration: usize, state: &ModelState) -> Result<()> {
        let sigma_xi2 = std::iter::once(iteration.to_string())
            .chain(state.sigma_xi2.iter().map(f64::to_string))
            .collect::<Vec<_>>()
            .join(",");
        let rows = [
            vector_row(iteration, &state.eta),
            vector_row(iteration, &state.beta),
            vector_row(iteration, &state.xi),
            format!("{iteration},{}", state.sigma_k2),
            sigma_xi2,
        ];
        for ((w, row), name) in self.writers.iter_mut().zip(rows).zip(CHAIN_FILES) {
            writeln!(w, "{row}").map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        self.manifest.draws += 1;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for (w, name) in self.writers.iter_mut().zip(CHAIN_FILES) {
            w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        Ok(())
    }
}

fn read_rows(path: &Path, expected_cols: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    if !path.exists() {
        return Err(Error::Chain(format!("missing chain file {}", path.display())));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Chain(format!("{}: {e}", path.display())))?;
    let header_len = reader.headers().map_err(|e| Error::Chain(e.to_string()))?.len();
    if header_len != expected_cols + 1 {
        return Err(Error::Chain(format!(
            "{}: expected {} columns, found {header_len}",
            path.display(),
            expected_cols + 1
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Chain(format!("{}: {e}", path.display())))?;
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Chain(format!("{}: row {}: cannot parse `{s}`", path.display(), i + 2)))
        };
        let iteration = record[0]
            .parse()
            .map_err(|_| Error::Chain(format!("{}: row {}: bad iteration", path.display(), i + 2)))?;
        let values = record.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        rows.push((iteration, values));
    }
    Ok(rows)
}

fn split(values: &[f64], dims: &[usize]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for d in dims {
        out.push(DVector::from_column_slice(&values[offset..offset + d]));
        offset += d;
    }
    out
}

/// Reads the manifest of a chain directory.
pub fn read_manifest(dir: &Path) -> Result<ChainManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Chain(format!("no chain manifest at {}", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ChainManifest =
        serde_json::from_str(&text).map_err(|e| Error::Chain(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Chain(format!(
            "chain format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a chain directory written by [`ChainWriter`].
pub fn read_chain(dir: &Path, graph: &ArealGraph) -> Result<(PosteriorChain, ChainManifest)> {
    let manifest = read_manifest(dir)?;
    if !manifest.complete {
        log::warn!(
            "chain at {} is incomplete; reading the draws written so far",
            dir.display()
        );
    }
    let index_path = dir.join(XI_INDEX_FILE);
    if !index_path.exists() {
        return Err(Error::Chain(format!("missing {}", index_path.display())));
    }
    let mut xi_locations = vec![Vec::new(); manifest.horizon];
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| Error::Chain(e.to_string()))?;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Chain(e.to_string()))?;
        let bad = || Error::Chain(format!("{}: malformed row", index_path.display()));
        let time: usize = record[1].parse().map_err(|_| bad())?;
        let variable: usize = record[2].parse().map_err(|_| bad())?;
        let unit = graph
            .unit_index(&record[3])
            .ok_or_else(|| Error::Chain(format!("chain refers to unknown unit `{}`", &record[3])))?;
        if time == 0 || time > manifest.horizon {
            return Err(bad());
        }
        xi_locations[time - 1].push(Location::new(variable, unit));
    }
    let layout = ChainLayout {
        horizon: manifest.horizon,
        rank: manifest.rank,
        covariates: manifest.covariates,
        xi_locations,
    };
    if layout.observed_counts() != manifest.observed_counts {
        return Err(Error::Chain("xi index does not match the manifest".into()));
    }

    let t = manifest.horizon;
    let eta = read_rows(&dir.join("eta.csv"), t * manifest.rank)?;
    let beta = read_rows(&dir.join("beta.csv"), t * manifest.covariates)?;
    let xi = read_rows(&dir.join("xi.csv"), manifest.observed_counts.iter().sum())?;
    let sigma_k2 = read_rows(&dir.join("sigma_k2.csv"), 1)?;
    let sigma_xi2 = read_rows(&dir.join("sigma_xi2.csv"), t)?;
    let n = [eta.len(), beta.len(), xi.len(), sigma_k2.len(), sigma_xi2.len()]
        .into_iter()
        .min()
        .unwrap_or(0);
    if manifest.complete
        && [eta.len(), beta.len(), xi.len(), sigma_k2.len(), sigma_xi2.len()]
            .iter()
            .any(|&l| l != n)
    {
        return Err(Error::Chain("chain files hold different numbers of draws".into()));
    }

    let mut chain = PosteriorChain::empty(manifest.settings, layout);
    for j in 0..n {
        let iteration = eta[j].0;
        if [beta[j].0, xi[j].0, sigma_k2[j].0, sigma_xi2[j].0]
            .iter()
            .any(|&i| i != iteration)
        {
            return Err(Error::Chain(format!("draw {j} has mismatched iteration indices")));
        }
        chain.draws.push(ModelState {
            eta: split(&eta[j].1, &vec![manifest.rank; t]),
            beta: split(&beta[j].1, &vec![manifest.covariates; t]),
            xi: split(&xi[j].1, &manifest.observed_counts),
            sigma_k2: sigma_k2[j].1[0],
            sigma_xi2: sigma_xi2[j].1.clone(),
        });
        chain.draw_iterations.push(iteration);
    }
    chain.stats = manifest.op_stats;
    Ok((chain, manifest))
}
