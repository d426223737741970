//! Study design, areal adjacency, observations and covariates.
//!
//! Unit identifiers are opaque strings mapped to dense indices in first-seen
//! order. Variables and times keep their 1-based indices from the input files.

mod design;
mod graph;
mod observations;
mod transform;

pub use design::{assemble_design, DesignMatrices, DesignRow, StudyDesign, TimeSlice, TimeWindow};
pub use graph::{build_adjacency, read_units, ArealGraph, VariableLinks};
pub use observations::{load_observations, Observation, ObservationSet};
pub use transform::{apply_transform, TransformKind};

use serde::{Deserialize, Serialize};

/// A prediction location inside one time slice: variable `ℓ` at areal unit `unit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    /// 1-based variable index.
    pub variable: usize,
    /// Dense unit index into [`ArealGraph::units`].
    pub unit: usize,
}

impl Location {
    pub fn new(variable: usize, unit: usize) -> Self {
        Self { variable, unit }
    }
}

pub(crate) fn open_csv(path: &std::path::Path) -> crate::Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(crate::Error::MissingInput(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| crate::Error::parse(path, 0, e.to_string()))
}

pub(crate) fn check_header(
    path: &std::path::Path,
    reader: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
) -> crate::Result<Vec<String>> {
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| crate::Error::parse(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < expected.len() || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(crate::Error::parse(
            path,
            1,
            format!(
                "expected header starting with `{}`, found `{}`",
                expected.join(","),
                header.join(",")
            ),
        ));
    }
    Ok(header)
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    path: &std::path::Path,
    line: usize,
    name: &str,
    value: &str,
) -> crate::Result<T> {
    value
        .parse()
        .map_err(|_| crate::Error::parse(path, line, format!("cannot parse {name} from `{value}`")))
}
