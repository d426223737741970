use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_header, open_csv, Location};
use crate::{Error, Result};

/// How locations of different variables are joined in the location-level adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariableLinks {
    /// `(ℓ, A)` and `(ℓ', A)` are neighbors for `ℓ != ℓ'`.
    #[default]
    SameUnit,
    /// Only same-variable locations are ever adjacent.
    None,
}

/// Areal units and their (time-invariant) symmetric adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct ArealGraph {
    units: Vec<String>,
    index: HashMap<String, usize>,
    neighbors: Vec<BTreeSet<usize>>,
}

impl ArealGraph {
    pub fn new<S: Into<String>>(units: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut graph = ArealGraph {
            units: Vec::new(),
            index: HashMap::new(),
            neighbors: Vec::new(),
        };
        for unit in units {
            let unit = unit.into();
            if graph.index.contains_key(&unit) {
                return Err(Error::Validation(format!("duplicate unit `{unit}`")));
            }
            graph.index.insert(unit.clone(), graph.units.len());
            graph.units.push(unit);
            graph.neighbors.push(BTreeSet::new());
        }
        Ok(graph)
    }

    /// Builds a graph from unit names and index pairs; the symmetric closure is applied.
    pub fn with_edges<S: Into<String>>(
        units: impl IntoIterator<Item = S>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut graph = Self::new(units)?;
        for (a, b) in edges {
            graph.add_edge(a, b)?;
        }
        Ok(graph)
    }

    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        let n = self.units.len();
        if a >= n || b >= n {
            return Err(Error::Validation(format!(
                "edge ({a}, {b}) refers to an undeclared unit ({n} units declared)"
            )));
        }
        if a == b {
            return Err(Error::Validation(format!("self-loop on unit `{}`", self.units[a])));
        }
        self.neighbors[a].insert(b);
        self.neighbors[b].insert(a);
        Ok(())
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn unit_name(&self, index: usize) -> &str {
        &self.units[index]
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].contains(&b)
    }

    pub fn degree(&self, a: usize) -> usize {
        self.neighbors[a].len()
    }

    /// Edge list with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, nb)| nb.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    /// Unit-level 0/1 adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.units.len();
        let mut a = DMatrix::zeros(n, n);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// Adjacency among the given prediction locations (the `A_t` of one time slice).
    pub fn location_adjacency(&self, locations: &[Location], links: VariableLinks) -> DMatrix<f64> {
        let n = locations.len();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let (li, lj) = (locations[i], locations[j]);
                let linked = if li.variable == lj.variable {
                    self.are_adjacent(li.unit, lj.unit)
                } else {
                    links == VariableLinks::SameUnit && li.unit == lj.unit
                };
                if linked {
                    a[(i, j)] = 1.0;
                    a[(j, i)] = 1.0;
                }
            }
        }
        a
    }
}

/// Reads a unit list (`unit` header, one identifier per line).
pub fn read_units(path: &Path) -> Result<Vec<String>> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &["unit"])?;
    let mut units = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, 0, e.to_string()))?;
        units.push(record[0].to_string());
    }
    Ok(units)
}

/// Reads an `unit_a,unit_b` edge file over the declared units.
pub fn build_adjacency(path: &Path, units: &[String]) -> Result<ArealGraph> {
    let mut graph = ArealGraph::new(units.iter().cloned())?;
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &["unit_a", "unit_b"])?;
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, 0, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(Error::parse(path, line, "expected two columns"));
        }
        let lookup = |id: &str| {
            graph
                .unit_index(id)
                .ok_or_else(|| Error::parse(path, line, format!("unknown unit `{id}`")))
        };
        let a = lookup(&record[0])?;
        let b = lookup(&record[1])?;
        if a == b {
            return Err(Error::parse(path, line, format!("self-loop on unit `{}`", &record[0])));
        }
        graph.add_edge(a, b)?;
    }
    Ok(graph)
}
