#![allow(dead_code)]

pub mod gaussian;

use mstm::basis::{BasisSystem, PropagatorMode};
use mstm::data::{ArealGraph, DesignMatrices, DesignRow, StudyDesign, VariableLinks};
use mstm::prior::{PriorOptions, PriorStructure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Rook-adjacency lattice with units named `u0`, `u1`, ...
pub fn lattice(rows: usize, cols: usize) -> ArealGraph {
    let mut edges = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let a = i * cols + j;
            if j + 1 < cols {
                edges.push((a, a + 1));
            }
            if i + 1 < rows {
                edges.push((a, a + cols));
            }
        }
    }
    ArealGraph::with_edges((0..rows * cols).map(|i| format!("u{i}")), edges).unwrap()
}

/// Covariate rows: intercept, a unit-level covariate, a time-varying wave and
/// further i.i.d. normal columns.
pub fn design_rows(study: &StudyDesign, units: usize, seed: u64) -> Vec<DesignRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1: Vec<f64> = (0..units).map(|_| rng.sample(StandardNormal)).collect();
    let p = study.covariates();
    let mut rows = Vec::new();
    for t in 1..=study.horizon() {
        for variable in 1..=study.variables() {
            if !study.is_active(variable, t) {
                continue;
            }
            for unit in 0..units {
                let mut x = vec![1.0];
                if p > 1 {
                    x.push(c1[unit]);
                }
                if p > 2 {
                    x.push((2.0 * c1[unit] + 0.5 * t as f64).sin());
                }
                while x.len() < p {
                    x.push(rng.sample(StandardNormal));
                }
                rows.push(DesignRow {
                    variable,
                    time: t,
                    unit,
                    x,
                });
            }
        }
    }
    rows
}

pub struct Problem {
    pub graph: ArealGraph,
    pub study: StudyDesign,
    pub design: DesignMatrices,
    pub basis: BasisSystem,
    pub prior: PriorStructure,
}

pub fn problem(variables: usize, horizon: usize, side: (usize, usize), p: usize, r: usize, seed: u64) -> Problem {
    problem_on(lattice(side.0, side.1), variables, horizon, p, r, seed)
}

/// Connected random graph: a random spanning tree plus each remaining pair with probability `extra`.
pub fn random_graph(n: usize, extra: f64, rng: &mut ChaCha8Rng) -> ArealGraph {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.contains(&(i, j)) && rng.random::<f64>() < extra {
                edges.push((i, j));
            }
        }
    }
    ArealGraph::with_edges((0..n).map(|i| format!("u{i}")), edges).unwrap()
}

pub fn problem_on(graph: ArealGraph, variables: usize, horizon: usize, p: usize, r: usize, seed: u64) -> Problem {
    let study = StudyDesign::uniform(variables, horizon, p, r).unwrap();
    let design = DesignMatrices::from_rows(design_rows(&study, graph.unit_count(), seed), &study, &graph).unwrap();
    let basis = BasisSystem::build(&design, &graph, r, PropagatorMode::Default, VariableLinks::SameUnit).unwrap();
    let prior = PriorStructure::build(&basis, &design, &graph, PriorOptions::default()).unwrap();
    Problem {
        graph,
        study,
        design,
        basis,
        prior,
    }
}
