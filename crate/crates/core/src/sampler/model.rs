//! Observed data arranged per time point for the sampler.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::data::{DesignMatrices, Location, ObservationSet};
use crate::linalg::{numerical_rank, symmetrize};
use crate::{Error, Result};

/// Observed locations of one time point.
///
/// Several surveys at the same location are combined into one
/// precision-weighted estimate: with `w = Σ_k 1/v_k` and `z̄ = Σ_k (z_k/v_k)/w`,
/// the likelihood of `Y` is that of `z̄ ~ N(Y, 1/w)`.
#[derive(Debug, Clone)]
pub struct TimeData {
    pub time: usize,
    /// Rows of `X_t` / `S_t` that are observed, ascending.
    pub rows: Vec<usize>,
    pub locations: Vec<Location>,
    pub z: DVector<f64>,
    pub precision: DVector<f64>,
    pub x: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// `S' W S` with `W = diag(precision)`.
    pub information: DMatrix<f64>,
}

impl TimeData {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `S' W y`.
    pub fn score(&self, y: &DVector<f64>) -> DVector<f64> {
        self.s.transpose() * y.component_mul(&self.precision)
    }
}

/// Where each ξ entry of a chain lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainLayout {
    pub horizon: usize,
    pub rank: usize,
    pub covariates: usize,
    /// Observed locations per time, index `t − 1`.
    pub xi_locations: Vec<Vec<Location>>,
}

impl ChainLayout {
    pub fn observed_counts(&self) -> Vec<usize> {
        self.xi_locations.iter().map(Vec::len).collect()
    }
}

/// Sampler input: observations aggregated per time and location, with the
/// observed rows of `X_t` and `S_t`.
#[derive(Debug, Clone)]
pub struct ModelData {
    times: Vec<TimeData>,
    rank: usize,
    covariates: usize,
}

impl ModelData {
    pub fn new(observations: &ObservationSet, design: &DesignMatrices, basis: &BasisSystem) -> Result<Self> {
        if basis.horizon() != design.horizon() {
            return Err(Error::Dimension(format!(
                "basis covers {} time points, design {}",
                basis.horizon(),
                design.horizon()
            )));
        }
        let p = design.covariates();
        let mut grouped: Vec<BTreeMap<usize, (Location, f64, f64)>> = vec![BTreeMap::new(); design.horizon()];
        for o in observations.observations() {
            if o.time == 0 || o.time > design.horizon() {
                return Err(Error::Validation(format!(
                    "observation at time {} outside 1..={}",
                    o.time,
                    design.horizon()
                )));
            }
            let slice = design.slice(o.time);
            let loc = Location::new(o.variable, o.unit);
            let row = slice.row_of(loc).ok_or_else(|| {
                Error::Validation(format!(
                    "observation (variable {}, time {}, unit index {}) has no covariate row",
                    o.variable, o.time, o.unit
                ))
            })?;
            let entry = grouped[o.time - 1].entry(row).or_insert((loc, 0.0, 0.0));
            entry.1 += 1.0 / o.v;
            entry.2 += o.z / o.v;
        }

        let mut times = Vec::with_capacity(design.horizon());
        for (ti, group) in grouped.into_iter().enumerate() {
            let t = ti + 1;
            let slice = design.slice(t);
            let s_full = basis.basis(t);
            let n = group.len();
            let rows: Vec<usize> = group.keys().copied().collect();
            let locations = group.values().map(|g| g.0).collect();
            let precision = DVector::from_iterator(n, group.values().map(|g| g.1));
            let z = DVector::from_iterator(n, group.values().map(|g| g.2 / g.1));
            let x = slice.x.select_rows(rows.iter());
            let s = s_full.select_rows(rows.iter());
            let rank = numerical_rank(&x);
            if rank < p {
                return Err(Error::Validation(format!(
                    "time {t}: the observed rows of X_t have rank {rank} < {p}, so β_t is not identified"
                )));
            }
            let mut weighted = s.clone();
            for (mut row, w) in weighted.row_iter_mut().zip(precision.iter()) {
                row *= *w;
            }
            let information = symmetrize(&(s.transpose() * weighted));
            times.push(TimeData {
                time: t,
                rows,
                locations,
                z,
                precision,
                x,
                s,
                information,
            });
        }
        Ok(Self {
            times,
            rank: basis.rank(),
            covariates: p,
        })
    }

    pub fn times(&self) -> &[TimeData] {
        &self.times
    }

    pub fn time(&self, t: usize) -> &TimeData {
        &self.times[t - 1]
    }

    pub fn horizon(&self) -> usize {
        self.times.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn covariates(&self) -> usize {
        self.covariates
    }

    pub fn layout(&self) -> ChainLayout {
        ChainLayout {
            horizon: self.horizon(),
            rank: self.rank,
            covariates: self.covariates,
            xi_locations: self.times.iter().map(|t| t.locations.clone()).collect(),
        }
    }
}
