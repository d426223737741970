use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_header, open_csv, parse_field, ArealGraph, Location};
use crate::linalg::numerical_rank;
use crate::{Error, Result};

/// Inclusive observation window `[lower, upper]` of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub lower: usize,
    pub upper: usize,
}

impl TimeWindow {
    pub fn new(lower: usize, upper: usize) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.lower <= t && t <= self.upper
    }
}

/// Number of variables, their time windows, covariate dimension `p` and basis rank `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    windows: Vec<TimeWindow>,
    covariates: usize,
    rank: usize,
}

impl StudyDesign {
    pub fn new(windows: Vec<TimeWindow>, covariates: usize, rank: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Validation("study design needs at least one variable".into()));
        }
        for (l, w) in windows.iter().enumerate() {
            if w.lower == 0 || w.lower > w.upper {
                return Err(Error::Validation(format!(
                    "variable {}: invalid time window [{}, {}]",
                    l + 1,
                    w.lower,
                    w.upper
                )));
            }
        }
        if windows.iter().map(|w| w.lower).min() != Some(1) {
            return Err(Error::Validation("the earliest time window must start at t = 1".into()));
        }
        if covariates == 0 {
            return Err(Error::Validation("covariate dimension p must be at least 1".into()));
        }
        if rank == 0 {
            return Err(Error::Validation("basis rank r must be at least 1".into()));
        }
        Ok(Self {
            windows,
            covariates,
            rank,
        })
    }

    /// Same window `[1, horizon]` for every variable.
    pub fn uniform(variables: usize, horizon: usize, covariates: usize, rank: usize) -> Result<Self> {
        Self::new(vec![TimeWindow::new(1, horizon); variables], covariates, rank)
    }

    pub fn variables(&self) -> usize {
        self.windows.len()
    }

    /// `T`, the largest upper window bound.
    pub fn horizon(&self) -> usize {
        self.windows.iter().map(|w| w.upper).max().unwrap_or(0)
    }

    pub fn covariates(&self) -> usize {
        self.covariates
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn windows(&self) -> &[TimeWindow] {
        &self.windows
    }

    pub fn is_active(&self, variable: usize, t: usize) -> bool {
        variable >= 1 && variable <= self.windows.len() && self.windows[variable - 1].contains(t)
    }
}

/// One covariate row for a prediction location.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub variable: usize,
    pub time: usize,
    pub unit: usize,
    pub x: Vec<f64>,
}

/// The prediction locations `D_{P,t}` and covariate matrix `X_t` of one time point.
#[derive(Debug, Clone)]
pub struct TimeSlice {
    pub time: usize,
    /// Locations ordered by `(variable, unit)`; row `i` of `x` belongs to `locations[i]`.
    pub locations: Vec<Location>,
    pub x: DMatrix<f64>,
    rows: HashMap<Location, usize>,
}

impl TimeSlice {
    pub fn row_of(&self, location: Location) -> Option<usize> {
        self.rows.get(&location).copied()
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Stacked covariates `X_1, ..., X_T`.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    slices: Vec<TimeSlice>,
    covariates: usize,
    intercept_column: usize,
}

impl DesignMatrices {
    /// Validates and stacks covariate rows.
    ///
    /// Rejects rows outside the variable's window, duplicates, a variable/time
    /// pair with no rows, designs without an exact-ones intercept column and
    /// rank-deficient `X_t`.
    pub fn from_rows(rows: Vec<DesignRow>, design: &StudyDesign, graph: &ArealGraph) -> Result<Self> {
        let p = design.covariates();
        let horizon = design.horizon();
        let mut per_time: Vec<BTreeMap<Location, Vec<f64>>> = vec![BTreeMap::new(); horizon];
        for row in rows {
            if !design.is_active(row.variable, row.time) {
                return Err(Error::Validation(format!(
                    "covariate row for variable {} at time {} lies outside the study design",
                    row.variable, row.time
                )));
            }
            if row.unit >= graph.unit_count() {
                return Err(Error::Validation(format!(
                    "covariate row refers to unknown unit index {}",
                    row.unit
                )));
            }
            if row.x.len() != p {
                return Err(Error::Validation(format!(
                    "covariate row has {} values, expected p = {p}",
                    row.x.len()
                )));
            }
            if row.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "covariates for variable {} unit `{}` at time {}",
                    row.variable,
                    graph.unit_name(row.unit),
                    row.time
                )));
            }
            let loc = Location::new(row.variable, row.unit);
            if per_time[row.time - 1].insert(loc, row.x).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate covariate row (variable {}, time {}, unit `{}`)",
                    row.variable,
                    row.time,
                    graph.unit_name(row.unit)
                )));
            }
        }

        let mut slices = Vec::with_capacity(horizon);
        for (ti, rows) in per_time.into_iter().enumerate() {
            let t = ti + 1;
            for variable in 1..=design.variables() {
                if design.is_active(variable, t) && !rows.keys().any(|l| l.variable == variable) {
                    return Err(Error::Validation(format!(
                        "missing covariate rows for variable {variable} at time {t}"
                    )));
                }
            }
            let locations: Vec<Location> = rows.keys().copied().collect();
            let x = DMatrix::from_fn(locations.len(), p, |i, j| rows[&locations[i]][j]);
            let rows = locations.iter().enumerate().map(|(i, l)| (*l, i)).collect();
            slices.push(TimeSlice {
                time: t,
                locations,
                x,
                rows,
            });
        }

        let intercept_column = (0..p)
            .find(|&j| slices.iter().all(|s| s.x.column(j).iter().all(|&v| v == 1.0)))
            .ok_or_else(|| {
                Error::Validation("the design needs an intercept column of exact ones at every time".into())
            })?;

        for slice in &slices {
            let rank = numerical_rank(&slice.x);
            if rank < p {
                return Err(Error::RankDeficient {
                    time: slice.time,
                    rank,
                    columns: p,
                });
            }
        }

        let max_rank = slices.iter().map(|s| s.len() - p).min().unwrap_or(0);
        if design.rank() > max_rank {
            return Err(Error::RankTooLarge {
                requested: design.rank(),
                max: max_rank,
            });
        }

        Ok(Self {
            slices,
            covariates: p,
            intercept_column,
        })
    }

    pub fn slices(&self) -> &[TimeSlice] {
        &self.slices
    }

    /// Slice for 1-based time `t`.
    pub fn slice(&self, t: usize) -> &TimeSlice {
        &self.slices[t - 1]
    }

    pub fn horizon(&self) -> usize {
        self.slices.len()
    }

    pub fn covariates(&self) -> usize {
        self.covariates
    }

    pub fn intercept_column(&self) -> usize {
        self.intercept_column
    }

    /// Total number of prediction locations `N`.
    pub fn total_locations(&self) -> usize {
        self.slices.iter().map(TimeSlice::len).sum()
    }
}

/// Reads `variable,time,unit,x1,...,xp` and stacks the design.
pub fn assemble_design(path: &Path, design: &StudyDesign, graph: &ArealGraph) -> Result<DesignMatrices> {
    let mut reader = open_csv(path)?;
    let header = check_header(path, &mut reader, &["variable", "time", "unit"])?;
    let p = header.len() - 3;
    if p != design.covariates() {
        return Err(Error::parse(
            path,
            1,
            format!(
                "found {p} covariate columns, design declares p = {}",
                design.covariates()
            ),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, 0, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::parse(path, line, format!("expected {} fields", header.len())));
        }
        let variable: usize = parse_field(path, line, "variable", &record[0])?;
        let time: usize = parse_field(path, line, "time", &record[1])?;
        let unit = graph
            .unit_index(&record[2])
            .ok_or_else(|| Error::parse(path, line, format!("unknown unit `{}`", &record[2])))?;
        let x = (0..p)
            .map(|j| parse_field(path, line, &header[3 + j], &record[3 + j]))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(DesignRow {
            variable,
            time,
            unit,
            x,
        });
    }
    DesignMatrices::from_rows(rows, design, graph)
}
