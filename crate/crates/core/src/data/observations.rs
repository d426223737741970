use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use super::{
    apply_transform, check_header, open_csv, parse_field, ArealGraph, DesignMatrices, StudyDesign, TransformKind,
};
use crate::{Error, Result};

/// One survey estimate on the modeling (transformed) scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub variable: usize,
    pub time: usize,
    pub unit: usize,
    /// 1-based survey index; files without a `survey` column use 1.
    pub survey: usize,
    pub z: f64,
    /// Known measurement-error variance, strictly positive.
    pub v: f64,
}

/// Validated observations with per-time counts `n_t`.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    observations: Vec<Observation>,
    counts: Vec<usize>,
}

impl ObservationSet {
    pub fn new(observations: Vec<Observation>, design: &StudyDesign, graph: &ArealGraph) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut counts = vec![0; design.horizon()];
        for o in &observations {
            let key = describe(o, graph);
            if !design.is_active(o.variable, o.time) {
                return Err(Error::Validation(format!(
                    "observation {key} lies outside the study design"
                )));
            }
            if o.unit >= graph.unit_count() {
                return Err(Error::Validation(format!(
                    "observation refers to unknown unit index {}",
                    o.unit
                )));
            }
            if o.survey == 0 {
                return Err(Error::Validation(format!(
                    "observation {key}: survey indices start at 1"
                )));
            }
            if !o.z.is_finite() || !o.v.is_finite() {
                return Err(Error::NonFinite(format!("observation {key}")));
            }
            if o.v <= 0.0 {
                return Err(Error::Validation(format!(
                    "observation {key}: nonpositive variance {}",
                    o.v
                )));
            }
            if !seen.insert((o.variable, o.time, o.unit, o.survey)) {
                return Err(Error::Validation(format!("duplicate observation {key}")));
            }
            counts[o.time - 1] += 1;
        }
        Ok(Self { observations, counts })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// `n_t` for 1-based `t`.
    pub fn count_at(&self, t: usize) -> usize {
        self.counts[t - 1]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `n = Σ_t n_t`.
    pub fn total(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn surveys(&self) -> BTreeSet<usize> {
        self.observations.iter().map(|o| o.survey).collect()
    }

    /// Keeps only the observations of one survey.
    pub fn survey_subset(&self, survey: usize) -> Self {
        let observations: Vec<_> = self
            .observations
            .iter()
            .copied()
            .filter(|o| o.survey == survey)
            .collect();
        let mut counts = vec![0; self.counts.len()];
        for o in &observations {
            counts[o.time - 1] += 1;
        }
        Self { observations, counts }
    }

    /// Checks `D_{O,t} ⊆ D_{P,t}`: every observed location has a covariate row.
    pub fn check_against(&self, design: &DesignMatrices, graph: &ArealGraph) -> Result<()> {
        for o in &self.observations {
            if o.time > design.horizon()
                || design
                    .slice(o.time)
                    .row_of(super::Location::new(o.variable, o.unit))
                    .is_none()
            {
                return Err(Error::Validation(format!(
                    "observation {} is not a prediction location (no covariate row)",
                    describe(o, graph)
                )));
            }
        }
        Ok(())
    }
}

fn describe(o: &Observation, graph: &ArealGraph) -> String {
    let unit = graph.units().get(o.unit).map_or("?", String::as_str);
    format!(
        "(variable {}, time {}, unit `{}`, survey {})",
        o.variable, o.time, unit, o.survey
    )
}

/// Reads `variable,time,unit,z,v[,survey]`.
///
/// When a variable has a non-identity transform the file holds raw estimates and
/// their variances, which are transformed here with the delta method.
pub fn load_observations(
    path: &Path,
    design: &StudyDesign,
    graph: &ArealGraph,
    transforms: &[TransformKind],
) -> Result<ObservationSet> {
    let mut reader = open_csv(path)?;
    let header = check_header(path, &mut reader, &["variable", "time", "unit", "z", "v"])?;
    let has_survey = match header.len() {
        5 => false,
        6 if header[5] == "survey" => true,
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("unexpected columns after `v`: {}", header[5..].join(",")),
            ))
        }
    };
    let mut observations = Vec::new();
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
        let raw_z: f64 = parse_field(path, line, "z", &record[3])?;
        let raw_v: f64 = parse_field(path, line, "v", &record[4])?;
        let survey = if has_survey {
            parse_field(path, line, "survey", &record[5])?
        } else {
            1
        };
        if raw_v <= 0.0 {
            return Err(Error::parse(path, line, format!("nonpositive variance {raw_v}")));
        }
        if !design.is_active(variable, time) {
            return Err(Error::parse(
                path,
                line,
                format!("variable {variable} is not observed at time {time} under the study design"),
            ));
        }
        let kind = transforms.get(variable - 1).copied().unwrap_or_default();
        let (z, v) = apply_transform(raw_z, raw_v, kind).map_err(|e| Error::parse(path, line, e.to_string()))?;
        observations.push(Observation {
            variable,
            time,
            unit,
            survey,
            z,
            v,
        });
    }
    ObservationSet::new(observations, design, graph).map_err(|e| Error::parse(path, 0, e.to_string()))
}
