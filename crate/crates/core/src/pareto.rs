//! Pareto dominance, archives, exhaustive reference fronts and ADRS.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::designspace::DesignConfiguration;
use crate::oracle::{Oracle, QorMetrics, Resources};

pub const DEFAULT_EXHAUSTIVE_LIMIT: u128 = 100_000;

#[derive(Debug, Error)]
pub enum ParetoError {
    #[error("objective vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error(
        "space of {size} configurations exceeds the exhaustive limit {limit}; use sampling instead"
    )]
    TooLarge { size: u128, limit: u128 },
    #[error("no feasible configuration in the space")]
    NoFeasible,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Which objectives a front is built over. All are minimised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Latency and the largest resource utilisation.
    #[default]
    LatencyMaxUtil,
    /// Latency plus one utilisation per resource.
    Full,
}

impl ObjectiveMode {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            ObjectiveMode::LatencyMaxUtil => &["latency", "max_util"],
            ObjectiveMode::Full => &["latency", "lut_util", "dsp_util", "ff_util", "bram_util"],
        }
    }

    pub fn objectives(self, m: &QorMetrics, capacities: &Resources) -> Vec<f64> {
        let lat = m.latency_cycles as f64;
        match self {
            ObjectiveMode::LatencyMaxUtil => vec![lat, m.max_utilization(capacities)],
            ObjectiveMode::Full => {
                let mut v = vec![lat];
                v.extend(
                    m.resources()
                        .as_array()
                        .iter()
                        .zip(capacities.as_array())
                        .map(|(&x, c)| x as f64 / c as f64),
                );
                v
            }
        }
    }
}

/// `a` is no worse everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool, ParetoError> {
    if a.len() != b.len() {
        return Err(ParetoError::LengthMismatch(a.len(), b.len()));
    }
    Ok(dominates_unchecked(a, b))
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub config: DesignConfiguration,
    pub objectives: Vec<f64>,
}

/// Mutually non-dominated points with distinct configurations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParetoArchive {
    entries: Vec<ArchiveEntry>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn objectives(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.objectives.clone()).collect()
    }

    pub fn contains(&self, cfg: &DesignConfiguration) -> bool {
        self.entries.iter().any(|e| &e.config == cfg)
    }

    /// Returns whether the candidate was accepted. Accepting removes every
    /// member it dominates.
    pub fn insert(&mut self, config: DesignConfiguration, objectives: Vec<f64>) -> bool {
        for e in &self.entries {
            if e.config == config || dominates_unchecked(&e.objectives, &objectives) {
                return false;
            }
        }
        self.entries
            .retain(|e| !dominates_unchecked(&objectives, &e.objectives));
        self.entries.push(ArchiveEntry { config, objectives });
        true
    }

    /// Entries sorted by objectives then configuration, for stable output.
    pub fn sorted(&self) -> Vec<ArchiveEntry> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| {
            a.objectives
                .partial_cmp(&b.objectives)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.config.cmp(&b.config))
        });
        v
    }
}

/// Functional form of [`ParetoArchive::insert`].
pub fn archive_insert(
    archive: &ParetoArchive,
    config: DesignConfiguration,
    objectives: Vec<f64>,
) -> (ParetoArchive, bool) {
    let mut next = archive.clone();
    let accepted = next.insert(config, objectives);
    (next, accepted)
}

/// Exhaustive front of the feasible configurations.
pub fn reference_front(
    oracle: &Oracle,
    mode: ObjectiveMode,
    limit: u128,
) -> Result<ParetoArchive, ParetoError> {
    let space = oracle.space();
    let size = space.size();
    if size > limit {
        return Err(ParetoError::TooLarge { size, limit });
    }
    let caps = oracle.model().capacities;
    let mut points = Vec::new();
    for i in 0..size {
        let cfg = space.config_at(i);
        let m = oracle.evaluate_unchecked(&cfg);
        if m.feasible {
            points.push((mode.objectives(&m, &caps), cfg));
        }
    }
    if points.is_empty() {
        return Err(ParetoError::NoFeasible);
    }
    // lexicographic order means no later point dominates an earlier one
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    let mut archive = ParetoArchive::new();
    for (obj, cfg) in points {
        if !archive
            .entries
            .iter()
            .any(|e| dominates_unchecked(&e.objectives, &obj))
        {
            archive.entries.push(ArchiveEntry {
                config: cfg,
                objectives: obj,
            });
        }
    }
    Ok(archive)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdrsReport {
    pub adrs: f64,
    pub reference_size: usize,
    pub approx_size: usize,
    pub distances: Vec<f64>,
}

fn gap(lambda: &[f64], mu: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(mu)
        .map(|(&l, &m)| {
            if l == 0.0 {
                (m - l).max(0.0)
            } else {
                ((m - l) / l).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Mean over reference points of the smallest worst-coordinate relative
/// gap to any approximate point.
pub fn adrs(reference: &[Vec<f64>], approx: &[Vec<f64>]) -> Result<AdrsReport, ParetoError> {
    if reference.is_empty() {
        return Err(ParetoError::Empty("reference"));
    }
    if approx.is_empty() {
        return Err(ParetoError::Empty("approximate"));
    }
    let m = reference[0].len();
    for v in reference.iter().chain(approx) {
        if v.len() != m {
            return Err(ParetoError::LengthMismatch(m, v.len()));
        }
    }
    let distances: Vec<f64> = reference
        .iter()
        .map(|l| {
            approx
                .iter()
                .map(|mu| gap(l, mu))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(AdrsReport {
        adrs: distances.iter().sum::<f64>() / distances.len() as f64,
        reference_size: reference.len(),
        approx_size: approx.len(),
        distances,
    })
}

/// Writes `config_hash` plus one column per objective.
pub fn write_front_csv(
    path: &Path,
    archive: &ParetoArchive,
    mode: ObjectiveMode,
    hash: impl Fn(&DesignConfiguration) -> String,
) -> Result<(), ParetoError> {
    let err = |e: csv::Error| ParetoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["config_hash"];
    header.extend(mode.names());
    w.write_record(&header).map_err(err)?;
    for e in archive.sorted() {
        let mut row = vec![hash(&e.config)];
        row.extend(e.objectives.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| ParetoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
