//! Attack grids over datasets, with JSON/CSV reports and SVG figures.

mod gradsuite;
mod report;
mod svg;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_loss, run_attack, AttackConfig, AttackKind, AttackResult};
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::pointcloud::ScenePair;
use crate::seed::{derive_seed, short_digest};

pub use gradsuite::{check_estimator, gradcheck_suite, GradcheckEntry, GradcheckSuite, SUITE_POINTS};
pub use report::{csv_string, format_sig, json_string, write_report, CSV_HEADER};
pub use svg::{render_flow_svg, SvgOptions};

/// How AEPE is aggregated; recorded in every report.
pub const AEPE_RULE: &str = "mean over pairs of the per-pair mean end-point error";

/// One cell type of an experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub attack: AttackKind,
    #[serde(flatten)]
    pub config: AttackConfig,
}

impl GridEntry {
    pub fn new(attack: AttackKind, config: AttackConfig) -> Self {
        GridEntry { attack, config }
    }

    pub fn validate(&self) -> Result<()> {
        match self.attack {
            AttackKind::None => Ok(()),
            _ => self.config.validate(),
        }
    }

    /// Stable digest of the entry's JSON form.
    pub fn digest(&self) -> String {
        short_digest(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    fn iters(&self) -> usize {
        match self.attack {
            AttackKind::None => 0,
            AttackKind::Pgd => self.config.iters,
            AttackKind::Fgsm | AttackKind::Random => 1,
        }
    }

    fn alpha(&self) -> f64 {
        match self.attack {
            AttackKind::None | AttackKind::Random => 0.0,
            AttackKind::Fgsm => self.config.eps,
            AttackKind::Pgd => self.config.resolved_alpha(),
        }
    }

    fn eps(&self) -> f64 {
        match self.attack {
            AttackKind::None => 0.0,
            _ => self.config.eps,
        }
    }
}

/// Parses a grid file: a JSON list of attack configurations, each with an
/// `attack` tag.
pub fn parse_grid(text: &str) -> Result<Vec<GridEntry>> {
    let grid: Vec<GridEntry> = serde_json::from_str(text)?;
    if grid.is_empty() {
        return Err(Error::Validation("grid is empty".into()));
    }
    for (i, e) in grid.iter().enumerate() {
        e.validate()
            .map_err(|err| Error::Validation(format!("grid entry {i}: {err}")))?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub pair_id: String,
    pub estimator: String,
    pub attack: AttackKind,
    pub mask: String,
    pub eps: f64,
    pub iters: usize,
    pub alpha: f64,
    pub seed: u64,
    pub epe_before: f64,
    pub epe_after: f64,
    /// `None` when the unattacked EPE is zero.
    pub rel: Option<f64>,
    /// Wall time of the attack; zero unless timings were requested.
    pub ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimator: String,
    pub attack: AttackKind,
    pub mask: String,
    pub eps: f64,
    pub iters: usize,
    pub alpha: f64,
    pub pairs: usize,
    pub aepe_before: f64,
    pub aepe_after: f64,
    pub rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Empty for diagnostics about a whole group.
    pub pair_id: String,
    pub attack: AttackKind,
    pub mask: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub estimator: String,
    pub pairs: usize,
    pub aepe_rule: String,
    pub grid: Vec<GridEntry>,
    /// Unix start time in seconds, only when timings were requested.
    pub started_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub records: Vec<ExperimentRecord>,
    pub aggregates: Vec<Aggregate>,
    pub diagnostics: Vec<Diagnostic>,
}

/// `(after - before) / before`, undefined for `before == 0`.
pub fn relative_degradation(before: f64, after: f64) -> Option<f64> {
    (before != 0.0).then(|| (after - before) / before)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Worker threads; 1 is the reproducibility baseline.
    pub jobs: usize,
    /// Measure per-record wall time and stamp the start time.
    pub timings: bool,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions {
            seed,
            jobs: 1,
            timings: false,
        }
    }
}

/// Seed of one (pair, grid entry) cell.
pub fn cell_seed(base: u64, pair_id: &str, entry: &GridEntry) -> u64 {
    derive_seed(base, &[pair_id.as_bytes(), entry.digest().as_bytes()])
}

enum Cell {
    Record(ExperimentRecord),
    Failed(Diagnostic),
}

fn record(
    pair: &ScenePair,
    before: f64,
    result: &AttackResult,
    entry: &GridEntry,
    label: &str,
    seed: u64,
    ms: u64,
) -> ExperimentRecord {
    let (epe_after, rel) = match entry.attack {
        AttackKind::None => (before, Some(0.0)),
        _ => (result.loss_after, relative_degradation(before, result.loss_after)),
    };
    ExperimentRecord {
        pair_id: pair.id.clone(),
        estimator: label.to_string(),
        attack: entry.attack,
        mask: entry.config.mask.to_string(),
        eps: entry.eps(),
        iters: entry.iters(),
        alpha: entry.alpha(),
        seed,
        epe_before: before,
        epe_after,
        rel,
        ms,
    }
}

fn timed_attack(
    pair: &ScenePair,
    est: &dyn Estimator,
    entry: &GridEntry,
    seed: u64,
    timings: bool,
) -> (Result<AttackResult>, u64) {
    let start = Instant::now();
    let outcome = run_attack(entry.attack, pair, est, &entry.config, seed);
    let ms = if timings {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    (outcome, ms)
}

fn run_cell(
    pair: &ScenePair,
    before: f64,
    est: &dyn Estimator,
    label: &str,
    entry: &GridEntry,
    opts: &RunOptions,
) -> Cell {
    let seed = cell_seed(opts.seed, &pair.id, entry);
    match timed_attack(pair, est, entry, seed, opts.timings) {
        (Ok(r), ms) => Cell::Record(record(pair, before, &r, entry, label, seed, ms)),
        (Err(e), _) => Cell::Failed(Diagnostic {
            pair_id: pair.id.clone(),
            attack: entry.attack,
            mask: entry.config.mask.to_string(),
            message: e.to_string(),
        }),
    }
}

fn start_stamp(opts: &RunOptions) -> Option<u64> {
    opts.timings.then(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    })
}

fn assemble(
    grid: &[GridEntry],
    records: Vec<ExperimentRecord>,
    mut diagnostics: Vec<Diagnostic>,
    label: String,
    pairs: usize,
    opts: &RunOptions,
    started_unix: Option<u64>,
) -> Report {
    let aggregates = aggregate(grid, &records, &label, &mut diagnostics);
    Report {
        provenance: Provenance {
            tool: "sfattack".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: opts.seed,
            estimator: label,
            pairs,
            aepe_rule: AEPE_RULE.into(),
            grid: grid.to_vec(),
            started_unix,
        },
        records,
        aggregates,
        diagnostics,
    }
}

/// Attacks a single pair and returns the adversarial result with its
/// one-record report. Unlike [`run_experiment`], a failing attack is an error.
pub fn attack_pair(
    pair: &ScenePair,
    est: &dyn Estimator,
    entry: &GridEntry,
    opts: &RunOptions,
) -> Result<(Report, AttackResult)> {
    entry.validate()?;
    let started_unix = start_stamp(opts);
    let label = est.label();
    let seed = cell_seed(opts.seed, &pair.id, entry);
    let (result, ms) = timed_attack(pair, est, entry, seed, opts.timings);
    let result = result?;
    let rec = record(pair, result.loss_before, &result, entry, &label, seed, ms);
    let report = assemble(&[*entry], vec![rec], vec![], label, 1, opts, started_unix);
    Ok((report, result))
}

/// Runs every grid entry on every pair.
///
/// The unattacked EPE is computed once per pair. A failing cell becomes a
/// diagnostic instead of a record. Records are sorted by pair id and grid
/// position, and aggregates are accumulated in that order, so the report
/// does not depend on dataset order or thread count.
pub fn run_experiment(
    dataset: &[ScenePair],
    est: &dyn Estimator,
    grid: &[GridEntry],
    opts: &RunOptions,
) -> Result<Report> {
    if grid.is_empty() {
        return Err(Error::Validation("grid is empty".into()));
    }
    for entry in grid {
        entry.validate()?;
    }
    let mut pairs: Vec<&ScenePair> = dataset.iter().collect();
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = pairs.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Validation(format!("duplicate pair id '{}'", w[0].id)));
    }
    for p in &pairs {
        p.require_gt()?;
    }
    let started_unix = start_stamp(opts);
    let label = est.label();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;

    let (cells, mut diagnostics) = pool.install(|| {
        let befores: Vec<Result<f64>> = pairs.par_iter().map(|p| attack_loss(p, est)).collect();
        let mut diagnostics = Vec::new();
        let mut jobs = Vec::new();
        for (p, before) in pairs.iter().zip(befores) {
            match before {
                Ok(b) => jobs.extend(grid.iter().map(|e| (*p, b, e))),
                Err(err) => diagnostics.extend(grid.iter().map(|e| Diagnostic {
                    pair_id: p.id.clone(),
                    attack: e.attack,
                    mask: e.config.mask.to_string(),
                    message: format!("unattacked estimate failed: {err}"),
                })),
            }
        }
        let cells: Vec<Cell> = jobs
            .par_iter()
            .map(|(p, b, e)| run_cell(p, *b, est, &label, e, opts))
            .collect();
        (cells, diagnostics)
    });

    let mut records = Vec::new();
    for cell in cells {
        match cell {
            Cell::Record(r) => records.push(r),
            Cell::Failed(d) => diagnostics.push(d),
        }
    }
    Ok(assemble(grid, records, diagnostics, label, pairs.len(), opts, started_unix))
}

type GroupKey = (AttackKind, String, u64, usize, u64);

fn group_key(attack: AttackKind, mask: &str, eps: f64, iters: usize, alpha: f64) -> GroupKey {
    (attack, mask.to_string(), eps.to_bits(), iters, alpha.to_bits())
}

/// One aggregate per distinct grid setting, in grid order. Empty groups are
/// skipped.
fn aggregate(
    grid: &[GridEntry],
    records: &[ExperimentRecord],
    label: &str,
    diagnostics: &mut Vec<Diagnostic>,
) -> Vec<Aggregate> {
    let mut groups: BTreeMap<GroupKey, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(group_key(r.attack, &r.mask, r.eps, r.iters, r.alpha))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for e in grid {
        let mask = e.config.mask.to_string();
        let key = group_key(e.attack, &mask, e.eps(), e.iters(), e.alpha());
        if !seen.insert(key.clone()) {
            continue;
        }
        let Some(members) = groups.get(&key) else {
            continue;
        };
        let n = members.len() as f64;
        let before = members.iter().map(|r| r.epe_before).sum::<f64>() / n;
        let after = members.iter().map(|r| r.epe_after).sum::<f64>() / n;
        let rel = match e.attack {
            AttackKind::None => Some(0.0),
            _ => relative_degradation(before, after),
        };
        if rel.is_none() {
            diagnostics.push(Diagnostic {
                pair_id: String::new(),
                attack: e.attack,
                mask: mask.clone(),
                message: "aepe_before is zero; rel is undefined".into(),
            });
        }
        out.push(Aggregate {
            estimator: label.to_string(),
            attack: e.attack,
            mask,
            eps: e.eps(),
            iters: e.iters(),
            alpha: e.alpha(),
            pairs: members.len(),
            aepe_before: before,
            aepe_after: after,
            rel,
        });
    }
    out
}
