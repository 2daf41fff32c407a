//! Repeated-sampling coverage runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CellQuery, SampleSet, TierLabel};
use crate::error::{Error, Result};
use crate::hb::{fit_models, HbConfig, McmcConfig};
use crate::phie::classify_cell;
use crate::report::{analyze, InferenceOptions, IntervalReport};
use crate::seed;

use super::population::SyntheticFrame;
use super::sample::draw_stratified_sample;

fn default_replications() -> usize {
    200
}
fn default_fraction() -> f64 {
    0.05
}

/// Monte Carlo settings. `mcmc.seed` is ignored: every replication derives
/// its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_fraction")]
    pub sampling_fraction: f64,
    #[serde(default = "reduced_mcmc")]
    pub mcmc: McmcConfig,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub cells: Vec<CellQuery>,
    #[serde(skip, default = "empty_hb")]
    pub hb: HbConfig,
    #[serde(skip)]
    pub inference: InferenceOptions,
}

fn reduced_mcmc() -> McmcConfig {
    McmcConfig::reduced(0)
}

fn empty_hb() -> HbConfig {
    HbConfig {
        models: Default::default(),
        intercept: true,
        rhat_threshold: 1.2,
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("simulation.replications must be >= 1".into()));
        }
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "simulation.sampling_fraction must be in (0, 1], got {}",
                self.sampling_fraction
            )));
        }
        if self.cells.is_empty() {
            return Err(Error::Config("simulation needs at least one cell".into()));
        }
        self.mcmc.validate()
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        seed::derive_path(self.seed, &[seed::stream::REPLICATION, r as u64])
    }
}

/// Per-cell result of one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub members: usize,
    pub point: f64,
    pub phie_lower: f64,
    pub phie_upper: f64,
    pub cbi_lower: Option<f64>,
    pub cbi_upper: Option<f64>,
    pub covered_phie: bool,
    pub covered_cbi: Option<bool>,
    /// `|point − truth|/|truth|`; absent when the truth is 0.
    pub are: Option<f64>,
    pub cv_phie: Option<f64>,
    pub cv_cbi: Option<f64>,
    pub cv_phie_gaussian: Option<f64>,
}

impl CellOutcome {
    pub fn from_row(row: &IntervalReport, truth: f64) -> Self {
        CellOutcome {
            members: row.members,
            point: row.point,
            phie_lower: row.phie.lower,
            phie_upper: row.phie.upper,
            cbi_lower: row.cbi.as_ref().map(|c| c.lower),
            cbi_upper: row.cbi.as_ref().map(|c| c.upper),
            covered_phie: row.phie.contains(truth),
            covered_cbi: row.cbi.as_ref().map(|c| c.contains(truth)),
            are: (truth != 0.0).then(|| (row.point - truth).abs() / truth.abs()),
            cv_phie: row.diagnostics.cv_phie,
            cv_cbi: row.diagnostics.cv_cbi,
            cv_phie_gaussian: row.diagnostics.cv_phie_gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReplicationStatus {
    Ok {
        rhat_max: Option<f64>,
        negative_weights: usize,
        cells: Vec<CellOutcome>,
    },
    NotConverged {
        rhat_max: f64,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationOutcome {
    pub index: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: ReplicationStatus,
}

/// The replication-`r` sample, drawn exactly as [`run_replication`] draws it.
pub fn replication_sample(frame: &SyntheticFrame, cfg: &McConfig, r: usize) -> Result<SampleSet> {
    let rs = cfg.replication_seed(r);
    draw_stratified_sample(&frame.population, cfg.sampling_fraction, seed::derive(rs, seed::stream::SAMPLE))
}

/// MCMC settings for replication `r`.
pub fn replication_mcmc(cfg: &McConfig, r: usize) -> McmcConfig {
    McmcConfig {
        seed: seed::derive(cfg.replication_seed(r), seed::stream::MCMC),
        ..cfg.mcmc.clone()
    }
}

/// One full pass: sample, fit, calibrate, intervals, coverage flags against
/// `truths` (one per configured cell).
pub fn run_replication(frame: &SyntheticFrame, truths: &[f64], cfg: &McConfig, r: usize) -> ReplicationOutcome {
    let status = match replicate(frame, truths, cfg, r) {
        Ok(s) => s,
        Err(e) => ReplicationStatus::Failed { error: e.to_string() },
    };
    ReplicationOutcome {
        index: r,
        seed: cfg.replication_seed(r),
        status,
    }
}

fn replicate(frame: &SyntheticFrame, truths: &[f64], cfg: &McConfig, r: usize) -> Result<ReplicationStatus> {
    if truths.len() != cfg.cells.len() {
        return Err(Error::DimensionMismatch {
            expected: cfg.cells.len(),
            found: truths.len(),
            context: "truth table vs configured cells".into(),
        });
    }
    let sample = replication_sample(frame, cfg, r)?;
    let spec = sample.calibration_spec();
    let fit = fit_models(&sample, &spec, &cfg.hb, &replication_mcmc(cfg, r))?;
    let rhat_max = fit.convergence.available.then_some(fit.convergence.rhat_max);
    if !fit.convergence.converged(cfg.hb.rhat_threshold) {
        return Ok(ReplicationStatus::NotConverged {
            rhat_max: fit.convergence.rhat_max,
        });
    }
    let analysis = analyze(&sample, &spec, &fit.draws, &cfg.cells, &cfg.inference)?;
    Ok(ReplicationStatus::Ok {
        rhat_max,
        negative_weights: analysis.weights.negative_count,
        cells: analysis
            .rows
            .iter()
            .zip(truths)
            .map(|(row, &t)| CellOutcome::from_row(row, t))
            .collect(),
    })
}

/// Runs every replication in parallel; results come back in index order.
pub fn run_simulation(frame: &SyntheticFrame, truths: &[f64], cfg: &McConfig) -> Result<Vec<ReplicationOutcome>> {
    cfg.validate()?;
    Ok((0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(frame, truths, cfg, r))
        .collect())
}

/// `√(p̂(1−p̂)/R)`.
pub fn mc_se(rate: f64, r: usize) -> f64 {
    (rate * (1.0 - rate) / r as f64).sqrt()
}

/// Coverage with its MC standard error and whether the nominal level lies
/// outside `rate ± 2·mc_se`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageRate {
    pub covered: usize,
    pub replications: usize,
    pub rate: f64,
    pub mc_se: f64,
    pub significant: bool,
}

impl CoverageRate {
    pub fn new(covered: usize, replications: usize, nominal: f64) -> Self {
        let rate = covered as f64 / replications as f64;
        let se = mc_se(rate, replications);
        CoverageRate {
            covered,
            replications,
            rate,
            mc_se: se,
            significant: (rate - nominal).abs() > 2.0 * se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCoverage {
    pub name: String,
    pub group: Option<String>,
    pub tier: TierLabel,
    pub truth: f64,
    pub mean_point: f64,
    pub mean_are: Option<f64>,
    pub phie: CoverageRate,
    pub cbi: Option<CoverageRate>,
    pub mean_cv_phie: Option<f64>,
    pub mean_cv_cbi: Option<f64>,
    pub mean_cv_phie_gaussian: Option<f64>,
    pub members_min: usize,
    pub members_max: usize,
    /// The first successful replication's outcome.
    pub single_run: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub nominal: f64,
    pub requested: usize,
    pub used: usize,
    pub not_converged: Vec<usize>,
    pub failed: Vec<(usize, String)>,
    pub single_run_replication: usize,
    pub cells: Vec<CellCoverage>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Merges replication outcomes. Input order is irrelevant: outcomes are
/// sorted by replication index before summation.
pub fn accumulate_report(
    cells: &[CellQuery],
    tiers: &[TierLabel],
    truths: &[f64],
    outcomes: &[ReplicationOutcome],
    nominal: f64,
) -> Result<CoverageReport> {
    let mut sorted: Vec<&ReplicationOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.index);
    let mut not_converged = Vec::new();
    let mut failed = Vec::new();
    let mut ok: Vec<(usize, &Vec<CellOutcome>)> = Vec::new();
    for o in &sorted {
        match &o.status {
            ReplicationStatus::Ok { cells: c, .. } => {
                if c.len() != cells.len() {
                    return Err(Error::DimensionMismatch {
                        expected: cells.len(),
                        found: c.len(),
                        context: format!("cells in replication {}", o.index),
                    });
                }
                ok.push((o.index, c));
            }
            ReplicationStatus::NotConverged { .. } => not_converged.push(o.index),
            ReplicationStatus::Failed { error } => failed.push((o.index, error.clone())),
        }
    }
    let Some(&(first, _)) = ok.first() else {
        return Err(Error::Invalid(format!(
            "no successful replications ({} not converged, {} failed)",
            not_converged.len(),
            failed.len()
        )));
    };
    let used = ok.len();
    let report_cells = cells
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let per: Vec<&CellOutcome> = ok.iter().map(|(_, c)| &c[k]).collect();
            let phie_hits = per.iter().filter(|c| c.covered_phie).count();
            let cbi_flags: Vec<bool> = per.iter().filter_map(|c| c.covered_cbi).collect();
            // A cell whose CBI is missing in some replications is scored over
            // the replications that produced one.
            let cbi = (!cbi_flags.is_empty())
                .then(|| CoverageRate::new(cbi_flags.iter().filter(|&&b| b).count(), cbi_flags.len(), nominal));
            CellCoverage {
                name: q.name.clone(),
                group: q.group.clone(),
                tier: tiers[k],
                truth: truths[k],
                mean_point: per.iter().map(|c| c.point).sum::<f64>() / used as f64,
                mean_are: mean_of(per.iter().map(|c| c.are)),
                phie: CoverageRate::new(phie_hits, used, nominal),
                cbi,
                mean_cv_phie: mean_of(per.iter().map(|c| c.cv_phie)),
                mean_cv_cbi: mean_of(per.iter().map(|c| c.cv_cbi)),
                mean_cv_phie_gaussian: mean_of(per.iter().map(|c| c.cv_phie_gaussian)),
                members_min: per.iter().map(|c| c.members).min().unwrap_or(0),
                members_max: per.iter().map(|c| c.members).max().unwrap_or(0),
                single_run: per[0].clone(),
            }
        })
        .collect();
    Ok(CoverageReport {
        nominal,
        requested: outcomes.len(),
        used,
        not_converged,
        failed,
        single_run_replication: first,
        cells: report_cells,
    })
}

/// Tier of every cell, classified on the population frame.
pub fn classify_cells(frame: &SyntheticFrame, cells: &[CellQuery]) -> Result<Vec<TierLabel>> {
    cells.iter().map(|q| classify_cell(q, &frame.population)).collect()
}
