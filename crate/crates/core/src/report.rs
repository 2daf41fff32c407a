//! Per-cell analysis and output formatting.
//!
//! Machine formats (CSV, JSON) print floats with 17 significant digits; the
//! human tables print 6. Every file carries the config hash and seed.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibratedWeights, CalibrationArtifacts};
use crate::cbi::{
    cbi, cell_diagnostics, select_linking_variable, share_and_variance, variance_components, CbiInterval,
    CellDiagnostics, LinkPolicy,
};
use crate::domain::{evaluate_cell, CalibrationSpec, CellQuery, SampleSet, TierLabel, VariableRef};
use crate::error::{Error, Result};
use crate::hb::PosteriorDraws;
use crate::phie::{classify_cell, empirical_quantile_ci, point_estimate, replicate_totals, CredibleInterval, IntervalKind};

/// 17 significant digits in scientific notation.
pub fn num17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt17(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), num17)
}

/// 6 significant digits, fixed notation for moderate magnitudes.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..9).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

pub fn opt6(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), sig6)
}

/// Hex SHA-256 of the raw config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty JSON whose floats use 17 significant digits.
struct Num17Formatter(PrettyFormatter<'static>);

impl Formatter for Num17Formatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Num17Formatter(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("in-memory JSON serialization");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `# key=value` header lines for delimited outputs.
pub fn meta_lines(meta: &[(String, String)]) -> String {
    meta.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceOptions {
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub link: LinkPolicy,
}

fn default_level() -> f64 {
    0.95
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            level: default_level(),
            link: LinkPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkSummary {
    pub variable: String,
    pub correlation: f64,
}

/// One reported cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalReport {
    pub name: String,
    pub group: Option<String>,
    pub tier: TierLabel,
    pub variable: String,
    pub members: usize,
    pub point: f64,
    pub phie: CredibleInterval,
    /// Absent for exact calibration cells.
    pub cbi: Option<CbiInterval>,
    pub link: Option<LinkSummary>,
    pub diagnostics: CellDiagnostics,
    pub warnings: Vec<String>,
}

/// Calibration state, posterior-mean weights and every cell's report.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub artifacts: CalibrationArtifacts,
    pub weights: CalibratedWeights,
    pub rows: Vec<IntervalReport>,
}

fn analyze_cell(
    query: &CellQuery,
    sample: &SampleSet,
    draws: &PosteriorDraws,
    calib: &CalibrationArtifacts,
    weights: &CalibratedWeights,
    covariance: &[f64],
    opts: &InferenceOptions,
) -> Result<IntervalReport> {
    let spec = &calib.spec;
    let cell = evaluate_cell(query, sample)?;
    let tier = classify_cell(query, sample)?;
    let members = cell.count();
    let mut warnings = Vec::new();
    if members == 0 {
        warnings.push("cell has no sampled members; intervals are degenerate".to_string());
    }
    let point = point_estimate(&cell, weights);
    let reps = replicate_totals(&cell, sample, draws, calib)?;
    let phie = empirical_quantile_ci(&reps.values, opts.level, IntervalKind::for_tier(tier))?;

    let mut link = None;
    let cbi_interval = if tier == TierLabel::Tier1E {
        None
    } else {
        let denominator = match cell.variable {
            VariableRef::Calibration(v) if query.link_override.is_none() => Some(v),
            _ => match select_linking_variable(&query.name, &cell, sample, query.link_override.as_deref(), &opts.link) {
                Ok(l) => {
                    warnings.extend(l.warnings.iter().cloned());
                    link = Some(LinkSummary {
                        variable: l.linking_variable.clone(),
                        correlation: l.correlation,
                    });
                    Some(l.index)
                }
                Err(e @ Error::NoAdmissibleLink { .. }) => {
                    warnings.push(e.to_string());
                    None
                }
                Err(e) => return Err(e),
            },
        };
        match denominator {
            Some(v) => {
                let share = share_and_variance(&cell, sample, spec, weights, draws.posterior_mean(), v)?;
                let interval = cbi(point, variance_components(&share, draws, spec, v));
                warnings.extend(interval.components.warnings.iter().cloned());
                Some(interval)
            }
            None => None,
        }
    };
    let diagnostics = cell_diagnostics(
        &reps.direction,
        draws.posterior_mean(),
        &calib.ht,
        covariance,
        &reps.values,
        point,
        &phie,
        cbi_interval.as_ref(),
    );
    Ok(IntervalReport {
        name: query.name.clone(),
        group: query.group.clone(),
        tier,
        variable: query.summed_variable.clone(),
        members,
        point,
        phie,
        cbi: cbi_interval,
        link,
        diagnostics,
        warnings,
    })
}

/// Runs the whole post-hoc pipeline: calibrate to the posterior mean, then
/// classify and report every cell.
pub fn analyze(
    sample: &SampleSet,
    spec: &CalibrationSpec,
    draws: &PosteriorDraws,
    cells: &[CellQuery],
    opts: &InferenceOptions,
) -> Result<Analysis> {
    let calib = CalibrationArtifacts::build(sample, spec)?;
    if draws.p() != spec.p() {
        return Err(Error::DimensionMismatch {
            expected: spec.p(),
            found: draws.p(),
            context: "draw columns vs calibration spec".into(),
        });
    }
    let weights = calib.calibrate(sample, draws.posterior_mean())?;
    let covariance = draws.covariance();
    let rows = cells
        .par_iter()
        .map(|q| analyze_cell(q, sample, draws, &calib, &weights, &covariance, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        artifacts: calib,
        weights,
        rows,
    })
}

/// Run-level metadata embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub records: usize,
    pub p: usize,
    pub draws: usize,
    pub gram_rank: usize,
    pub gram_condition_estimate: f64,
    pub negative_weights: usize,
    pub rhat_max: Option<f64>,
    pub notes: Vec<String>,
}

impl RunMeta {
    pub fn header(&self) -> Vec<(String, String)> {
        vec![
            ("command".into(), self.command.clone()),
            ("seed".into(), self.seed.to_string()),
            ("config_sha256".into(), self.config_sha256.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub meta: RunMeta,
    pub cells: Vec<IntervalReport>,
}

const PANEL_A_HEADER: &str = "cell,group,tier,variable,members,point,phie_lower,phie_upper,phie_kind,cbi_lower,cbi_upper";
const PANEL_B_HEADER: &str = "cell,tier,a_norm,cos_theta,orthogonal,component1,component2,replicate_var_quadratic,replicate_var_empirical,cv_phie,cv_cbi,cv_phie_gaussian,link,link_rho";

/// Panel A: point estimates and intervals.
pub fn panel_a_csv(report: &RunReport) -> String {
    let mut out = meta_lines(&report.meta.header());
    out.push_str(PANEL_A_HEADER);
    out.push('\n');
    for r in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.group.as_deref().unwrap_or(""),
            r.tier,
            r.variable,
            r.members,
            num17(r.point),
            num17(r.phie.lower),
            num17(r.phie.upper),
            r.phie.kind.as_str(),
            opt17(r.cbi.as_ref().map(|c| c.lower)),
            opt17(r.cbi.as_ref().map(|c| c.upper)),
        ));
    }
    out
}

/// Panel B: diagnostics and variance components.
pub fn panel_b_csv(report: &RunReport) -> String {
    let mut out = meta_lines(&report.meta.header());
    out.push_str(PANEL_B_HEADER);
    out.push('\n');
    for r in &report.cells {
        let d = &r.diagnostics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.tier,
            num17(d.a_norm),
            opt17(d.cos_theta),
            d.orthogonal,
            opt17(r.cbi.as_ref().map(|c| c.components.component1)),
            opt17(r.cbi.as_ref().map(|c| c.components.component2)),
            num17(d.replicate_variance_quadratic),
            num17(d.replicate_variance_empirical),
            opt17(d.cv_phie),
            opt17(d.cv_cbi),
            opt17(d.cv_phie_gaussian),
            r.link.as_ref().map_or("", |l| l.variable.as_str()),
            opt17(r.link.as_ref().map(|l| l.correlation)),
        ));
    }
    out
}

/// Fixed-width text rendering of `rows` under `header`.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Human-readable Panels A and B.
pub fn report_text(report: &RunReport) -> String {
    let m = &report.meta;
    let mut out = format!(
        "seed {}  config {}\nrecords {}  p {}  draws {}  rank(G) {}  negative weights {}  R-hat max {}\n\n",
        m.seed,
        m.config_sha256,
        m.records,
        m.p,
        m.draws,
        m.gram_rank,
        m.negative_weights,
        opt6(m.rhat_max)
    );
    let a: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.tier.to_string(),
                r.members.to_string(),
                sig6(r.point),
                sig6(r.phie.lower),
                sig6(r.phie.upper),
                opt6(r.cbi.as_ref().map(|c| c.lower)),
                opt6(r.cbi.as_ref().map(|c| c.upper)),
            ]
        })
        .collect();
    out.push_str("Panel A: point estimates and intervals\n");
    out.push_str(&text_table(
        &["cell", "tier", "n", "point", "CrI lower", "CrI upper", "CBI lower", "CBI upper"],
        &a,
    ));
    let b: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|r| {
            let d = &r.diagnostics;
            vec![
                r.name.clone(),
                sig6(d.a_norm),
                opt6(d.cos_theta),
                opt6(d.cv_phie.map(|x| 100.0 * x)),
                opt6(d.cv_cbi.map(|x| 100.0 * x)),
                r.link.as_ref().map_or(String::new(), |l| format!("{} ({})", l.variable, sig6(l.correlation))),
            ]
        })
        .collect();
    out.push_str("\nPanel B: diagnostics\n");
    out.push_str(&text_table(&["cell", "|a_c|", "cos theta", "CV PHIE %", "CV CBI %", "link (rho)"], &b));
    let warned: Vec<&IntervalReport> = report.cells.iter().filter(|r| !r.warnings.is_empty()).collect();
    if !warned.is_empty() {
        out.push_str("\nWarnings\n");
        for r in warned {
            for w in &r.warnings {
                out.push_str(&format!("{}: {w}\n", r.name));
            }
        }
    }
    out
}
