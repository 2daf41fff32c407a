//! Coverage summaries by tier and cell group.

use crate::domain::TierLabel;
use crate::report::{meta_lines, num17, opt17, sig6, text_table};

use super::harness::{CellCoverage, CoverageReport};

/// Cells sharing a tier and group, in first-appearance order.
fn groups(report: &CoverageReport) -> Vec<(TierLabel, String, Vec<&CellCoverage>)> {
    let mut out: Vec<(TierLabel, String, Vec<&CellCoverage>)> = Vec::new();
    for c in &report.cells {
        let g = c.group.clone().unwrap_or_else(|| c.name.clone());
        match out.iter_mut().find(|(t, name, _)| *t == c.tier && *name == g) {
            Some(entry) => entry.2.push(c),
            None => out.push((c.tier, g, vec![c])),
        }
    }
    out
}

fn min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((lo, v.iter().sum::<f64>() / v.len() as f64, hi))
}

/// Per (tier, group): PHIE and CBI coverage min, mean and max.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSummaryRow {
    pub tier: TierLabel,
    pub group: String,
    pub cells: usize,
    pub phie: (f64, f64, f64),
    pub cbi: Option<(f64, f64, f64)>,
}

pub fn coverage_summary(report: &CoverageReport) -> Vec<CoverageSummaryRow> {
    groups(report)
        .into_iter()
        .map(|(tier, group, cells)| CoverageSummaryRow {
            tier,
            group,
            cells: cells.len(),
            phie: min_max(cells.iter().map(|c| c.phie.rate)).expect("non-empty group"),
            cbi: min_max(cells.iter().filter_map(|c| c.cbi.map(|r| r.rate))),
        })
        .collect()
}

/// Per (tier, group), from the single run: member-count range, CV ranges and
/// the number of cells whose CBI covered the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummaryRow {
    pub tier: TierLabel,
    pub group: String,
    pub members: (usize, usize),
    pub cv_phie: Option<(f64, f64)>,
    pub cv_cbi: Option<(f64, f64)>,
    pub cbi_covered: Option<(usize, usize)>,
}

pub fn cv_summary(report: &CoverageReport) -> Vec<CvSummaryRow> {
    groups(report)
        .into_iter()
        .map(|(tier, group, cells)| {
            let range = |f: &dyn Fn(&CellCoverage) -> Option<f64>| {
                min_max(cells.iter().filter_map(|c| f(c))).map(|(lo, _, hi)| (lo, hi))
            };
            let flags: Vec<bool> = cells.iter().filter_map(|c| c.single_run.covered_cbi).collect();
            CvSummaryRow {
                tier,
                group,
                members: (
                    cells.iter().map(|c| c.single_run.members).min().unwrap_or(0),
                    cells.iter().map(|c| c.single_run.members).max().unwrap_or(0),
                ),
                cv_phie: range(&|c| c.single_run.cv_phie),
                cv_cbi: range(&|c| c.single_run.cv_cbi),
                cbi_covered: (!flags.is_empty()).then(|| (flags.iter().filter(|&&b| b).count(), flags.len())),
            }
        })
        .collect()
}

fn pct(x: f64) -> String {
    format!("{}%", sig6(100.0 * x))
}

fn pct_range(lo: f64, hi: f64) -> String {
    if lo == hi {
        pct(lo)
    } else {
        format!("{}-{}", pct(lo), pct(hi))
    }
}

fn opt_bool(b: Option<bool>) -> String {
    b.map_or(String::new(), |b| b.to_string())
}

pub fn coverage_csv(report: &CoverageReport, meta: &[(String, String)]) -> String {
    let mut s = meta_lines(meta);
    s.push_str(
        "cell,group,tier,truth,mean_point,mean_are,phie_coverage,phie_mc_se,phie_significant,cbi_coverage,cbi_mc_se,\
         cbi_significant,mean_cv_phie,mean_cv_cbi,mean_cv_phie_gaussian,members_min,members_max\n",
    );
    for c in &report.cells {
        let row = [
            c.name.clone(),
            c.group.clone().unwrap_or_default(),
            c.tier.as_str().to_string(),
            num17(c.truth),
            num17(c.mean_point),
            opt17(c.mean_are),
            num17(c.phie.rate),
            num17(c.phie.mc_se),
            c.phie.significant.to_string(),
            opt17(c.cbi.map(|r| r.rate)),
            opt17(c.cbi.map(|r| r.mc_se)),
            opt_bool(c.cbi.map(|r| r.significant)),
            opt17(c.mean_cv_phie),
            opt17(c.mean_cv_cbi),
            opt17(c.mean_cv_phie_gaussian),
            c.members_min.to_string(),
            c.members_max.to_string(),
        ];
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn coverage_by_tier_csv(report: &CoverageReport, meta: &[(String, String)]) -> String {
    let mut s = meta_lines(meta);
    s.push_str("tier,group,cells,phie_min,phie_mean,phie_max,cbi_min,cbi_mean,cbi_max,nominal\n");
    for r in coverage_summary(report) {
        let (cl, cm, ch) = r.cbi.map_or((None, None, None), |(a, b, c)| (Some(a), Some(b), Some(c)));
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.tier.as_str(),
            r.group,
            r.cells,
            num17(r.phie.0),
            num17(r.phie.1),
            num17(r.phie.2),
            opt17(cl),
            opt17(cm),
            opt17(ch),
            num17(report.nominal)
        ));
    }
    s
}

pub fn cv_by_tier_csv(report: &CoverageReport, meta: &[(String, String)]) -> String {
    let mut s = meta_lines(meta);
    s.push_str("tier,group,members_min,members_max,cv_phie_min,cv_phie_max,cv_cbi_min,cv_cbi_max,cbi_covered,cbi_cells\n");
    for r in cv_summary(report) {
        let split = |x: Option<(f64, f64)>| (opt17(x.map(|v| v.0)), opt17(x.map(|v| v.1)));
        let (pl, ph) = split(r.cv_phie);
        let (bl, bh) = split(r.cv_cbi);
        let (k, m) = r
            .cbi_covered
            .map_or((String::new(), String::new()), |(k, m)| (k.to_string(), m.to_string()));
        s.push_str(&format!(
            "{},{},{},{},{pl},{ph},{bl},{bh},{k},{m}\n",
            r.tier.as_str(),
            r.group,
            r.members.0,
            r.members.1
        ));
    }
    s
}

/// Human-readable coverage and CV tables.
pub fn tables_text(report: &CoverageReport) -> String {
    let mut s = format!(
        "Monte Carlo coverage by tier ({} of {} replications used; {} not converged, {} failed)\n\n",
        report.used,
        report.requested,
        report.not_converged.len(),
        report.failed.len()
    );
    let coverage_rows: Vec<Vec<String>> = coverage_summary(report)
        .into_iter()
        .map(|r| {
            vec![
                r.tier.as_str().to_string(),
                r.group,
                r.cells.to_string(),
                pct_range(r.phie.0, r.phie.2),
                r.cbi.map_or("N/A".into(), |c| pct_range(c.0, c.2)),
                pct(report.nominal),
            ]
        })
        .collect();
    s.push_str(&text_table(&["Tier", "Cell group", "Cells", "MC Cov. (PHIE)", "MC Cov. (CBI)", "Nominal"], &coverage_rows));
    s.push_str(&format!(
        "\nCoefficient of variation by tier (single run: replication {})\n\n",
        report.single_run_replication
    ));
    let cv_rows: Vec<Vec<String>> = cv_summary(report)
        .into_iter()
        .map(|r| {
            let range = |x: Option<(f64, f64)>| x.map_or("N/A".into(), |(lo, hi)| pct_range(lo, hi));
            vec![
                r.tier.as_str().to_string(),
                r.group,
                format!("{}-{}", r.members.0, r.members.1),
                range(r.cv_phie),
                range(r.cv_cbi),
                r.cbi_covered.map_or("N/A".into(), |(k, m)| format!("{k}/{m}")),
            ]
        })
        .collect();
    s.push_str(&text_table(&["Tier", "Cell group", "n range", "CV (PHIE)", "CV (CBI)", "SR Cov. (CBI)"], &cv_rows));
    s.push_str("\nPer-cell coverage\n\n");
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            let mark = |sig: bool| if sig { "*" } else { "" };
            vec![
                c.name.clone(),
                c.tier.as_str().to_string(),
                sig6(c.truth),
                c.mean_are.map_or("N/A".into(), pct),
                format!("{}{}", pct(c.phie.rate), mark(c.phie.significant)),
                c.cbi
                    .map_or("N/A".into(), |r| format!("{}{}", pct(r.rate), mark(r.significant))),
            ]
        })
        .collect();
    s.push_str(&text_table(&["Cell", "Tier", "Truth", "Mean ARE", "PHIE", "CBI"], &rows));
    s.push_str("\n* nominal level outside coverage ± 2 MC SE\n");
    s
}
