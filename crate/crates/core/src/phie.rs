//! Tier classification, replicate cell totals and empirical-quantile
//! credible intervals.
//!
//! Recalibrating to draw `b` changes a cell total by `(T̂⁽ᵇ⁾ − T̂_HT)ᵀ a_c`, so
//! replicate totals are computed from the cell's direction `a_c` alone and the
//! `n × B` replicate-weight matrix is never formed.

use serde::Serialize;

use crate::calibration::{cell_moment, replicate_direction, CalibratedWeights, CalibrationArtifacts};
use crate::domain::{CellEvaluation, CellQuery, Condition, SampleSet, TierLabel, VariableRef};
use crate::error::{Error, Result};
use crate::hb::PosteriorDraws;
use crate::linalg::CompensatedSum;

/// Assigns the inferential tier. An explicit `tier` in the query wins.
///
/// - `1-E`: calibration variable, filter is membership of exactly one domain.
/// - `2-CA`: calibration variable, every non-domain condition is a range on a
///   calibration value or an attribute derived from a calibration variable.
/// - `2-NCA`: calibration variable, any other filter.
/// - `3-NCV`: the summed variable is an outcome.
pub fn classify_cell(query: &CellQuery, sample: &SampleSet) -> Result<TierLabel> {
    let var = sample.schema().resolve_variable(&query.summed_variable)?;
    if let Some(t) = query.tier_override {
        return Ok(t);
    }
    if let VariableRef::Outcome(_) = var {
        return Ok(TierLabel::Tier3NCV);
    }
    let schema = sample.schema();
    let mut domains: Option<Vec<&String>> = None;
    let mut only_domains = true;
    let mut calibration_derived = true;
    for c in &query.filter {
        match c {
            Condition::Domain { domain } => {
                let set: Vec<&String> = domain.as_slice().iter().collect();
                domains = Some(match domains {
                    None => set,
                    Some(prev) => prev.into_iter().filter(|d| set.contains(d)).collect(),
                });
            }
            Condition::Range { .. } => only_domains = false,
            Condition::Attribute { attribute, .. } => {
                only_domains = false;
                let idx = schema
                    .attribute_index(attribute)
                    .ok_or_else(|| Error::UnknownAttribute(attribute.clone()))?;
                let derived = schema.attributes[idx]
                    .derived_from
                    .as_deref()
                    .is_some_and(|src| schema.calibration_index(src).is_some());
                calibration_derived &= derived;
            }
        }
    }
    let single_domain = domains.is_some_and(|mut d| {
        d.sort();
        d.dedup();
        d.len() == 1
    });
    Ok(if only_domains && single_domain {
        TierLabel::Tier1E
    } else if calibration_derived {
        TierLabel::Tier2CA
    } else {
        TierLabel::Tier2NCA
    })
}

/// `T_c⁽ᵇ⁾ = T_c^HT + (T̂⁽ᵇ⁾ − T̂_HT)ᵀ a_c` for every draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateTotals {
    pub values: Vec<f64>,
    pub fixed_ht: f64,
    pub direction: Vec<f64>,
}

pub fn replicate_totals(
    cell: &CellEvaluation,
    sample: &SampleSet,
    draws: &PosteriorDraws,
    calib: &CalibrationArtifacts,
) -> Result<ReplicateTotals> {
    if draws.p() != calib.spec.p() {
        return Err(Error::DimensionMismatch {
            expected: calib.spec.p(),
            found: draws.p(),
            context: "draw columns vs calibration spec".into(),
        });
    }
    let fixed_ht = cell.weighted_total(sample.records().iter().map(|r| r.weight));
    let direction = replicate_direction(&calib.gram, &cell_moment(cell, sample, &calib.spec))?;
    let active: Vec<usize> = (0..direction.len()).filter(|&j| direction[j] != 0.0).collect();
    let values = draws
        .rows()
        .map(|row| {
            let mut s = CompensatedSum::default();
            s.add(fixed_ht);
            for &j in &active {
                s.add((row[j] - calib.ht[j]) * direction[j]);
            }
            s.value()
        })
        .collect();
    Ok(ReplicateTotals {
        values,
        fixed_ht,
        direction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    Posterior,
    QuasiPosterior,
}

impl IntervalKind {
    pub fn for_tier(tier: TierLabel) -> Self {
        if tier == TierLabel::Tier1E {
            IntervalKind::Posterior
        } else {
            IntervalKind::QuasiPosterior
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntervalKind::Posterior => "posterior",
            IntervalKind::QuasiPosterior => "quasi-posterior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CredibleInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub kind: IntervalKind,
}

impl CredibleInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Quantile of sorted data by linear interpolation at positions
/// `(k − 1)/(B − 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    if b == 1 {
        return sorted[0];
    }
    let h = q * (b - 1) as f64;
    let lo = (h.floor() as usize).min(b - 1);
    let hi = (lo + 1).min(b - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Equal-tailed interval `[Q_{α/2}, Q_{1−α/2}]` with `α = 1 − level`.
pub fn empirical_quantile_ci(values: &[f64], level: f64, kind: IntervalKind) -> Result<CredibleInterval> {
    if values.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 values, got {}", values.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("level must be in (0,1), got {level}")));
    }
    let bad = values.iter().filter(|x| !x.is_finite()).count();
    if bad > 0 {
        return Err(Error::NonFinite {
            count: bad,
            context: "replicate values".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(CredibleInterval {
        lower: quantile_sorted(&sorted, alpha / 2.0),
        upper: quantile_sorted(&sorted, 1.0 - alpha / 2.0),
        level,
        kind,
    })
}

/// `Σ_{i∈c} value_i w′_i` under weights calibrated to the posterior mean.
pub fn point_estimate(cell: &CellEvaluation, weights: &CalibratedWeights) -> f64 {
    cell.weighted_total(weights.weights.iter().copied())
}
