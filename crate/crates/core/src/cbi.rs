//! Calibrated Bayes intervals: `T̂_c ± 1.96 √(C₁ + C₂)` where `C₁` is the
//! design-based variance of the within-domain cell shares and `C₂` the
//! posterior variance of the domain totals carried through those shares.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedWeights;
use crate::domain::{CalibrationSpec, CellEvaluation, SampleSet};
use crate::error::{Error, Result};
use crate::hb::PosteriorDraws;
use crate::linalg::{dot, norm, CompensatedSum};
use crate::phie::CredibleInterval;

pub const Z95: f64 = 1.96;

/// Per-domain shares and their variances for one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShareVariance {
    /// `λ̂_{d,c}`, zero for excluded domains.
    pub shares: Vec<f64>,
    /// `Var̂(λ̂_{d,c})`.
    pub share_vars: Vec<f64>,
    /// Domain totals `T̂^{(v,d)}` used as denominators.
    pub domain_totals: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Shares `λ̂_{d,c} = Σ_{i∈c∩d} value_i w′_i / T̂^{(v,d)}` and their
/// linearised variances.
///
/// The share variance is the stratified variance of the cell's domain total
/// divided by `T̂²`:
/// `Var̂(λ̂) = T̂⁻² Σ_{h∈d} DEFF_h (1 − f_h) N_h² s²_{h,c,d} / n_h`,
/// with `s²_{h,c,d}` the variance (divisor `n_h − 1`) of
/// `value_i · 1(i ∈ c)` over the whole stratum sample.
pub fn share_and_variance(
    cell: &CellEvaluation,
    sample: &SampleSet,
    spec: &CalibrationSpec,
    weights: &CalibratedWeights,
    posterior_mean: &[f64],
    denominator: usize,
) -> Result<ShareVariance> {
    let n_dom = spec.n_domains();
    if posterior_mean.len() != spec.p() {
        return Err(Error::DimensionMismatch {
            expected: spec.p(),
            found: posterior_mean.len(),
            context: "posterior mean totals".into(),
        });
    }
    let records = sample.records();
    let strata = sample.strata();
    let counts = sample.stratum_counts();

    let mut numer = vec![CompensatedSum::default(); n_dom];
    let mut sum = vec![0.0; strata.len()];
    for (i, r) in records.iter().enumerate() {
        let x = cell.member_value(i);
        sum[r.stratum] += x;
        numer[r.domain].add(x * weights.weights[i]);
    }
    let mean: Vec<f64> = sum.iter().zip(counts).map(|(s, &c)| s / c as f64).collect();
    let mut ss = vec![0.0; strata.len()];
    for (i, r) in records.iter().enumerate() {
        let e = cell.member_value(i) - mean[r.stratum];
        ss[r.stratum] += e * e;
    }

    let mut warnings = Vec::new();
    let mut total_var = vec![0.0; n_dom];
    for (h, s) in strata.iter().enumerate() {
        let d = s.domain.ok_or_else(|| Error::UnassignedStratum(s.id.clone()))?;
        let n = counts[h];
        if n < 2 {
            if ss[h] != 0.0 || sum[h] != 0.0 {
                warnings.push(format!("stratum {} has n_h < 2; its share variance is set to 0", s.id));
            }
            continue;
        }
        let nh = n as f64;
        let big_n = s.population_size as f64;
        let s2 = ss[h] / (nh - 1.0);
        total_var[d] += s.deff * (1.0 - sample.sampling_fraction(h)) * big_n * big_n * s2 / nh;
    }

    let mut shares = vec![0.0; n_dom];
    let mut share_vars = vec![0.0; n_dom];
    let mut domain_totals = vec![0.0; n_dom];
    for d in 0..n_dom {
        let t = posterior_mean[spec.position(denominator, d)];
        domain_totals[d] = t;
        let num = numer[d].value();
        if t == 0.0 || !t.is_finite() {
            if num != 0.0 || total_var[d] != 0.0 {
                warnings.push(format!(
                    "domain {} excluded: zero total for `{}`",
                    spec.domains()[d],
                    spec.variables()[denominator]
                ));
            }
            continue;
        }
        shares[d] = num / t;
        share_vars[d] = total_var[d] / (t * t);
    }
    Ok(ShareVariance {
        shares,
        share_vars,
        domain_totals,
        warnings,
    })
}

/// `V̂ = Σ_b (T⁽ᵇ⁾ − T̄)² / (B − 1)` for one block position.
pub fn posterior_domain_variance(draws: &PosteriorDraws, position: usize) -> f64 {
    let b = draws.n_draws();
    if b < 2 {
        return 0.0;
    }
    let mean = draws.posterior_mean()[position];
    let mut s = CompensatedSum::default();
    for row in draws.rows() {
        let e = row[position] - mean;
        s.add(e * e);
    }
    s.value() / (b - 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComponents {
    /// `Σ_d T̂_d² Var̂(λ̂_{d,c})`.
    pub component1: f64,
    /// `Σ_d λ̂²_{d,c} V̂_d`.
    pub component2: f64,
    pub shares: Vec<f64>,
    pub share_vars: Vec<f64>,
    pub posterior_vars: Vec<f64>,
    pub warnings: Vec<String>,
}

impl VarianceComponents {
    pub fn total(&self) -> f64 {
        self.component1 + self.component2
    }
}

/// Assembles both components for the denominator variable `v`.
pub fn variance_components(share: &ShareVariance, draws: &PosteriorDraws, spec: &CalibrationSpec, v: usize) -> VarianceComponents {
    let n_dom = spec.n_domains();
    let posterior_vars: Vec<f64> = (0..n_dom)
        .map(|d| posterior_domain_variance(draws, spec.position(v, d)))
        .collect();
    let mut c1 = CompensatedSum::default();
    let mut c2 = CompensatedSum::default();
    for d in 0..n_dom {
        let t = share.domain_totals[d];
        c1.add(t * t * share.share_vars[d]);
        c2.add(share.shares[d] * share.shares[d] * posterior_vars[d]);
    }
    VarianceComponents {
        component1: c1.value(),
        component2: c2.value(),
        shares: share.shares.clone(),
        share_vars: share.share_vars.clone(),
        posterior_vars,
        warnings: share.warnings.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CbiInterval {
    pub lower: f64,
    pub upper: f64,
    pub z: f64,
    pub components: VarianceComponents,
}

impl CbiInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// `point ± 1.96 √(C₁ + C₂)`. Negative components (rounding) are clamped to
/// zero with a warning.
pub fn cbi(point: f64, mut components: VarianceComponents) -> CbiInterval {
    for (name, c) in [("component 1", &mut components.component1), ("component 2", &mut components.component2)] {
        if *c < 0.0 {
            components.warnings.push(format!("{name} was negative ({c:e}); clamped to 0"));
            *c = 0.0;
        }
    }
    let half = Z95 * components.total().sqrt();
    CbiInterval {
        lower: point - half,
        upper: point + half,
        z: Z95,
        components,
    }
}

/// What to do when the best linking variable has `|ρ|` below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakLinkAction {
    #[default]
    Warn,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkPolicy {
    #[serde(default = "default_weak_threshold")]
    pub weak_threshold: f64,
    #[serde(default)]
    pub on_weak: WeakLinkAction,
}

fn default_weak_threshold() -> f64 {
    0.1
}

impl Default for LinkPolicy {
    fn default() -> Self {
        LinkPolicy {
            weak_threshold: default_weak_threshold(),
            on_weak: WeakLinkAction::Warn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkCandidate {
    pub variable: String,
    /// `None` when the candidate is constant over the cell.
    pub correlation: Option<f64>,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioLink {
    pub linking_variable: String,
    pub index: usize,
    pub correlation: f64,
    pub candidates: Vec<LinkCandidate>,
    pub warnings: Vec<String>,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Picks the calibration variable with the largest unweighted `|ρ|` against
/// the cell's summed values over the cell's sampled records. Variables
/// constant over those records are inadmissible; ties go to the earlier
/// declared variable.
pub fn select_linking_variable(
    cell_name: &str,
    cell: &CellEvaluation,
    sample: &SampleSet,
    override_var: Option<&str>,
    policy: &LinkPolicy,
) -> Result<RatioLink> {
    let members: Vec<usize> = (0..cell.mask.len()).filter(|&i| cell.mask[i]).collect();
    let u: Vec<f64> = members.iter().map(|&i| cell.values[i]).collect();
    let u_constant = u.windows(2).all(|w| w[0] == w[1]);
    let names = &sample.schema().calibration;
    let candidates: Vec<LinkCandidate> = names
        .iter()
        .enumerate()
        .map(|(v, name)| {
            let y: Vec<f64> = members.iter().map(|&i| sample.records()[i].calib[v]).collect();
            let admissible = !y.windows(2).all(|w| w[0] == w[1]);
            let correlation = if admissible && !u_constant { pearson(&u, &y) } else { None };
            LinkCandidate {
                variable: name.clone(),
                correlation,
                admissible,
            }
        })
        .collect();

    let chosen = match override_var {
        Some(name) => {
            let v = sample
                .schema()
                .calibration_index(name)
                .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
            if !candidates[v].admissible {
                return Err(Error::Invalid(format!(
                    "linking variable `{name}` is constant within cell `{cell_name}`"
                )));
            }
            v
        }
        None => {
            let mut best: Option<(usize, f64)> = None;
            for (v, c) in candidates.iter().enumerate() {
                if !c.admissible {
                    continue;
                }
                let r = c.correlation.map_or(0.0, f64::abs);
                if best.is_none_or(|(_, b)| r > b) {
                    best = Some((v, r));
                }
            }
            best.ok_or_else(|| Error::NoAdmissibleLink {
                cell: cell_name.to_string(),
            })?
            .0
        }
    };
    let correlation = candidates[chosen].correlation.unwrap_or(0.0);
    let mut warnings = Vec::new();
    if correlation.abs() < policy.weak_threshold {
        match policy.on_weak {
            WeakLinkAction::Warn => warnings.push(format!(
                "weak link: |rho| = {:.4} < {} for `{}`; design-based direct estimation is preferable",
                correlation.abs(),
                policy.weak_threshold,
                names[chosen]
            )),
            WeakLinkAction::Reject => {
                return Err(Error::NoAdmissibleLink {
                    cell: cell_name.to_string(),
                })
            }
        }
    }
    Ok(RatioLink {
        linking_variable: names[chosen].clone(),
        index: chosen,
        correlation,
        candidates,
        warnings,
    })
}

/// Threshold on `|cos θ_c|` below which a cell is flagged as orthogonal.
pub const ORTHOGONALITY_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellDiagnostics {
    pub a_norm: f64,
    /// `None` when `a_c = 0` or `T̂ = T̂_HT`.
    pub cos_theta: Option<f64>,
    pub orthogonal: bool,
    /// `a_cᵀ Cov(T̂⁽ᵇ⁾) a_c`.
    pub replicate_variance_quadratic: f64,
    /// Sample variance of the replicate totals.
    pub replicate_variance_empirical: f64,
    pub cv_phie: Option<f64>,
    pub cv_cbi: Option<f64>,
    /// `√C₂ / |point|`, the CV of a Gaussian-width PHIE interval.
    pub cv_phie_gaussian: Option<f64>,
}

/// `(width / 3.92) / |point|`; `None` for a zero point estimate.
pub fn cv(width: f64, point: f64) -> Option<f64> {
    if point == 0.0 {
        None
    } else {
        Some(width / (2.0 * Z95) / point.abs())
    }
}

pub fn cos_theta(a: &[f64], residual: &[f64]) -> Option<f64> {
    let (na, nr) = (norm(a), norm(residual));
    if na == 0.0 || nr == 0.0 {
        return None;
    }
    Some((dot(a, residual) / (na * nr)).clamp(-1.0, 1.0))
}

/// Quadratic form `aᵀ Σ a` for row-major `Σ`.
pub fn quadratic_form(a: &[f64], cov: &[f64]) -> f64 {
    let p = a.len();
    let mut s = CompensatedSum::default();
    for i in 0..p {
        if a[i] == 0.0 {
            continue;
        }
        s.add(a[i] * dot(&cov[i * p..(i + 1) * p], a));
    }
    s.value()
}

fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

#[allow(clippy::too_many_arguments)]
pub fn cell_diagnostics(
    direction: &[f64],
    posterior_mean: &[f64],
    ht: &[f64],
    draw_covariance: &[f64],
    replicate_values: &[f64],
    point: f64,
    phie: &CredibleInterval,
    cbi: Option<&CbiInterval>,
) -> CellDiagnostics {
    let residual: Vec<f64> = posterior_mean.iter().zip(ht).map(|(t, h)| t - h).collect();
    let cos = cos_theta(direction, &residual);
    CellDiagnostics {
        a_norm: norm(direction),
        cos_theta: cos,
        orthogonal: cos.is_none_or(|c| c.abs() < ORTHOGONALITY_THRESHOLD),
        replicate_variance_quadratic: quadratic_form(direction, draw_covariance),
        replicate_variance_empirical: sample_variance(replicate_values),
        cv_phie: cv(phie.width(), point),
        cv_cbi: cbi.and_then(|c| cv(c.width(), point)),
        cv_phie_gaussian: cbi.and_then(|c| {
            if point == 0.0 {
                None
            } else {
                Some(c.components.component2.sqrt() / point.abs())
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comps(c1: f64, c2: f64) -> VarianceComponents {
        VarianceComponents {
            component1: c1,
            component2: c2,
            shares: vec![],
            share_vars: vec![],
            posterior_vars: vec![],
            warnings: vec![],
        }
    }

    #[test]
    fn cbi_arithmetic() {
        let c = cbi(100.0, comps(4.0, 0.0));
        assert!((c.lower - 96.08).abs() < 1e-12);
        assert!((c.upper - 103.92).abs() < 1e-12);
        let z = cbi(7.0, comps(0.0, 0.0));
        assert_eq!((z.lower, z.upper), (7.0, 7.0));
    }

    #[test]
    fn negative_component_is_clamped() {
        let c = cbi(1.0, comps(-1e-18, 1.0));
        assert_eq!(c.components.component1, 0.0);
        assert_eq!(c.components.warnings.len(), 1);
    }

    #[test]
    fn posterior_variance_of_two_draws() {
        let d = PosteriorDraws::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(posterior_domain_variance(&d, 0), 2.0);
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cos_theta(&[0.0, 0.0], &[1.0, 2.0]), None);
        assert!((cos_theta(&[2.0, 4.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cos_theta(&[1.0, 0.0], &[0.0, 3.0]), Some(0.0));
    }
}
