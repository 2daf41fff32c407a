//! Synthetic labour-force style populations with known cell truths.
//!
//! Each person gets three calibration variables (`employed`, `unemployed`,
//! `hours`), categorical attributes, an hours band derived from `hours`, and
//! outcomes generated with a target correlation to a calibration variable.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Continuous, Normal};

use crate::domain::{AttributeDef, CellQuery, DomainSpec, SampleSet, Schema, StratumSpec, UnitRecord, evaluate_cell};
use crate::error::{Error, Result};
use crate::ingest::DerivedAttribute;
use crate::linalg::CompensatedSum;
use crate::seed;

pub const EMPLOYED: &str = "employed";
pub const UNEMPLOYED: &str = "unemployed";
pub const HOURS: &str = "hours";

/// Stratum-level logit model `η_h = intercept + slope · z_h + effect_sd · v_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitModel {
    pub intercept: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub effect_sd: f64,
}

/// Weekly hours of employed persons: `mean + slope·z_h + effect_sd·v_h +
/// shifts + sd·ε`, rounded and clamped to `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoursModel {
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub effect_sd: f64,
    #[serde(default = "one")]
    pub min: f64,
    #[serde(default = "eighty")]
    pub max: f64,
}

fn one() -> f64 {
    1.0
}
fn eighty() -> f64 {
    80.0
}

/// A categorical attribute with optional effects on employment and hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeModel {
    pub name: String,
    pub levels: Vec<String>,
    pub probs: Vec<f64>,
    /// SD of per-domain log-multiplicative tilts applied to `probs`.
    #[serde(default)]
    pub domain_sd: f64,
    /// Added to the employment logit per level.
    #[serde(default)]
    pub employment_shift: Vec<f64>,
    /// Added to the mean hours per level.
    #[serde(default)]
    pub hours_shift: Vec<f64>,
    /// Only employed persons get a level; others get `none`.
    #[serde(default)]
    pub employed_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// An outcome with target correlation `rho` to calibration variable `link`,
/// computed over persons with `within != 0` (everyone when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeModel {
    pub name: String,
    pub kind: OutcomeKind,
    pub link: String,
    pub rho: f64,
    /// Continuous: mean and SD. Binary: `mean` is the prevalence.
    pub mean: f64,
    #[serde(default)]
    pub sd: f64,
    #[serde(default)]
    pub within: Option<String>,
    /// Value for persons outside `within`; drawn from the marginal when
    /// absent.
    #[serde(default)]
    pub outside: Option<f64>,
    #[serde(default)]
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPopulationSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    pub domains: Vec<String>,
    pub strata_per_domain: Vec<usize>,
    pub mean_stratum_size: u64,
    /// Stratum sizes are uniform on `mean · [1 − spread, 1 + spread]`.
    #[serde(default)]
    pub size_spread: f64,
    pub employment: LogitModel,
    /// Probability of unemployment among persons not employed.
    pub unemployment: LogitModel,
    pub hours: HoursModel,
    #[serde(default)]
    pub attributes: Vec<AttributeModel>,
    pub hours_band: DerivedAttribute,
    #[serde(default)]
    pub outcomes: Vec<OutcomeModel>,
}

fn infeasible(msg: impl Into<String>) -> Error {
    Error::InfeasibleSpec(msg.into())
}

impl SyntheticPopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.domains.len() != self.strata_per_domain.len() {
            return Err(infeasible("domains and strata_per_domain must be non-empty and equal length"));
        }
        if self.strata_per_domain.contains(&0) {
            return Err(infeasible("every domain needs at least one stratum"));
        }
        if self.mean_stratum_size < 2 || !(0.0..1.0).contains(&self.size_spread) {
            return Err(infeasible("mean_stratum_size >= 2 and 0 <= size_spread < 1 required"));
        }
        if !(self.hours.sd >= 0.0 && self.hours.min >= 1.0 && self.hours.max >= self.hours.min) {
            return Err(infeasible("hours: need sd >= 0 and 1 <= min <= max"));
        }
        if self.hours_band.from != HOURS {
            return Err(infeasible(format!("hours_band must be derived from `{HOURS}`")));
        }
        for a in &self.attributes {
            let k = a.levels.len();
            if k == 0 || a.probs.len() != k {
                return Err(infeasible(format!("attribute `{}`: probs must match levels", a.name)));
            }
            if a.probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (a.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(infeasible(format!(
                    "attribute `{}`: probabilities must lie in [0,1] and sum to 1",
                    a.name
                )));
            }
            for (what, v) in [("employment_shift", &a.employment_shift), ("hours_shift", &a.hours_shift)] {
                if !v.is_empty() && v.len() != k {
                    return Err(infeasible(format!("attribute `{}`: {what} must match levels", a.name)));
                }
            }
            if a.employed_only && !a.employment_shift.is_empty() {
                return Err(infeasible(format!(
                    "attribute `{}`: employed_only attributes cannot shift employment",
                    a.name
                )));
            }
            if a.employed_only && a.levels.iter().any(|l| l == "none") {
                return Err(infeasible(format!("attribute `{}`: level `none` is reserved", a.name)));
            }
        }
        for o in &self.outcomes {
            if ![EMPLOYED, UNEMPLOYED, HOURS].contains(&o.link.as_str()) {
                return Err(infeasible(format!("outcome `{}` links to unknown variable `{}`", o.name, o.link)));
            }
            if let Some(w) = &o.within {
                if ![EMPLOYED, UNEMPLOYED, HOURS].contains(&w.as_str()) {
                    return Err(infeasible(format!("outcome `{}`: unknown `within` variable `{w}`", o.name)));
                }
            }
            if !(-1.0..=1.0).contains(&o.rho) {
                return Err(infeasible(format!("outcome `{}`: rho_target {} outside [-1, 1]", o.name, o.rho)));
            }
            match o.kind {
                OutcomeKind::Continuous => {
                    if !(o.sd >= 0.0) || !o.mean.is_finite() {
                        return Err(infeasible(format!("outcome `{}`: need finite mean and sd >= 0", o.name)));
                    }
                }
                OutcomeKind::Binary => {
                    if !(o.mean > 0.0 && o.mean < 1.0) {
                        return Err(infeasible(format!("outcome `{}`: prevalence must be in (0,1)", o.name)));
                    }
                    let max = binary_max_rho(o.mean);
                    if o.rho.abs() > max {
                        return Err(infeasible(format!(
                            "outcome `{}`: |rho_target| = {} exceeds {max:.4}, the largest correlation a thresholded \
                             Gaussian with prevalence {} can reach",
                            o.name,
                            o.rho.abs(),
                            o.mean
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_strata(&self) -> usize {
        self.strata_per_domain.iter().sum()
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Largest `|corr(1(L > c), Z)|` for `L` standard normal correlated with `Z`.
fn binary_max_rho(prevalence: f64) -> f64 {
    let n = std_normal();
    let c = n.inverse_cdf(1.0 - prevalence);
    n.pdf(c) / (prevalence * (1.0 - prevalence)).sqrt()
}

/// A generated population (unit weights) plus the generating layout.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub population: SampleSet,
    pub seed: u64,
}

impl SyntheticFrame {
    /// Exhaustive population total of every cell.
    pub fn truth_table(&self, cells: &[CellQuery]) -> Result<Vec<f64>> {
        cells
            .iter()
            .map(|q| {
                let e = evaluate_cell(q, &self.population)?;
                let mut s = CompensatedSum::default();
                for (i, &m) in e.mask.iter().enumerate() {
                    if m {
                        s.add(e.values[i]);
                    }
                }
                Ok(s.value())
            })
            .collect()
    }
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Builds a population under `spec`. `seed` is used when the spec carries
/// none.
pub fn generate_population(spec: &SyntheticPopulationSpec, seed: u64) -> Result<SyntheticFrame> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(seed);
    let base = seed::derive(seed, seed::stream::POPULATION);
    let mut rng = seed::rng(seed::derive(base, 0));
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    // Layout, stratum covariates and effects.
    let mut strata = Vec::with_capacity(spec.n_strata());
    let mut effects = Vec::with_capacity(spec.n_strata());
    for (d, &k) in spec.strata_per_domain.iter().enumerate() {
        for j in 0..k {
            let u: f64 = rng.random_range(-1.0..=1.0);
            let size = ((spec.mean_stratum_size as f64) * (1.0 + spec.size_spread * u)).round().max(2.0) as u64;
            let z = normal(&mut rng);
            strata.push(
                StratumSpec::new(format!("{}-{:02}", spec.domains[d], j + 1), size)
                    .with_domain(d)
                    .with_covariates(vec![z]),
            );
            effects.push([normal(&mut rng), normal(&mut rng), normal(&mut rng)]);
        }
    }
    let domains: Vec<DomainSpec> = spec
        .domains
        .iter()
        .enumerate()
        .map(|(i, id)| DomainSpec { id: id.clone(), index: i + 1 })
        .collect();

    // Per-domain attribute probabilities.
    let tilted: Vec<Vec<Vec<f64>>> = spec
        .attributes
        .iter()
        .map(|a| {
            (0..domains.len())
                .map(|_| {
                    let raw: Vec<f64> = a.probs.iter().map(|p| p * (a.domain_sd * normal(&mut rng)).exp()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|p| p / s).collect()
                })
                .collect()
        })
        .collect();

    let mut attr_defs: Vec<AttributeDef> = spec
        .attributes
        .iter()
        .map(|a| {
            let mut levels = a.levels.clone();
            if a.employed_only {
                levels.push("none".into());
            }
            AttributeDef::new(a.name.clone(), levels)
        })
        .collect();
    let band_def = spec.hours_band.definition();
    attr_defs.push(band_def.clone());
    let schema = Schema {
        calibration: vec![EMPLOYED.into(), UNEMPLOYED.into(), HOURS.into()],
        attributes: attr_defs,
        outcomes: spec.outcomes.iter().map(|o| o.name.clone()).collect(),
    };

    let mut records = Vec::new();
    let mut id = 0u64;
    for (h, s) in strata.iter().enumerate() {
        let d = s.domain.unwrap();
        let z = s.covariates[0];
        let [ve, vu, vh] = effects[h];
        let eta_e = spec.employment.intercept + spec.employment.slope * z + spec.employment.effect_sd * ve;
        let eta_u = spec.unemployment.intercept + spec.unemployment.slope * z + spec.unemployment.effect_sd * vu;
        let mu_h = spec.hours.mean + spec.hours.slope * z + spec.hours.effect_sd * vh;
        let mut prng = seed::rng(seed::derive(base, h as u64 + 1));
        for _ in 0..s.population_size {
            id += 1;
            let mut codes = vec![0u32; spec.attributes.len() + 1];
            let mut shift_e = 0.0;
            for (a, m) in spec.attributes.iter().enumerate() {
                if !m.employed_only {
                    let k = categorical(&mut prng, &tilted[a][d]);
                    codes[a] = k as u32;
                    shift_e += m.employment_shift.get(k).copied().unwrap_or(0.0);
                }
            }
            let employed = prng.random::<f64>() < logistic(eta_e + shift_e);
            let unemployed = !employed && prng.random::<f64>() < logistic(eta_u);
            let mut shift_h = 0.0;
            for (a, m) in spec.attributes.iter().enumerate() {
                if m.employed_only {
                    codes[a] = if employed {
                        categorical(&mut prng, &tilted[a][d]) as u32
                    } else {
                        m.levels.len() as u32
                    };
                }
                if employed {
                    shift_h += m.hours_shift.get(codes[a] as usize).copied().unwrap_or(0.0);
                }
            }
            let hours = if employed {
                let x = mu_h + shift_h + spec.hours.sd * normal(&mut prng);
                x.round().clamp(spec.hours.min, spec.hours.max)
            } else {
                0.0
            };
            codes[spec.attributes.len()] = spec.hours_band.code(&band_def, hours);
            records.push(UnitRecord {
                id,
                stratum: h,
                domain: d,
                weight: 1.0,
                calib: vec![employed as u8 as f64, unemployed as u8 as f64, hours],
                attributes: codes,
                outcomes: vec![0.0; spec.outcomes.len()],
            });
        }
    }

    let mut orng = seed::rng(seed::derive(base, u64::MAX));
    for (k, o) in spec.outcomes.iter().enumerate() {
        generate_outcome(o, k, &schema, &mut records, &mut orng);
    }

    let population = SampleSet::new(records, strata, domains, schema)?;
    Ok(SyntheticFrame { population, seed })
}

fn generate_outcome<R: Rng>(o: &OutcomeModel, k: usize, schema: &Schema, records: &mut [UnitRecord], rng: &mut R) {
    let link = schema.calibration_index(&o.link).expect("validated link");
    let within = o.within.as_ref().map(|w| schema.calibration_index(w).expect("validated within"));
    let inside = |r: &UnitRecord| within.is_none_or(|w| r.calib[w] != 0.0);
    let (mut n, mut s, mut ss) = (0.0, 0.0, 0.0);
    for r in records.iter().filter(|r| inside(r)) {
        let y = r.calib[link];
        n += 1.0;
        s += y;
        ss += y * y;
    }
    let mean = if n > 0.0 { s / n } else { 0.0 };
    let sd = if n > 1.0 { ((ss - n * mean * mean) / (n - 1.0)).max(0.0).sqrt() } else { 0.0 };
    let (rho, threshold) = match o.kind {
        OutcomeKind::Continuous => (o.rho, 0.0),
        OutcomeKind::Binary => {
            let n = std_normal();
            let c = n.inverse_cdf(1.0 - o.mean);
            // Thresholding attenuates the latent correlation by φ(c)/√(q(1−q)).
            let scale = binary_max_rho(o.mean);
            ((o.rho / scale).clamp(-1.0, 1.0), c)
        }
    };
    let resid = (1.0 - rho * rho).max(0.0).sqrt();
    for r in records.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        let is_inside = inside(r);
        if !is_inside {
            if let Some(v) = o.outside {
                r.outcomes[k] = v;
                continue;
            }
        }
        let zy = if is_inside && sd > 0.0 { (r.calib[link] - mean) / sd } else { rng.sample(StandardNormal) };
        let latent = rho * zy + resid * e;
        let mut v = match o.kind {
            OutcomeKind::Continuous => o.mean + o.sd * latent,
            OutcomeKind::Binary => (latent > threshold) as u8 as f64,
        };
        if let Some(f) = o.floor {
            v = v.max(f);
        }
        r.outcomes[k] = v;
    }
}
