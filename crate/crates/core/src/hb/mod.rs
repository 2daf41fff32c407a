//! Hierarchical Bayes small-area models and their posterior draws.
//!
//! Two linking models are provided: a logit-normal binomial model for binary
//! variables ([`binary`]) and a Gaussian Fay–Herriot model for continuous
//! variables ([`fay_herriot`]). Both produce stratum-level draws which
//! [`draws_to_domain_totals`] aggregates into the `p`-vector of domain totals
//! consumed by calibration.

pub mod binary;
pub mod convergence;
pub mod fay_herriot;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use binary::{fit_binary_hb, BinaryHbInput};
pub use convergence::{gelman_rubin, ConvergenceReport};
pub use fay_herriot::{compute_psi, fit_gaussian_fh, GaussianFhInput, PsiEstimate};

use crate::domain::{CalibrationSpec, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::CompensatedSum;
use crate::report::num17;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    #[serde(default = "default_burnin")]
    pub burnin: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Set from the run seed, never from the config section.
    #[serde(skip)]
    pub seed: u64,
    /// Initial random-walk scale for the binary model; adapted during burn-in.
    #[serde(default = "default_proposal_sd")]
    pub proposal_sd: f64,
}

fn default_burnin() -> usize {
    1000
}
fn default_iterations() -> usize {
    5000
}
fn default_chains() -> usize {
    3
}
fn default_proposal_sd() -> f64 {
    0.3
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burnin: default_burnin(),
            iterations: default_iterations(),
            chains: default_chains(),
            seed: 0,
            proposal_sd: default_proposal_sd(),
        }
    }
}

impl McmcConfig {
    /// Reduced settings for repeated-sampling runs.
    pub fn reduced(seed: u64) -> Self {
        McmcConfig {
            burnin: 200,
            iterations: 500,
            chains: 3,
            seed,
            proposal_sd: default_proposal_sd(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 {
            return Err(Error::Config("mcmc.chains must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("mcmc.iterations must be >= 1".into()));
        }
        if !(self.proposal_sd > 0.0) {
            return Err(Error::Config("mcmc.proposal_sd must be > 0".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.chains * self.iterations
    }

    pub(crate) fn chain_seed(&self, chain: usize) -> u64 {
        seed::derive(self.seed, chain as u64)
    }
}

/// Retained stratum-level draws for one variable, chains concatenated in
/// chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumDraws {
    /// `B × H`, row-major; `p_h` for binary models, `θ_h` for Fay–Herriot.
    pub values: Vec<f64>,
    pub n_strata: usize,
    pub chain_tags: Vec<u32>,
    pub sigma2: Vec<f64>,
    /// `B × k`, row-major.
    pub beta: Vec<f64>,
    pub warnings: Vec<String>,
    /// Post-burn-in Metropolis acceptance rate (binary model only).
    pub acceptance: Option<f64>,
}

impl StratumDraws {
    pub fn n_draws(&self) -> usize {
        self.chain_tags.len()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.n_strata..(b + 1) * self.n_strata]
    }

    pub fn stratum_mean(&self, h: usize) -> f64 {
        let b = self.n_draws();
        (0..b).map(|i| self.values[i * self.n_strata + h]).sum::<f64>() / b as f64
    }

    pub fn stratum_column(&self, h: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|i| self.values[i * self.n_strata + h]).collect()
    }
}

/// Output of one chain, merged by chain index.
pub(crate) struct ChainOutput {
    pub values: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub beta: Vec<f64>,
    pub accepted: usize,
    pub proposed: usize,
}

pub(crate) fn run_chains<F>(cfg: &McmcConfig, n_strata: usize, f: F) -> Result<StratumDraws>
where
    F: Fn(usize) -> Result<ChainOutput> + Sync,
{
    let outs: Vec<ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(&f)
        .collect::<Result<Vec<_>>>()?;
    let mut draws = StratumDraws {
        values: Vec::with_capacity(cfg.retained() * n_strata),
        n_strata,
        chain_tags: Vec::with_capacity(cfg.retained()),
        sigma2: Vec::with_capacity(cfg.retained()),
        beta: Vec::new(),
        warnings: Vec::new(),
        acceptance: None,
    };
    let (mut acc, mut prop) = (0usize, 0usize);
    for (c, o) in outs.into_iter().enumerate() {
        draws.chain_tags.extend(std::iter::repeat_n(c as u32, o.sigma2.len()));
        draws.values.extend(o.values);
        draws.sigma2.extend(o.sigma2);
        draws.beta.extend(o.beta);
        acc += o.accepted;
        prop += o.proposed;
    }
    if prop > 0 {
        draws.acceptance = Some(acc as f64 / prop as f64);
    }
    Ok(draws)
}

/// `B` draws of the `p`-vector of domain totals.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    draws: Vec<f64>,
    p: usize,
    chain_tags: Vec<u32>,
    posterior_mean: Vec<f64>,
}

impl PosteriorDraws {
    /// Builds from row-major `B × p` values; the posterior mean is the
    /// column mean.
    pub fn new(draws: Vec<f64>, p: usize, chain_tags: Vec<u32>) -> Result<Self> {
        if p == 0 || !draws.len().is_multiple_of(p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: draws.len(),
                context: "draw matrix is not B x p".into(),
            });
        }
        let b = draws.len() / p;
        if b == 0 {
            return Err(Error::Invalid("draw matrix has no rows".into()));
        }
        if chain_tags.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                found: chain_tags.len(),
                context: "chain tags".into(),
            });
        }
        let bad = draws.iter().filter(|x| !x.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite {
                count: bad,
                context: "posterior draws".into(),
            });
        }
        let mut posterior_mean = vec![0.0; p];
        for (j, m) in posterior_mean.iter_mut().enumerate() {
            let mut s = CompensatedSum::default();
            for i in 0..b {
                s.add(draws[i * p + j]);
            }
            *m = s.value() / b as f64;
        }
        Ok(PosteriorDraws {
            draws,
            p,
            chain_tags,
            posterior_mean,
        })
    }

    /// Draws given as rows, all from a single chain.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Invalid("ragged draw rows".into()));
        }
        Self::new(rows.concat(), p, vec![0; rows.len()])
    }

    pub fn n_draws(&self) -> usize {
        self.chain_tags.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.draws[b * self.p..(b + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.p)
    }

    pub fn column(&self, pos: usize) -> Vec<f64> {
        self.rows().map(|r| r[pos]).collect()
    }

    pub fn chain_tags(&self) -> &[u32] {
        &self.chain_tags
    }

    pub fn n_chains(&self) -> usize {
        let mut tags: Vec<u32> = self.chain_tags.clone();
        tags.sort_unstable();
        tags.dedup();
        tags.len()
    }

    pub fn posterior_mean(&self) -> &[f64] {
        &self.posterior_mean
    }

    /// Sample covariance (divisor `B − 1`), row-major `p × p`.
    pub fn covariance(&self) -> Vec<f64> {
        let (b, p) = (self.n_draws(), self.p);
        let mut cov = vec![0.0; p * p];
        if b < 2 {
            return cov;
        }
        let m = &self.posterior_mean;
        for r in self.rows() {
            for i in 0..p {
                let di = r[i] - m[i];
                if di == 0.0 {
                    continue;
                }
                for j in 0..p {
                    cov[i * p + j] += di * (r[j] - m[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (b - 1) as f64);
        cov
    }

    /// Writes the interchange format: `#` metadata lines, then a header
    /// `chain,v1_d1,…` and one row per draw in block order.
    pub fn write_csv(&self, path: &Path, spec: &CalibrationSpec, meta: &[(String, String)]) -> Result<()> {
        if spec.p() != self.p {
            return Err(Error::DimensionMismatch {
                expected: spec.p(),
                found: self.p,
                context: "draw columns vs calibration spec".into(),
            });
        }
        let mut out = Vec::new();
        for (k, v) in meta {
            writeln!(out, "# {k}={v}").unwrap();
        }
        let mut header = vec!["chain".to_string()];
        header.extend((0..self.p).map(|j| spec.column_name(j)));
        writeln!(out, "{}", header.join(",")).unwrap();
        for (r, &c) in self.rows().zip(&self.chain_tags) {
            let mut line = c.to_string();
            for &x in r {
                line.push(',');
                line.push_str(&num17(x));
            }
            writeln!(out, "{line}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, spec: &CalibrationSpec) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        let chain_col = headers.iter().position(|h| h == "chain");
        let cols: Vec<usize> = (0..spec.p())
            .map(|j| {
                let name = spec.column_name(j);
                headers.iter().position(|h| h == name).ok_or_else(|| {
                    Error::DimensionMismatch {
                        expected: spec.p(),
                        found: headers.len() - chain_col.map_or(0, |_| 1),
                        context: format!("draw file {} lacks column {name}", path.display()),
                    }
                })
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::new();
        let mut tags = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::Invalid(format!("{}:{}: bad number `{s}`", path.display(), line + 2))
                })
            };
            tags.push(match chain_col {
                Some(j) => rec[j].parse::<u32>().map_err(|_| {
                    Error::Invalid(format!("{}:{}: bad chain tag", path.display(), line + 2))
                })?,
                None => 0,
            });
            for &j in &cols {
                values.push(parse(&rec[j])?);
            }
        }
        Self::new(values, spec.p(), tags)
    }
}

/// Aggregates stratum-level draws (one entry per calibration variable, in
/// spec order) into domain totals: `T^{(v,d),(b)} = Σ_{h∈d} N_h · x_h^{(b)}`.
pub fn draws_to_domain_totals(
    stratum_draws: &[StratumDraws],
    sample: &SampleSet,
    spec: &CalibrationSpec,
) -> Result<PosteriorDraws> {
    if stratum_draws.len() != spec.n_variables() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_variables(),
            found: stratum_draws.len(),
            context: "stratum draw sets vs calibration variables".into(),
        });
    }
    let by_domain = sample.strata_by_domain()?;
    if by_domain.len() != spec.n_domains() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_domains(),
            found: by_domain.len(),
            context: "sample domains vs calibration spec".into(),
        });
    }
    let h_total = sample.strata().len();
    let b = stratum_draws[0].n_draws();
    for s in stratum_draws {
        if s.n_strata != h_total {
            return Err(Error::DimensionMismatch {
                expected: h_total,
                found: s.n_strata,
                context: "strata in stratum draws".into(),
            });
        }
        if s.n_draws() != b || s.chain_tags != stratum_draws[0].chain_tags {
            return Err(Error::Invalid(
                "stratum draw sets have different draw counts or chain layouts".into(),
            ));
        }
    }
    let sizes: Vec<f64> = sample.strata().iter().map(|s| s.population_size as f64).collect();
    let p = spec.p();
    let mut out = vec![0.0; b * p];
    for (v, sd) in stratum_draws.iter().enumerate() {
        for i in 0..b {
            let row = sd.row(i);
            for (d, hs) in by_domain.iter().enumerate() {
                out[i * p + spec.position(v, d)] = hs.iter().map(|&h| sizes[h] * row[h]).sum();
            }
        }
    }
    PosteriorDraws::new(out, p, stratum_draws[0].chain_tags.clone())
}

/// Linking model for one calibration variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VariableModel {
    /// Logit-normal binomial model on stratum proportions.
    Binary {
        prior_df: f64,
        prior_scale: f64,
        #[serde(default)]
        fixed_sigma2: Option<f64>,
    },
    /// Fay–Herriot model on stratum means.
    Gaussian {
        prior_df: f64,
        prior_scale: f64,
        #[serde(default)]
        fixed_sigma2: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HbConfig {
    /// Model per calibration variable name.
    pub models: BTreeMap<String, VariableModel>,
    /// Prepend an intercept column to the stratum covariates.
    #[serde(default = "yes")]
    pub intercept: bool,
    /// Convergence threshold on R-hat max.
    #[serde(default = "default_rhat_threshold")]
    pub rhat_threshold: f64,
}

fn yes() -> bool {
    true
}
fn default_rhat_threshold() -> f64 {
    1.2
}

/// Everything produced by fitting all calibration variables.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub draws: PosteriorDraws,
    pub stratum_draws: Vec<StratumDraws>,
    pub convergence: ConvergenceReport,
    pub warnings: Vec<String>,
}

fn stratum_covariates(sample: &SampleSet, intercept: bool) -> Vec<Vec<f64>> {
    sample
        .strata()
        .iter()
        .map(|s| {
            let mut z = Vec::with_capacity(s.covariates.len() + 1);
            if intercept {
                z.push(1.0);
            }
            z.extend_from_slice(&s.covariates);
            z
        })
        .collect()
}

/// Builds the binomial model input for calibration variable `v` (counts of
/// ones per stratum).
pub fn binary_input(sample: &SampleSet, v: usize, covariates: Vec<Vec<f64>>, prior_df: f64, prior_scale: f64) -> Result<BinaryHbInput> {
    let h = sample.strata().len();
    let mut m = vec![0u64; h];
    for r in sample.records() {
        let y = r.calib[v];
        if y != 0.0 && y != 1.0 {
            return Err(Error::Invalid(format!(
                "variable `{}` is modelled as binary but record {} has value {y}",
                sample.schema().calibration[v],
                r.id
            )));
        }
        if y == 1.0 {
            m[r.stratum] += 1;
        }
    }
    let n: Vec<u64> = sample.stratum_counts().iter().map(|&c| c as u64).collect();
    Ok(BinaryHbInput {
        successes: m,
        trials: n,
        covariates,
        prior_df,
        prior_scale,
        fixed_sigma2: None,
    })
}

/// Builds the Fay–Herriot input for variable `v`: weighted stratum means and
/// `ψ_h` from [`compute_psi`].
pub fn gaussian_input(sample: &SampleSet, v: usize, covariates: Vec<Vec<f64>>, prior_df: f64, prior_scale: f64) -> Result<GaussianFhInput> {
    let name = &sample.schema().calibration[v];
    let psi = compute_psi(sample, name)?;
    let degenerate: Vec<String> = psi
        .iter()
        .zip(sample.strata())
        .filter(|(p, _)| p.degenerate)
        .map(|(_, s)| s.id.clone())
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::Invalid(format!(
            "variable `{name}` has zero sampling variance in strata: {}",
            degenerate.join(", ")
        )));
    }
    let h = sample.strata().len();
    let mut num = vec![0.0; h];
    let mut den = vec![0.0; h];
    for r in sample.records() {
        num[r.stratum] += r.weight * r.calib[v];
        den[r.stratum] += r.weight;
    }
    Ok(GaussianFhInput {
        direct: num.iter().zip(&den).map(|(a, b)| a / b).collect(),
        psi: psi.iter().map(|p| p.psi).collect(),
        covariates,
        prior_df,
        prior_scale,
        fixed_sigma2: None,
    })
}

/// Fits every calibration variable's model and assembles domain-total draws.
/// Variable `v` uses the seed stream `derive(mcmc.seed, v)`.
pub fn fit_models(
    sample: &SampleSet,
    spec: &CalibrationSpec,
    hb: &HbConfig,
    mcmc: &McmcConfig,
) -> Result<FitOutput> {
    mcmc.validate()?;
    sample.check_spec(spec)?;
    let z = stratum_covariates(sample, hb.intercept);
    let mut stratum_draws = Vec::with_capacity(spec.n_variables());
    let mut warnings = Vec::new();
    for (v, name) in spec.variables().iter().enumerate() {
        let model = hb
            .models
            .get(name)
            .ok_or_else(|| Error::Config(format!("no HB model configured for `{name}`")))?;
        let cfg = McmcConfig {
            seed: seed::derive(mcmc.seed, v as u64),
            ..mcmc.clone()
        };
        let draws = match model {
            VariableModel::Binary {
                prior_df,
                prior_scale,
                fixed_sigma2,
            } => {
                let mut input = binary_input(sample, v, z.clone(), *prior_df, *prior_scale)?;
                input.fixed_sigma2 = *fixed_sigma2;
                fit_binary_hb(&input, &cfg)?
            }
            VariableModel::Gaussian {
                prior_df,
                prior_scale,
                fixed_sigma2,
            } => {
                let mut input = gaussian_input(sample, v, z.clone(), *prior_df, *prior_scale)?;
                input.fixed_sigma2 = *fixed_sigma2;
                fit_gaussian_fh(&input, &cfg)?
            }
        };
        warnings.extend(draws.warnings.iter().map(|w| format!("{name}: {w}")));
        stratum_draws.push(draws);
    }
    let draws = draws_to_domain_totals(&stratum_draws, sample, spec)?;
    let convergence = gelman_rubin(&draws);
    if !convergence.available {
        warnings.push("convergence diagnostics unavailable: fewer than 2 chains".into());
    }
    Ok(FitOutput {
        draws,
        stratum_draws,
        convergence,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_mean_is_column_mean() {
        let d = PosteriorDraws::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0], vec![5.0, 60.0]]).unwrap();
        assert_eq!(d.posterior_mean(), &[3.0, 30.0]);
        assert_eq!(d.column(1), vec![10.0, 20.0, 60.0]);
        let cov = d.covariance();
        assert_eq!(cov[0], 4.0);
        assert_eq!(cov[1], cov[2]);
    }

    #[test]
    fn rejects_non_finite_and_ragged() {
        assert!(matches!(
            PosteriorDraws::from_rows(&[vec![1.0, f64::NAN]]),
            Err(Error::NonFinite { count: 1, .. })
        ));
        assert!(PosteriorDraws::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }
}
