//! Gaussian Fay–Herriot model on stratum means:
//!
//! ```text
//! θ̂_h | θ_h ~ N(θ_h, ψ_h)
//! θ_h = z_hᵀβ + v_h,   v_h ~ N(0, σ_v²)
//! σ_v² ~ Scaled-Inv-χ²(ν, s²),  β flat
//! ```
//!
//! Every full conditional is conjugate, so the sampler is plain Gibbs.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use super::{run_chains, ChainOutput, McmcConfig, StratumDraws};
use crate::domain::{SampleSet, VariableRef};
use crate::error::{Error, Result};
use crate::linalg::{cross_products, dot, Cholesky};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFhInput {
    pub direct: Vec<f64>,
    pub psi: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
    pub prior_df: f64,
    pub prior_scale: f64,
    /// Holds `σ_v²` fixed; zero reduces the model to the synthetic regression.
    pub fixed_sigma2: Option<f64>,
}

/// Sampling variance of a stratum mean, `DEFF_h (1 − f_h) S_h² / n_h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiEstimate {
    pub psi: f64,
    /// Set when `ψ_h = 0` (constant values or a census stratum).
    pub degenerate: bool,
}

/// `ψ_h` for every stratum, using the within-stratum sample variance with
/// divisor `n_h − 1`.
pub fn compute_psi(sample: &SampleSet, variable: &str) -> Result<Vec<PsiEstimate>> {
    let var = sample.schema().resolve_variable(variable)?;
    let h = sample.strata().len();
    let counts = sample.stratum_counts();
    let short: Vec<String> = sample
        .strata()
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c < 2)
        .map(|(s, _)| s.id.clone())
        .collect();
    if !short.is_empty() {
        return Err(Error::InsufficientStratumSample { strata: short });
    }
    let value = |r: &crate::domain::UnitRecord| match var {
        VariableRef::Calibration(v) => r.calib[v],
        VariableRef::Outcome(o) => r.outcomes[o],
    };
    let mut sum = vec![0.0; h];
    for r in sample.records() {
        sum[r.stratum] += value(r);
    }
    let mean: Vec<f64> = sum.iter().zip(counts).map(|(s, &c)| s / c as f64).collect();
    let mut ss = vec![0.0; h];
    for r in sample.records() {
        let d = value(r) - mean[r.stratum];
        ss[r.stratum] += d * d;
    }
    Ok((0..h)
        .map(|i| {
            let n = counts[i] as f64;
            let s2 = ss[i] / (n - 1.0);
            let psi = sample.strata()[i].deff * (1.0 - sample.sampling_fraction(i)) * s2 / n;
            PsiEstimate {
                psi,
                degenerate: !(psi > 0.0),
            }
        })
        .collect())
}

impl GaussianFhInput {
    fn validate(&self) -> Result<()> {
        let h = self.direct.len();
        if self.psi.len() != h || self.covariates.len() != h {
            return Err(Error::DimensionMismatch {
                expected: h,
                found: self.psi.len().min(self.covariates.len()),
                context: "Fay-Herriot strata".into(),
            });
        }
        let min_strata = if self.fixed_sigma2.is_some() { 1 } else { 2 };
        if h < min_strata {
            return Err(Error::Invalid(format!(
                "Fay-Herriot needs at least {min_strata} strata, got {h}"
            )));
        }
        if let Some(i) = self.psi.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Invalid(format!(
                "stratum {}: psi must be positive and finite, got {}",
                i + 1,
                self.psi[i]
            )));
        }
        if !(self.prior_df > 0.0) || !(self.prior_scale > 0.0) {
            return Err(Error::Invalid("prior_df and prior_scale must be positive".into()));
        }
        if let Some(s) = self.fixed_sigma2 {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Invalid("fixed sigma2 must be finite and >= 0".into()));
            }
        }
        let k = self.covariates[0].len();
        if k == 0 || self.covariates.iter().any(|z| z.len() != k) {
            return Err(Error::Invalid("covariate dimension must be constant and >= 1".into()));
        }
        let bad = self
            .direct
            .iter()
            .chain(self.covariates.iter().flatten())
            .filter(|x| !x.is_finite())
            .count();
        if bad > 0 {
            return Err(Error::NonFinite {
                count: bad,
                context: "Fay-Herriot inputs".into(),
            });
        }
        Ok(())
    }
}

fn factor_checked(ztz: &[f64], k: usize) -> Result<Cholesky> {
    let max_diag = (0..k).map(|j| ztz[j * k + j]).fold(0.0f64, f64::max);
    let ch = Cholesky::factor(ztz, k, k as f64 * max_diag * 1e-12);
    if !ch.is_full_rank() {
        return Err(Error::SingularCovariates {
            columns: ch.dependent().iter().map(|j| format!("z{}", j + 1)).collect(),
        });
    }
    Ok(ch)
}

/// Draws `N(mean, scale² (LLᵀ)⁻¹)`.
fn gaussian_from_precision<R: Rng>(rng: &mut R, ch: &Cholesky, mean: &[f64], scale: f64) -> Vec<f64> {
    let mut e: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
    ch.backward(&mut e);
    mean.iter().zip(&e).map(|(m, x)| m + scale * x).collect()
}

/// Samples the posterior of `θ_h`. Chain `c` uses seed
/// `derive(config.seed, c)`.
pub fn fit_gaussian_fh(input: &GaussianFhInput, config: &McmcConfig) -> Result<StratumDraws> {
    config.validate()?;
    input.validate()?;
    let h = input.direct.len();
    let z = &input.covariates;
    let k = z[0].len();
    let (ztz, zt_direct) = cross_products(z, &input.direct);
    let zchol = factor_checked(&ztz, k)?;

    // With σ_v² = 0 the θ_h collapse onto z_hᵀβ and β is a weighted
    // regression on the direct estimates.
    let synthetic = if input.fixed_sigma2 == Some(0.0) {
        let scaled: Vec<Vec<f64>> = z
            .iter()
            .zip(&input.psi)
            .map(|(zi, p)| zi.iter().map(|x| x / p.sqrt()).collect())
            .collect();
        let y: Vec<f64> = input.direct.iter().zip(&input.psi).map(|(d, p)| d / p.sqrt()).collect();
        let (a, b) = cross_products(&scaled, &y);
        let ch = factor_checked(&a, k)?;
        let mean = ch.solve(&b);
        Some((ch, mean))
    } else {
        None
    };
    let beta_ls = zchol.solve(&zt_direct);

    run_chains(config, h, |chain| {
        let mut rng = seed::rng(config.chain_seed(chain));
        let mut out = ChainOutput {
            values: Vec::with_capacity(config.iterations * h),
            sigma2: Vec::with_capacity(config.iterations),
            beta: Vec::with_capacity(config.iterations * k),
            accepted: 0,
            proposed: 0,
        };
        if let Some((ch, mean)) = &synthetic {
            for it in 0..config.burnin + config.iterations {
                let beta = gaussian_from_precision(&mut rng, ch, mean, 1.0);
                if it >= config.burnin {
                    out.values.extend(z.iter().map(|zi| dot(zi, &beta)));
                    out.sigma2.push(0.0);
                    out.beta.extend_from_slice(&beta);
                }
            }
            return Ok(out);
        }

        let mut theta: Vec<f64> = (0..h)
            .map(|i| input.direct[i] + input.psi[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut beta = beta_ls.clone();
        let mut sigma2 = match input.fixed_sigma2 {
            Some(s) => s,
            None => {
                let ms = (0..h)
                    .map(|i| (theta[i] - dot(&z[i], &beta)).powi(2))
                    .sum::<f64>()
                    / h as f64;
                ms.max(input.prior_scale * 1e-3) * (0.5 * rng.sample::<f64, _>(StandardNormal)).exp()
            }
        };
        let chi = ChiSquared::new(input.prior_df + h as f64).expect("positive df");

        for it in 0..config.burnin + config.iterations {
            let xb: Vec<f64> = z.iter().map(|zi| dot(zi, &beta)).collect();
            for i in 0..h {
                let prec = 1.0 / input.psi[i] + 1.0 / sigma2;
                let mean = (input.direct[i] / input.psi[i] + xb[i] / sigma2) / prec;
                theta[i] = mean + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
            }
            let (_, zt_theta) = cross_products(z, &theta);
            let mean = zchol.solve(&zt_theta);
            beta = gaussian_from_precision(&mut rng, &zchol, &mean, sigma2.sqrt());
            if input.fixed_sigma2.is_none() {
                let ss: f64 = (0..h).map(|i| (theta[i] - dot(&z[i], &beta)).powi(2)).sum();
                sigma2 = (input.prior_df * input.prior_scale + ss) / chi.sample(&mut rng);
            }
            if theta.iter().any(|t| !t.is_finite()) || !sigma2.is_finite() {
                return Err(Error::NonFiniteLogPosterior(format!("Fay-Herriot chain {chain}")));
            }
            if it >= config.burnin {
                out.values.extend_from_slice(&theta);
                out.sigma2.push(sigma2);
                out.beta.extend_from_slice(&beta);
            }
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs_give_equal_means() {
        let input = GaussianFhInput {
            direct: vec![5.0; 4],
            psi: vec![1.0; 4],
            covariates: vec![vec![1.0]; 4],
            prior_df: 2.0,
            prior_scale: 1.0,
            fixed_sigma2: None,
        };
        let d = fit_gaussian_fh(&input, &McmcConfig::reduced(3)).unwrap();
        let means: Vec<f64> = (0..4).map(|h| d.stratum_mean(h)).collect();
        for m in &means {
            assert!((m - 5.0).abs() < 0.2, "{means:?}");
        }
    }

    #[test]
    fn rejects_nonpositive_psi() {
        let input = GaussianFhInput {
            direct: vec![1.0, 2.0],
            psi: vec![1.0, 0.0],
            covariates: vec![vec![1.0]; 2],
            prior_df: 2.0,
            prior_scale: 1.0,
            fixed_sigma2: None,
        };
        assert!(fit_gaussian_fh(&input, &McmcConfig::reduced(3)).is_err());
    }
}
