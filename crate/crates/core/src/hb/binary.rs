//! Logit-normal binomial model:
//!
//! ```text
//! m_h | p_h ~ Binomial(n_h, p_h)
//! logit(p_h) = z_hᵀβ + v_h,   v_h ~ N(0, σ_v²)
//! σ_v² ~ Scaled-Inv-χ²(ν, s²),  β flat
//! ```
//!
//! Metropolis-within-Gibbs: independent random-walk updates of each `v_h`, a
//! block random-walk update of `β` shaped by `(ZᵀZ)⁻¹`, and the conjugate
//! scaled-inverse-χ² draw of `σ_v²`. Proposal scales adapt during burn-in
//! toward 35% acceptance and are frozen afterwards.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use super::{run_chains, ChainOutput, McmcConfig, StratumDraws};
use crate::error::{Error, Result};
use crate::linalg::{cross_products, dot, Cholesky};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHbInput {
    pub successes: Vec<u64>,
    pub trials: Vec<u64>,
    /// One covariate row `z_h` per stratum (include an intercept column
    /// explicitly).
    pub covariates: Vec<Vec<f64>>,
    pub prior_df: f64,
    pub prior_scale: f64,
    /// Holds `σ_v²` at a known value instead of sampling it; zero removes the
    /// random effects.
    pub fixed_sigma2: Option<f64>,
}

const TARGET_ACCEPT: f64 = 0.35;
const ADAPT_BATCH: usize = 20;

impl BinaryHbInput {
    fn validate(&self) -> Result<Vec<String>> {
        let h = self.successes.len();
        if self.trials.len() != h || self.covariates.len() != h {
            return Err(Error::DimensionMismatch {
                expected: h,
                found: self.trials.len().min(self.covariates.len()),
                context: "binary HB strata".into(),
            });
        }
        let min_strata = if self.fixed_sigma2.is_some() { 1 } else { 2 };
        if h < min_strata {
            return Err(Error::Invalid(format!(
                "binary HB needs at least {min_strata} strata, got {h}"
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
        let bad = self.covariates.iter().flatten().filter(|x| !x.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite {
                count: bad,
                context: "stratum covariates".into(),
            });
        }
        for (i, (&m, &n)) in self.successes.iter().zip(&self.trials).enumerate() {
            if n == 0 || m > n {
                return Err(Error::Invalid(format!(
                    "stratum {}: need 0 <= m_h <= n_h and n_h >= 1 (m={m}, n={n})",
                    i + 1
                )));
            }
        }
        let mut warnings = Vec::new();
        if self.successes.iter().all(|&m| m == 0) {
            warnings.push("degenerate data: m_h = 0 in every stratum".to_string());
        }
        if self.successes.iter().zip(&self.trials).all(|(m, n)| m == n) {
            warnings.push("degenerate data: m_h = n_h in every stratum".to_string());
        }
        Ok(warnings)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse logit, kept strictly inside (0, 1).
pub(crate) fn logistic(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn loglik(m: f64, n: f64, eta: f64) -> f64 {
    m * eta - n * softplus(eta)
}

fn adapt(scale: &mut f64, accepted: usize) {
    let rate = accepted as f64 / ADAPT_BATCH as f64;
    *scale = (*scale * (2.0 * (rate - TARGET_ACCEPT)).exp()).clamp(1e-4, 1e2);
}

fn metropolis<R: Rng>(rng: &mut R, log_ratio: f64) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Samples the posterior of `p_h`. Chains run in parallel; chain `c` uses
/// seed `derive(config.seed, c)`.
pub fn fit_binary_hb(input: &BinaryHbInput, config: &McmcConfig) -> Result<StratumDraws> {
    config.validate()?;
    let warnings = input.validate()?;
    let h = input.successes.len();
    let z = &input.covariates;
    let k = z[0].len();
    let (ztz, _) = cross_products(z, &vec![0.0; h]);
    let max_diag = (0..k).map(|j| ztz[j * k + j]).fold(0.0f64, f64::max);
    let zchol = Cholesky::factor(&ztz, k, k as f64 * max_diag * 1e-12);
    if !zchol.is_full_rank() {
        return Err(Error::SingularCovariates {
            columns: zchol.dependent().iter().map(|j| format!("z{}", j + 1)).collect(),
        });
    }
    let m: Vec<f64> = input.successes.iter().map(|&x| x as f64).collect();
    let n: Vec<f64> = input.trials.iter().map(|&x| x as f64).collect();
    let logits: Vec<f64> = m
        .iter()
        .zip(&n)
        .map(|(&m, &n)| ((m + 0.5) / (n - m + 0.5)).ln())
        .collect();
    let (_, zl) = cross_products(z, &logits);
    let beta_ls = zchol.solve(&zl);
    let random_effects = input.fixed_sigma2 != Some(0.0);

    let mut draws = run_chains(config, h, |chain| {
        let mut rng = seed::rng(config.chain_seed(chain));

        // Dispersed start around the empirical-logit least-squares fit.
        let mut beta: Vec<f64> = beta_ls
            .iter()
            .map(|b| b + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut xb: Vec<f64> = z.iter().map(|zi| dot(zi, &beta)).collect();
        let mut v: Vec<f64> = if random_effects {
            (0..h).map(|i| logits[i] - xb[i]).collect()
        } else {
            vec![0.0; h]
        };
        let mut sigma2 = match input.fixed_sigma2 {
            Some(s) => s,
            None => {
                let ms = v.iter().map(|x| x * x).sum::<f64>() / h as f64;
                ms.max(0.01) * (0.5 * rng.sample::<f64, _>(StandardNormal)).exp()
            }
        };
        let start: f64 = (0..h).map(|i| loglik(m[i], n[i], xb[i] + v[i])).sum();
        if !start.is_finite() {
            return Err(Error::NonFiniteLogPosterior(format!("initial state of chain {chain}")));
        }

        let mut v_scale = vec![config.proposal_sd; h];
        let mut beta_scale = config.proposal_sd;
        let mut v_acc = vec![0usize; h];
        let mut beta_acc = 0usize;
        let chi = ChiSquared::new(input.prior_df + h as f64).expect("positive df");
        let mut out = ChainOutput {
            values: Vec::with_capacity(config.iterations * h),
            sigma2: Vec::with_capacity(config.iterations),
            beta: Vec::with_capacity(config.iterations * k),
            accepted: 0,
            proposed: 0,
        };
        let mut step = vec![0.0; k];
        let mut prop_xb = vec![0.0; h];

        for it in 0..config.burnin + config.iterations {
            let burning = it < config.burnin;

            if random_effects {
                for i in 0..h {
                    let cur = v[i];
                    let prop = cur + v_scale[i] * rng.sample::<f64, _>(StandardNormal);
                    let ratio = loglik(m[i], n[i], xb[i] + prop) - loglik(m[i], n[i], xb[i] + cur)
                        - (prop * prop - cur * cur) / (2.0 * sigma2);
                    if ratio.is_nan() {
                        return Err(Error::NonFiniteLogPosterior(format!("v_{} update", i + 1)));
                    }
                    let accept = metropolis(&mut rng, ratio);
                    if accept {
                        v[i] = prop;
                        v_acc[i] += 1;
                    }
                    if !burning {
                        out.proposed += 1;
                        out.accepted += accept as usize;
                    }
                }
            }

            // β step with covariance ∝ (ZᵀZ)⁻¹: solve Lᵀ s = ε.
            for s in step.iter_mut() {
                *s = rng.sample(StandardNormal);
            }
            zchol.backward(&mut step);
            let prop_beta: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + beta_scale * s).collect();
            let mut ratio = 0.0;
            for i in 0..h {
                prop_xb[i] = dot(&z[i], &prop_beta);
                ratio += loglik(m[i], n[i], prop_xb[i] + v[i]) - loglik(m[i], n[i], xb[i] + v[i]);
            }
            if ratio.is_nan() {
                return Err(Error::NonFiniteLogPosterior("beta update".into()));
            }
            let accept = metropolis(&mut rng, ratio);
            if accept {
                beta = prop_beta;
                std::mem::swap(&mut xb, &mut prop_xb);
                beta_acc += 1;
            }
            if !burning {
                out.proposed += 1;
                out.accepted += accept as usize;
            }

            if input.fixed_sigma2.is_none() {
                let ss: f64 = v.iter().map(|x| x * x).sum();
                sigma2 = (input.prior_df * input.prior_scale + ss) / chi.sample(&mut rng);
            }

            if burning && (it + 1) % ADAPT_BATCH == 0 {
                for i in 0..h {
                    adapt(&mut v_scale[i], v_acc[i]);
                    v_acc[i] = 0;
                }
                adapt(&mut beta_scale, beta_acc);
                beta_acc = 0;
            }
            if !burning {
                out.values.extend((0..h).map(|i| logistic(xb[i] + v[i])));
                out.sigma2.push(sigma2);
                out.beta.extend_from_slice(&beta);
            }
        }
        Ok(out)
    })?;
    draws.warnings = warnings;
    Ok(draws)
}
