use serde::Serialize;

use super::PosteriorDraws;

/// Per-parameter potential scale reduction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// False with fewer than two chains, unequal chain lengths, or fewer than
    /// two draws per chain.
    pub available: bool,
    pub n_chains: usize,
    pub rhat: Vec<f64>,
    pub rhat_max: f64,
}

impl ConvergenceReport {
    fn unavailable(n_chains: usize) -> Self {
        ConvergenceReport {
            available: false,
            n_chains,
            rhat: Vec::new(),
            rhat_max: f64::NAN,
        }
    }

    pub fn converged(&self, threshold: f64) -> bool {
        !self.available || self.rhat_max <= threshold
    }
}

/// Gelman–Rubin ratio per column, `R̂ = sqrt((W + B/n) / W)` with `W` the mean
/// within-chain variance and `B/n` the variance of chain means. Dropping the
/// usual `(n−1)/n` factor on `W` makes identical chains give exactly 1.
pub fn gelman_rubin(draws: &PosteriorDraws) -> ConvergenceReport {
    let mut order: Vec<u32> = Vec::new();
    for &t in draws.chain_tags() {
        if !order.contains(&t) {
            order.push(t);
        }
    }
    let m = order.len();
    if m < 2 {
        return ConvergenceReport::unavailable(m);
    }
    let groups: Vec<Vec<usize>> = order
        .iter()
        .map(|&t| {
            draws
                .chain_tags()
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == t)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let n = groups[0].len();
    if n < 2 || groups.iter().any(|g| g.len() != n) {
        return ConvergenceReport::unavailable(m);
    }
    let nf = n as f64;
    let mut rhat = Vec::with_capacity(draws.p());
    for j in 0..draws.p() {
        let mut means = Vec::with_capacity(m);
        let mut w = 0.0;
        for g in &groups {
            let mean = g.iter().map(|&i| draws.row(i)[j]).sum::<f64>() / nf;
            w += g.iter().map(|&i| (draws.row(i)[j] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            means.push(mean);
        }
        w /= m as f64;
        // deviations measured from chain 0 so equal means cancel exactly
        let shift: Vec<f64> = means.iter().map(|x| x - means[0]).collect();
        let centre = shift.iter().sum::<f64>() / m as f64;
        let b_over_n = shift.iter().map(|x| (x - centre).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        let r = if w > 0.0 {
            ((w + b_over_n) / w).sqrt()
        } else if b_over_n == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        rhat.push(r);
    }
    let rhat_max = rhat.iter().copied().fold(1.0f64, f64::max);
    ConvergenceReport {
        available: true,
        n_chains: m,
        rhat,
        rhat_max,
    }
}
