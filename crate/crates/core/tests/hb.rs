mod common;

use common::*;
use phie::domain::{DomainSpec, SampleSet, Schema, StratumSpec, UnitRecord};
use phie::hb::{
    compute_psi, draws_to_domain_totals, fit_binary_hb, fit_gaussian_fh, gelman_rubin, BinaryHbInput, GaussianFhInput,
    McmcConfig, PosteriorDraws, StratumDraws,
};
use phie::Error;

fn long_run(seed: u64) -> McmcConfig {
    McmcConfig {
        burnin: 2000,
        iterations: 20000,
        chains: 3,
        seed,
        proposal_sd: 0.5,
    }
}

/// Mean and batch-means standard error of one column.
fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let batches = 50;
    let size = n / batches;
    let bm: Vec<f64> = (0..batches)
        .map(|b| x[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let var = bm.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

#[test]
fn binary_single_stratum_matches_grid_posterior() {
    // Flat prior on β = logit p with σ² = 0: π(β) ∝ exp(3β − 10 log(1 + e^β)).
    let (m, n) = (3.0, 10.0);
    let (lo, hi, steps) = (-20.0, 20.0, 400_000);
    let h = (hi - lo) / steps as f64;
    let (mut z, mut e) = (0.0, 0.0);
    for i in 0..=steps {
        let b: f64 = lo + i as f64 * h;
        let wgt = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let dens = (m * b - n * (1.0 + b.exp()).ln()).exp() * wgt;
        z += dens;
        e += dens / (1.0 + (-b).exp());
    }
    let exact = e / z;
    let input = BinaryHbInput {
        successes: vec![3],
        trials: vec![10],
        covariates: vec![vec![1.0]],
        prior_df: 1.0,
        prior_scale: 1.0,
        fixed_sigma2: Some(0.0),
    };
    let d = fit_binary_hb(&input, &long_run(1)).unwrap();
    let (mean, se) = mean_and_se(&d.stratum_column(0));
    assert!((mean - exact).abs() < 4.0 * se + 1e-6, "sampler {mean} ± {se}, grid {exact}");
}

#[test]
fn binary_all_zero_counts() {
    let input = BinaryHbInput {
        successes: vec![0; 4],
        trials: vec![30; 4],
        covariates: vec![vec![1.0]; 4],
        prior_df: 2.0,
        prior_scale: 0.1,
        fixed_sigma2: None,
    };
    let d = fit_binary_hb(&input, &McmcConfig::reduced(3)).unwrap();
    assert!(d.warnings.iter().any(|w| w.contains("m_h = 0")));
    assert!(d.values.iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(d.stratum_mean(0) < 0.05);
    assert!(d.sigma2.iter().all(|&s| s > 0.0));
}

#[test]
fn binary_identical_strata_are_exchangeable() {
    let input = BinaryHbInput {
        successes: vec![12, 12, 5],
        trials: vec![40, 40, 40],
        covariates: vec![vec![1.0]; 3],
        prior_df: 2.0,
        prior_scale: 0.1,
        fixed_sigma2: None,
    };
    let d = fit_binary_hb(&input, &long_run(5)).unwrap();
    let mut a = d.stratum_column(0);
    let mut b = d.stratum_column(1);
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // Two-sample Kolmogorov–Smirnov statistic on equal-size samples.
    let n = a.len();
    let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
    while i < n && j < n {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        ks = ks.max((i as f64 - j as f64).abs() / n as f64);
    }
    assert!(ks < 0.05, "KS = {ks}");
}

#[test]
fn fay_herriot_fixed_variance_matches_shrinkage() {
    let direct = vec![10.0, 12.0, 9.0, 15.0, 11.0];
    let psi = vec![1.0, 2.0, 0.5, 4.0, 1.5];
    let s2 = 2.0;
    let input = GaussianFhInput {
        direct: direct.clone(),
        psi: psi.clone(),
        covariates: vec![vec![1.0]; 5],
        prior_df: 1.0,
        prior_scale: 1.0,
        fixed_sigma2: Some(s2),
    };
    let d = fit_gaussian_fh(&input, &long_run(7)).unwrap();
    // Marginally θ̂_h ~ N(β, ψ_h + σ²): the posterior mean of β is the GLS mean.
    let wsum: f64 = psi.iter().map(|p| 1.0 / (p + s2)).sum();
    let mu = direct.iter().zip(&psi).map(|(y, p)| y / (p + s2)).sum::<f64>() / wsum;
    for h in 0..5 {
        let expected = (direct[h] / psi[h] + mu / s2) / (1.0 / psi[h] + 1.0 / s2);
        let (mean, se) = mean_and_se(&d.stratum_column(h));
        assert!((mean - expected).abs() < 4.0 * se + 1e-9, "h={h}: {mean} ± {se} vs {expected}");
    }
}

#[test]
fn fay_herriot_uninformative_stratum_follows_synthetic_part() {
    let input = GaussianFhInput {
        direct: vec![10.0, 11.0, 9.0, 10.5, 1000.0],
        psi: vec![1.0, 1.0, 1.0, 1.0, 1e12],
        covariates: vec![vec![1.0]; 5],
        prior_df: 1.0,
        prior_scale: 1.0,
        fixed_sigma2: None,
    };
    let d = fit_gaussian_fh(&input, &long_run(9)).unwrap();
    let m = d.stratum_mean(4);
    assert!((m - 10.1).abs() < 1.0, "{m}");
}

#[test]
fn fay_herriot_rejects_collinear_covariates() {
    let input = GaussianFhInput {
        direct: vec![1.0, 2.0, 3.0],
        psi: vec![1.0; 3],
        covariates: vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]],
        prior_df: 1.0,
        prior_scale: 1.0,
        fixed_sigma2: None,
    };
    assert!(matches!(
        fit_gaussian_fh(&input, &McmcConfig::reduced(1)),
        Err(Error::SingularCovariates { .. })
    ));
}

fn one_variable_sample(values: &[(usize, f64)], sizes: &[u64]) -> SampleSet {
    let records = values
        .iter()
        .enumerate()
        .map(|(i, &(h, x))| UnitRecord {
            id: i as u64,
            stratum: h,
            domain: 0,
            weight: 1.0,
            calib: vec![x],
            attributes: vec![],
            outcomes: vec![],
        })
        .collect();
    SampleSet::new(
        records,
        sizes
            .iter()
            .enumerate()
            .map(|(h, &n)| StratumSpec::new(format!("h{h}"), n).with_domain(0))
            .collect(),
        vec![DomainSpec { id: "D".into(), index: 1 }],
        Schema {
            calibration: vec!["x".into()],
            attributes: vec![],
            outcomes: vec![],
        },
    )
    .unwrap()
}

#[test]
fn psi_by_hand() {
    let s = one_variable_sample(&[(0, 1.0), (0, 2.0), (0, 3.0), (1, 4.0), (1, 4.0), (2, 1.0), (2, 5.0)], &[30, 10, 2]);
    let psi = compute_psi(&s, "x").unwrap();
    assert!((psi[0].psi - 0.3).abs() < 1e-15);
    assert!(!psi[0].degenerate);
    // Constant stratum and census stratum both give ψ = 0.
    assert!(psi[1].degenerate && psi[1].psi == 0.0);
    assert!(psi[2].degenerate && psi[2].psi == 0.0);
}

#[test]
fn psi_needs_two_units_per_stratum() {
    let s = one_variable_sample(&[(0, 1.0), (0, 2.0), (1, 4.0)], &[30, 10]);
    match compute_psi(&s, "x") {
        Err(Error::InsufficientStratumSample { strata }) => assert_eq!(strata, vec!["h1".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn domain_totals_by_hand() {
    // Strata h0, h1 in domain A (N = 100, 50) and h2 in domain B (N = 20).
    let records = (0..6)
        .map(|i| UnitRecord {
            id: i,
            stratum: (i / 2) as usize,
            domain: usize::from(i >= 4),
            weight: 1.0,
            calib: vec![1.0],
            attributes: vec![],
            outcomes: vec![],
        })
        .collect();
    let s = SampleSet::new(
        records,
        vec![
            StratumSpec::new("h0", 100).with_domain(0),
            StratumSpec::new("h1", 50).with_domain(0),
            StratumSpec::new("h2", 20).with_domain(1),
        ],
        vec![DomainSpec { id: "A".into(), index: 1 }, DomainSpec { id: "B".into(), index: 2 }],
        Schema {
            calibration: vec!["x".into()],
            attributes: vec![],
            outcomes: vec![],
        },
    )
    .unwrap();
    let sd = StratumDraws {
        values: vec![0.5, 0.2, 0.9, 0.1, 0.4, 0.3],
        n_strata: 3,
        chain_tags: vec![0, 1],
        sigma2: vec![1.0, 1.0],
        beta: vec![0.0, 0.0],
        warnings: vec![],
        acceptance: None,
    };
    let d = draws_to_domain_totals(&[sd], &s, &s.calibration_spec()).unwrap();
    assert_eq!(d.row(0), &[100.0 * 0.5 + 50.0 * 0.2, 20.0 * 0.9]);
    assert_eq!(d.row(1), &[100.0 * 0.1 + 50.0 * 0.4, 20.0 * 0.3]);
}

#[test]
fn well_mixed_gaussian_chains_have_rhat_near_one() {
    let mut r = rng(42);
    let (chains, n) = (3, 1000);
    let mut values = Vec::new();
    let mut tags = Vec::new();
    for c in 0..chains {
        for _ in 0..n {
            values.push(normal(&mut r));
            values.push(5.0 + 2.0 * normal(&mut r));
            tags.push(c as u32);
        }
    }
    let d = PosteriorDraws::new(values, 2, tags).unwrap();
    let g = gelman_rubin(&d);
    assert!(g.available);
    assert!(g.rhat_max < 1.05, "{}", g.rhat_max);
}
