#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use phie::domain::{AttributeDef, CalibrationSpec, DomainSpec, SampleSet, Schema, StratumSpec, UnitRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sample: `d` domains with `strata_per_domain` strata each, `v`
/// calibration variables (the first binary, the rest positive continuous),
/// an attribute `grp` with three levels, an attribute `band` derived from
/// the last variable, and one outcome `y`.
pub fn random_sample(seed: u64, n: usize, v: usize, d: usize, strata_per_domain: usize) -> SampleSet {
    let mut r = rng(seed);
    for attempt in 0..100u64 {
        let s = try_random_sample(&mut r, n, v, d, strata_per_domain);
        let spec = s.calibration_spec();
        let g = phie::calibration::GramMatrix::from_sample(&s, &spec).unwrap();
        if g.is_full_rank() {
            return s;
        }
        let _ = attempt;
    }
    panic!("could not draw a full-rank fixture");
}

fn try_random_sample(r: &mut ChaCha8Rng, n: usize, v: usize, d: usize, k: usize) -> SampleSet {
    let h = d * k;
    let strata: Vec<StratumSpec> = (0..h)
        .map(|j| {
            StratumSpec::new(format!("s{j}"), (n as u64) * 10)
                .with_domain(j / k)
                .with_covariates(vec![r.random_range(-1.0..1.0)])
        })
        .collect();
    let domains: Vec<DomainSpec> = (0..d)
        .map(|i| DomainSpec {
            id: format!("D{}", i + 1),
            index: i + 1,
        })
        .collect();
    let calibration: Vec<String> = (0..v).map(|j| format!("x{j}")).collect();
    let last = calibration[v - 1].clone();
    let schema = Schema {
        calibration,
        attributes: vec![
            AttributeDef::new("grp", vec!["a".into(), "b".into(), "c".into()]),
            AttributeDef::new("band", vec!["low".into(), "high".into()]).derived(last),
        ],
        outcomes: vec!["y".into()],
    };
    let records: Vec<UnitRecord> = (0..n)
        .map(|i| {
            // Every stratum gets at least two units.
            let stratum = if i < 2 * h { i % h } else { r.random_range(0..h) };
            let calib: Vec<f64> = (0..v)
                .map(|j| {
                    if j == 0 {
                        (r.random::<f64>() < 0.6) as u8 as f64
                    } else {
                        r.random_range(0.5..10.0)
                    }
                })
                .collect();
            let band = (calib[v - 1] > 5.0) as u32;
            let y = 2.0 * calib[v - 1] + r.random_range(-3.0..3.0);
            UnitRecord {
                id: i as u64 + 1,
                stratum,
                domain: stratum / k,
                weight: r.random_range(1.0..20.0),
                calib,
                attributes: vec![r.random_range(0..3), band],
                outcomes: vec![y],
            }
        })
        .collect();
    SampleSet::new(records, strata, domains, schema).unwrap()
}

/// Design vector by the layout `position = v·D + d`, computed independently
/// of the library.
pub fn design_row(r: &UnitRecord, v: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; v * d];
    for j in 0..v {
        y[j * d + r.domain] = r.calib[j];
    }
    y
}

pub fn design_matrix(s: &SampleSet, spec: &CalibrationSpec) -> DMatrix<f64> {
    let (v, d) = (spec.n_variables(), spec.n_domains());
    let n = s.len();
    let mut m = DMatrix::zeros(n, v * d);
    for (i, r) in s.records().iter().enumerate() {
        for (j, x) in design_row(r, v, d).into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

pub fn weights(s: &SampleSet) -> DVector<f64> {
    DVector::from_iterator(s.len(), s.records().iter().map(|r| r.weight))
}

/// `G = Yᵀ diag(w) Y` by dense products.
pub fn gram_oracle(s: &SampleSet, spec: &CalibrationSpec) -> DMatrix<f64> {
    let y = design_matrix(s, spec);
    let w = DMatrix::from_diagonal(&weights(s));
    y.transpose() * w * y
}

/// Minimizes `Σ (w′−w)²/w` subject to `Yᵀ w′ = t` by solving the KKT system
/// `[diag(1/w)  −Y; Yᵀ  0] [w′; λ] = [1; t]`.
pub fn kkt_weights(s: &SampleSet, spec: &CalibrationSpec, target: &[f64]) -> Vec<f64> {
    let y = design_matrix(s, spec);
    let w = weights(s);
    let (n, p) = (y.nrows(), y.ncols());
    let mut a = DMatrix::zeros(n + p, n + p);
    let mut b = DVector::zeros(n + p);
    for i in 0..n {
        a[(i, i)] = 1.0 / w[i];
        b[i] = 1.0;
        for j in 0..p {
            a[(i, n + j)] = -y[(i, j)];
            a[(n + j, i)] = y[(i, j)];
        }
    }
    for j in 0..p {
        b[n + j] = target[j];
    }
    let x = a.lu().solve(&b).expect("KKT system solvable");
    x.rows(0, n).iter().copied().collect()
}

/// Calibrated weights from the closed form with a dense LU solve.
pub fn dense_calibrated_weights(s: &SampleSet, spec: &CalibrationSpec, target: &[f64]) -> Vec<f64> {
    let y = design_matrix(s, spec);
    let w = weights(s);
    let g = gram_oracle(s, spec);
    let ht = y.transpose() * &w;
    let rhs = DVector::from_column_slice(target) - ht;
    let u = g.lu().solve(&rhs).expect("G invertible");
    (0..s.len()).map(|i| w[i] * (1.0 + (y.row(i) * &u)[(0, 0)])).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Standard normal draws by Box–Muller.
pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
