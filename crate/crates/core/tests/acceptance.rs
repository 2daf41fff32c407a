//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::*;
use phie::calibration::CalibrationArtifacts;
use phie::config::RunConfig;
use phie::domain::{evaluate_cell, CellQuery, Condition, SampleSet, TierLabel};
use phie::hb::{fit_models, gelman_rubin, PosteriorDraws};
use phie::ingest::load_sample;
use phie::phie::{empirical_quantile_ci, replicate_totals, IntervalKind};
use phie::report::{analyze, InferenceOptions};
use phie::sim::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(rel: &str) -> RunConfig {
    RunConfig::load(&root().join(rel)).unwrap().config
}

/// `B` draws `HT ⊙ (1 + sd·z)`.
fn jittered_draws(ht: &[f64], b: usize, sd: f64, seed: u64) -> PosteriorDraws {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|_| ht.iter().map(|h| h * (1.0 + sd * normal(&mut r))).collect())
        .collect();
    PosteriorDraws::from_rows(&rows).unwrap()
}

fn domain_cells(s: &SampleSet) -> Vec<(CellQuery, usize)> {
    let spec = s.calibration_spec();
    let d = spec.n_domains();
    let mut out = Vec::new();
    for (v, var) in spec.variables().iter().enumerate() {
        for (k, dom) in s.domains().iter().enumerate() {
            let q = CellQuery::new(format!("{var}:{}", dom.id), var.clone(), vec![Condition::domain(&dom.id)]);
            out.push((q, v * d + k));
        }
    }
    out
}

fn calibration_exactness() -> Verdict {
    let mut worst = 0.0f64;
    let mut secs = 0.0;
    for seed in 0..5u64 {
        let s = random_sample(100 + seed, 200, 3, 8, 1);
        let spec = s.calibration_spec();
        let y = design_matrix(&s, &spec);
        let mut r = rng(seed);
        let t0 = Instant::now();
        let a = CalibrationArtifacts::build(&s, &spec).unwrap();
        let targets: Vec<Vec<f64>> = (0..20)
            .map(|_| a.ht.iter().map(|h| h * (0.8 + 0.4 * rand::Rng::random::<f64>(&mut r))).collect())
            .collect();
        let weights: Vec<Vec<f64>> = targets.iter().map(|t| a.calibrate(&s, t).unwrap().weights).collect();
        secs += t0.elapsed().as_secs_f64();
        for (t, w) in targets.iter().zip(&weights) {
            for j in 0..spec.p() {
                let achieved: f64 = (0..s.len()).map(|i| w[i] * y[(i, j)]).sum();
                worst = worst.max((achieved - t[j]).abs() / t[j].abs());
            }
        }
    }
    verdict(
        worst < 1e-8 && secs < 1.0,
        format!("100 targets on 5 fixtures (n=200, p=24): max relative violation {worst:.3e}, solve time {secs:.3}s"),
    )
}

fn optimality_oracle() -> Verdict {
    let mut worst = 0.0f64;
    let mut instances = 0;
    let t0 = Instant::now();
    for (k, &(v, d)) in [(3, 1), (2, 1), (1, 3), (1, 2), (2, 1)].iter().enumerate() {
        for seed in 0..4u64 {
            let s = random_sample(1000 + 10 * k as u64 + seed, 8, v, d, 1);
            let spec = s.calibration_spec();
            let a = CalibrationArtifacts::build(&s, &spec).unwrap();
            let mut r = rng(seed);
            let t: Vec<f64> = a.ht.iter().map(|h| h * (0.7 + 0.6 * rand::Rng::random::<f64>(&mut r))).collect();
            let w = a.calibrate(&s, &t).unwrap().weights;
            for (x, o) in w.iter().zip(kkt_weights(&s, &spec, &t)) {
                worst = worst.max((x - o).abs() / o.abs().max(1.0));
            }
            instances += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst < 1e-8 && secs < 1.0,
        format!("{instances} instances (n=8, p<=3) vs KKT solve: max difference {worst:.3e}, {secs:.3}s"),
    )
}

fn tier_one_exactness() -> Verdict {
    let s = random_sample(31, 200, 3, 4, 2);
    let spec = s.calibration_spec();
    let a = CalibrationArtifacts::build(&s, &spec).unwrap();
    let draws = jittered_draws(&a.ht, 1000, 0.05, 9);
    let cells = domain_cells(&s);
    let queries: Vec<CellQuery> = cells.iter().map(|c| c.0.clone()).collect();
    let analysis = analyze(&s, &spec, &draws, &queries, &InferenceOptions::default()).unwrap();
    let (mut rep_err, mut ci_err) = (0.0f64, 0.0f64);
    let mut all_1e = true;
    for ((q, pos), row) in cells.iter().zip(&analysis.rows) {
        all_1e &= row.tier == TierLabel::Tier1E;
        let cell = evaluate_cell(q, &s).unwrap();
        let reps = replicate_totals(&cell, &s, &draws, &a).unwrap();
        let column = draws.column(*pos);
        for (x, t) in reps.values.iter().zip(&column) {
            rep_err = rep_err.max((x - t).abs() / t.abs());
        }
        let ci = empirical_quantile_ci(&column, 0.95, IntervalKind::Posterior).unwrap();
        ci_err = ci_err
            .max((row.phie.lower - ci.lower).abs() / ci.lower.abs())
            .max((row.phie.upper - ci.upper).abs() / ci.upper.abs());
    }
    verdict(
        all_1e && rep_err < 1e-9 && ci_err < 1e-9,
        format!(
            "{} Tier-1E cells, B=1000: replicate vs draw {rep_err:.3e}, PHIE vs draw quantiles {ci_err:.3e}",
            cells.len()
        ),
    )
}

fn linear_form_equivalence() -> Verdict {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..5u64 {
        let s = random_sample(200 + seed, 50, 2, 2, 2);
        let spec = s.calibration_spec();
        let a = CalibrationArtifacts::build(&s, &spec).unwrap();
        let draws = jittered_draws(&a.ht, 20, 0.1, seed);
        let rows: Vec<Vec<f64>> = draws.rows().map(<[f64]>::to_vec).collect();
        for q in [
            CellQuery::new("1e", "x1", vec![Condition::domain("D1")]),
            CellQuery::new("ca", "x1", vec![Condition::attribute("band", &["high"])]),
            CellQuery::new("nca", "x0", vec![Condition::attribute("grp", &["a"])]),
            CellQuery::new("ncv", "y", vec![Condition::attribute("grp", &["b"]), Condition::domain("D2")]),
        ] {
            let cell = evaluate_cell(&q, &s).unwrap();
            let reps = replicate_totals(&cell, &s, &draws, &a).unwrap();
            for (b, t) in rows.iter().enumerate() {
                let w = dense_calibrated_weights(&s, &spec, t);
                let oracle: f64 = (0..s.len()).filter(|&i| cell.mask[i]).map(|i| cell.values[i] * w[i]).sum();
                worst = worst.max((reps.values[b] - oracle).abs() / oracle.abs().max(1.0));
                checked += 1;
            }
        }
    }
    verdict(
        worst < 1e-10,
        format!("{checked} replicate totals (n=50, B=20, four tiers) vs per-draw recalibration: max {worst:.3e}"),
    )
}

struct DeskRun {
    report: CoverageReport,
    outcomes: Vec<ReplicationOutcome>,
    secs: f64,
}

fn desk_run() -> DeskRun {
    let t0 = Instant::now();
    let cfg = load("configs/desk_scale.toml");
    let frame = generate_population(cfg.population.as_ref().unwrap(), cfg.seed).unwrap();
    let mc = cfg.mc_config(&frame.population).unwrap();
    let truths = frame.truth_table(&mc.cells).unwrap();
    let tiers = classify_cells(&frame, &mc.cells).unwrap();
    let outcomes = run_simulation(&frame, &truths, &mc).unwrap();
    let report = accumulate_report(&mc.cells, &tiers, &truths, &outcomes, mc.inference.level).unwrap();
    DeskRun {
        report,
        outcomes,
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn is_tier2(t: TierLabel) -> bool {
    matches!(t, TierLabel::Tier2CA | TierLabel::Tier2NCA)
}

fn undercoverage(run: &DeskRun) -> Verdict {
    let r = &run.report;
    let dense: Vec<&CellCoverage> = r
        .cells
        .iter()
        .filter(|c| is_tier2(c.tier) && c.members_min >= 100)
        .collect();
    let under: Vec<&&CellCoverage> = dense
        .iter()
        .filter(|c| c.phie.rate < 0.90 && r.nominal - c.phie.rate > 2.0 * c.phie.mc_se)
        .collect();
    let worst = dense.iter().min_by(|a, b| a.phie.rate.total_cmp(&b.phie.rate));
    let detail = match worst {
        Some(c) => format!(
            "R={} used {}: {} of {} dense Tier-2 cells below 90%; lowest {} (n>={}) at {:.1}% ± {:.1}%; run {:.1}s",
            r.requested,
            r.used,
            under.len(),
            dense.len(),
            c.name,
            c.members_min,
            100.0 * c.phie.rate,
            100.0 * c.phie.mc_se,
            run.secs
        ),
        None => "no dense Tier-2 cells".into(),
    };
    verdict(!under.is_empty() && r.requested == 200 && run.secs < 1200.0, detail)
}

fn cbi_restoration(run: &DeskRun) -> Verdict {
    let rates: Vec<(&str, f64)> = run
        .report
        .cells
        .iter()
        .filter(|c| c.tier != TierLabel::Tier1E)
        .map(|c| (c.name.as_str(), c.cbi.map_or(f64::NAN, |x| x.rate)))
        .collect();
    let bad: Vec<&(&str, f64)> = rates.iter().filter(|(_, x)| !(0.88..=0.995).contains(x)).collect();
    let lo = rates.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = rates.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        !rates.is_empty() && bad.is_empty(),
        format!(
            "{} Tier-2/3 cells: CBI coverage {:.1}%-{:.1}%, {} outside [88%, 99.5%]",
            rates.len(),
            100.0 * lo,
            100.0 * hi,
            bad.len()
        ),
    )
}

fn tier_one_coverage(run: &DeskRun) -> Verdict {
    let rates: Vec<f64> = run
        .report
        .cells
        .iter()
        .filter(|c| c.tier == TierLabel::Tier1E)
        .map(|c| c.phie.rate)
        .collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        !rates.is_empty() && mean >= 0.90,
        format!("{} Tier-1E cells: mean PHIE coverage {:.2}%, lowest {:.1}%", rates.len(), 100.0 * mean, 100.0 * lo),
    )
}

fn gelman_rubin_sanity() -> Verdict {
    let chain = [0.3, 1.7, -0.2, 0.9, 1.1, 0.4];
    let values: Vec<f64> = chain.iter().flat_map(|&x| [x, 2.0 * x]).collect();
    let values = [values.clone(), values.clone(), values].concat();
    let identical = gelman_rubin(&PosteriorDraws::new(values, 2, [vec![0; 6], vec![1; 6], vec![2; 6]].concat()).unwrap());

    let mut r = rng(8);
    let (mut values, mut tags) = (Vec::new(), Vec::new());
    for c in 0..4u32 {
        for _ in 0..2000 {
            values.push(normal(&mut r));
            values.push(3.0 + 0.5 * normal(&mut r));
            tags.push(c);
        }
    }
    let mixed = gelman_rubin(&PosteriorDraws::new(values, 2, tags).unwrap());

    let cfg = load("fixtures/small/run.toml");
    let sample = load_sample(cfg.data().unwrap()).unwrap();
    let spec = sample.calibration_spec();
    let mut mcmc = cfg.mcmc.clone();
    mcmc.seed = cfg.seed;
    let fit = fit_models(&sample, &spec, cfg.hb().unwrap(), &mcmc).unwrap();
    let fixture = fit.convergence.rhat_max;
    verdict(
        identical.rhat_max == 1.0 && mixed.rhat_max < 1.05 && fit.convergence.available && fixture < 1.2,
        format!(
            "identical chains {}, mixed Gaussian {:.4}, fixture fit {:.4}",
            identical.rhat_max, mixed.rhat_max, fixture
        ),
    )
}

fn diagnostics() -> Verdict {
    let s = random_sample(41, 150, 2, 3, 2);
    let spec = s.calibration_spec();
    let a = CalibrationArtifacts::build(&s, &spec).unwrap();
    let p = spec.p();
    let pos = spec.position(1, 1);
    let cell = vec![CellQuery::new("x1:D2", "x1", vec![Condition::domain("D2")])];
    let mut r = rng(3);

    // Draws move only the cell's own block, away from HT.
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let mut t = a.ht.clone();
            t[pos] *= 1.05 + 0.02 * normal(&mut r);
            t
        })
        .collect();
    let par = analyze(&s, &spec, &PosteriorDraws::from_rows(&rows).unwrap(), &cell, &InferenceOptions::default()).unwrap();
    let cos_par = par.rows[0].diagnostics.cos_theta.unwrap_or(f64::NAN);

    // Draws move every block except the cell's own.
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            (0..p)
                .map(|j| if j == pos { a.ht[j] } else { a.ht[j] * (1.05 + 0.02 * normal(&mut r)) })
                .collect()
        })
        .collect();
    let orth = analyze(&s, &spec, &PosteriorDraws::from_rows(&rows).unwrap(), &cell, &InferenceOptions::default()).unwrap();
    let cos_orth = orth.rows[0].diagnostics.cos_theta.unwrap_or(f64::NAN);
    let rel_width = orth.rows[0].phie.width() / orth.rows[0].point.abs();

    // Gaussian draws with known covariance Σ = L Lᵀ.
    let q = CellQuery::new("nca", "x1", vec![Condition::attribute("grp", &["b"])]);
    let ev = evaluate_cell(&q, &s).unwrap();
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            l[i * p + j] = if i == j { 0.03 * a.ht[i] } else { 0.01 * a.ht[i] * normal(&mut r) };
        }
    }
    let b = 4000;
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            let z: Vec<f64> = (0..p).map(|_| normal(&mut r)).collect();
            (0..p).map(|i| a.ht[i] + (0..p).map(|j| l[i * p + j] * z[j]).sum::<f64>()).collect()
        })
        .collect();
    let draws = PosteriorDraws::from_rows(&rows).unwrap();
    let dir = replicate_totals(&ev, &s, &draws, &a).unwrap().direction;
    let la: Vec<f64> = (0..p).map(|j| (0..p).map(|i| l[i * p + j] * dir[i]).sum()).collect();
    let true_var: f64 = la.iter().map(|x| x * x).sum();
    let row = &analyze(&s, &spec, &draws, &[q], &InferenceOptions::default()).unwrap().rows[0];
    let emp = row.diagnostics.replicate_variance_empirical;
    let quad = row.diagnostics.replicate_variance_quadratic;
    let se = true_var * (2.0 / (b - 1) as f64).sqrt();
    let z = (emp - true_var).abs() / se;
    verdict(
        (cos_par - 1.0).abs() < 1e-10
            && cos_orth.abs() < 1e-10
            && rel_width < 1e-6
            && z < 3.0
            && (quad - emp).abs() < 1e-9 * emp,
        format!(
            "parallel cos {cos_par:.12}, orthogonal cos {cos_orth:.3e} with width/point {rel_width:.3e}, \
             quadratic form vs empirical variance {z:.2} MC SE (sample-covariance form rel diff {:.1e})",
            (quad - emp).abs() / emp
        ),
    )
}

fn cv_computation(run: &DeskRun) -> Verdict {
    let tiers: Vec<TierLabel> = run.report.cells.iter().map(|c| c.tier).collect();
    let (mut worst, mut checked, mut below) = (0.0f64, 0usize, 0usize);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    for o in &run.outcomes {
        let ReplicationStatus::Ok { cells, .. } = &o.status else { continue };
        for (c, &t) in cells.iter().zip(&tiers) {
            if c.point == 0.0 {
                continue;
            }
            if let Some(v) = c.cv_phie {
                worst = worst.max(rel(v, (c.phie_upper - c.phie_lower) / 3.92 / c.point.abs()));
                checked += 1;
            }
            if let (Some(v), Some(lo), Some(hi)) = (c.cv_cbi, c.cbi_lower, c.cbi_upper) {
                worst = worst.max(rel(v, (hi - lo) / 3.92 / c.point.abs()));
                checked += 1;
            }
            if t != TierLabel::Tier1E {
                match (c.cv_cbi, c.cv_phie_gaussian) {
                    (Some(cbi), Some(g)) if cbi >= g => {}
                    _ => below += 1,
                }
            }
        }
    }
    verdict(
        checked > 0 && worst < 1e-12 && below == 0,
        format!("{checked} CVs recomputed: max rel diff {worst:.3e}; Tier-2/3 cells with CBI CV < Gaussian PHIE CV: {below}"),
    )
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn phie_bin(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_phie"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim.toml");
    let text = fs::read_to_string(root().join("configs/fixture_population.toml"))
        .unwrap()
        .replace("replications = 1", "replications = 3")
        .replace("export_sample = true", "export_sample = true\nreplications = true");
    fs::write(&sim, text).unwrap();
    let small = root().join("fixtures/small/run.toml");
    let runs: [(&str, &Path, &[&str]); 6] = [
        ("fit", &small, &[]),
        ("calibrate", &small, &[]),
        ("infer", &small, &[]),
        ("diagnose", &small, &[]),
        ("simulate", &sim, &[]),
        ("simulate", &sim, &["--threads", "1"]),
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (k, (cmd, cfg, extra)) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("{k}a"));
        let b = tmp.path().join(format!("{k}b"));
        let base = |out: &Path| -> Vec<String> {
            [cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]
                .iter()
                .map(|x| x.to_string())
                .collect()
        };
        let args_a = base(&a);
        let mut args_b = base(&b);
        args_b.extend(extra.iter().map(|x| x.to_string()));
        let ca = phie_bin(&args_a.iter().map(String::as_str).collect::<Vec<_>>());
        let cb = phie_bin(&args_b.iter().map(String::as_str).collect::<Vec<_>>());
        if ca != 0 || cb != 0 {
            mismatched.push(format!("{cmd} exited {ca}/{cb}"));
            continue;
        }
        let (fa, fb) = (files(&a), files(&b));
        if fa.len() != fb.len() {
            mismatched.push(format!("{cmd}: file sets differ"));
        }
        for (x, y) in fa.iter().zip(&fb) {
            compared += 1;
            if fs::read(x).unwrap() != fs::read(y).unwrap() {
                mismatched.push(format!("{cmd}: {}", x.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    verdict(
        mismatched.is_empty() && compared > 0,
        if mismatched.is_empty() {
            format!("{compared} files from 6 paired runs identical (incl. simulate on 1 thread vs all)")
        } else {
            format!("differences: {}", mismatched.join("; "))
        },
    )
}

fn main() {
    let mut failed = 0;
    let mut run = |n: usize, title: &str, f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2}: {} {title}: {} [{secs:.2}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed += 1;
        }
    };
    run(1, "calibration exactness", &mut calibration_exactness);
    run(2, "optimality oracle", &mut optimality_oracle);
    run(3, "Tier-1E exactness", &mut tier_one_exactness);
    run(4, "linear-form equivalence", &mut linear_form_equivalence);
    let desk = desk_run();
    run(5, "PHIE undercoverage on dense Tier-2 cells", &mut || undercoverage(&desk));
    run(6, "CBI coverage restoration", &mut || cbi_restoration(&desk));
    run(7, "Tier-1E MC coverage", &mut || tier_one_coverage(&desk));
    run(8, "Gelman-Rubin sanity", &mut gelman_rubin_sanity);
    run(9, "cell diagnostics", &mut diagnostics);
    run(10, "CV computation", &mut || cv_computation(&desk));
    run(11, "determinism", &mut determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
