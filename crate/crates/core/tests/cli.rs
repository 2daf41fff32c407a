use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn phie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phie")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Copies the small fixture into a scratch directory, applying `edit` to
/// the run config and `edit_units` to every units row.
fn scratch(edit: impl Fn(String) -> String, edit_units: impl Fn(&mut Vec<String>)) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = root().join("fixtures/small");
    fs::copy(src.join("strata.csv"), dir.path().join("strata.csv")).unwrap();
    let units = fs::read_to_string(src.join("units.csv")).unwrap();
    let mut lines = units.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for l in lines {
        let mut cols: Vec<String> = l.split(',').map(str::to_string).collect();
        edit_units(&mut cols);
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    fs::write(dir.path().join("units.csv"), out).unwrap();
    let cfg = fs::read_to_string(src.join("run.toml")).unwrap();
    fs::write(dir.path().join("run.toml"), edit(cfg)).unwrap();
    dir
}

fn plain() -> tempfile::TempDir {
    scratch(|c| c, |_| {})
}

#[test]
fn missing_config_exits_2() {
    let o = phie(&["fit"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}

#[test]
fn bad_config_exits_2() {
    let dir = scratch(|c| c.replace("[mcmc]", "[mcmc]\nbogus = 1"), |_| {});
    let o = phie(&["fit", "--config", s(&dir.path().join("run.toml"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn rank_deficiency_exits_3_in_calibrate_but_not_diagnose() {
    // No unemployed persons in TAS.
    let dir = scratch(
        |c| c,
        |cols| {
            if cols[2] == "TAS" {
                cols[5] = "0".into();
            }
        },
    );
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    let o = phie(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unemployed@TAS"));
    let o = phie(&["diagnose", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("diagnostics.txt")).unwrap().contains("unemployed@TAS"));
}

#[test]
fn unconverged_fit_exits_4_after_writing_draws() {
    let dir = scratch(|c| c.replace("rhat_threshold = 1.2", "rhat_threshold = 1.0000001"), |_| {});
    let out = dir.path().join("out");
    let o = phie(&["fit", "--config", s(&dir.path().join("run.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 4);
    assert!(out.join("draws.csv").exists());
    assert!(out.join("convergence.json").exists());
}

#[test]
fn single_chain_skips_convergence() {
    let dir = scratch(|c| c.replace("chains = 3", "chains = 1"), |_| {});
    let out = dir.path().join("out");
    let o = phie(&["fit", "--config", s(&dir.path().join("run.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let conv: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("convergence.json")).unwrap()).unwrap();
    assert_eq!(conv["convergence"]["available"], serde_json::Value::Bool(false), "{conv}");
    assert!(conv["warnings"][0].as_str().unwrap().contains("unavailable"));
}

#[test]
fn every_command_is_deterministic() {
    let dir = plain();
    let cfg = dir.path().join("run.toml");
    for cmd in ["fit", "calibrate", "infer", "diagnose"] {
        let (a, b) = (dir.path().join(format!("{cmd}_a")), dir.path().join(format!("{cmd}_b")));
        for out in [&a, &b] {
            let o = phie(&[cmd, "--config", s(&cfg), "--out", s(out)]);
            assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let mut files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        assert!(!files.is_empty());
        for f in files {
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{cmd}: {f:?}");
        }
    }
}

#[test]
fn seed_flag_changes_draws() {
    let dir = plain();
    let cfg = dir.path().join("run.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&phie(&["fit", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&phie(&["fit", "--config", s(&cfg), "--out", s(&b), "--seed", "12"])), 0);
    assert_ne!(fs::read(a.join("draws.csv")).unwrap(), fs::read(b.join("draws.csv")).unwrap());
}

#[test]
fn infer_from_draws_file_matches_in_run_fit() {
    let dir = plain();
    let cfg = dir.path().join("run.toml");
    let (fit, direct, from_file) = (dir.path().join("fit"), dir.path().join("direct"), dir.path().join("file"));
    assert_eq!(code(&phie(&["fit", "--config", s(&cfg), "--out", s(&fit)])), 0);
    assert_eq!(code(&phie(&["infer", "--config", s(&cfg), "--out", s(&direct)])), 0);
    let draws = fit.join("draws.csv");
    let o = phie(&["infer", "--config", s(&cfg), "--out", s(&from_file), "--draws", s(&draws)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["panel_a.csv", "panel_b.csv"] {
        let strip = |p: PathBuf| -> Vec<String> {
            fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with('#')).map(str::to_string).collect()
        };
        assert_eq!(strip(direct.join(f)), strip(from_file.join(f)), "{f}");
    }
}

#[test]
fn simulate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(root().join("configs/fixture_population.toml"))
        .unwrap()
        .replace("replications = 1", "replications = 2")
        .replace("export_sample = true", "export_sample = false\nreplications = true");
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = phie(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["coverage.json", "coverage.csv", "coverage_by_tier.csv", "cv_by_tier.csv", "tables.txt", "truth.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join("replications/replication_0001.json").exists());
}
