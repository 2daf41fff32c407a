//! Batch commands. Each writes its outputs under `--out` and returns an exit
//! code: 0 success, 2 configuration or validation error, 3 numerical
//! failure, 4 convergence failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::calibration::{write_weights, CalibrationArtifacts};
use crate::config::{LoadedConfig, RunConfig};
use crate::domain::{CalibrationSpec, SampleSet};
use crate::error::{Error, Result};
use crate::hb::{fit_models, gelman_rubin, ConvergenceReport, PosteriorDraws, VariableModel};
use crate::ingest::{load_sample, write_sample};
use crate::report::{
    analyze, num17, panel_a_csv, panel_b_csv, report_text, sig6, text_table, write_file, write_json, RunMeta,
    RunReport,
};
use crate::sim::{
    accumulate_report, classify_cells, coverage_csv, generate_population, replication_sample, run_simulation,
    coverage_by_tier_csv, cv_by_tier_csv, tables_text, CoverageReport, ReplicationOutcome,
};

#[derive(Debug, Parser)]
#[command(name = "phie", version, about = "Post-hoc intervals for cells of an HB-calibrated survey")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Posterior draws file; overrides the config and skips in-run fitting.
    #[arg(long, global = true)]
    pub draws: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit the HB models and write posterior draws of the domain totals.
    Fit,
    /// Calibrate weights to the posterior mean.
    Calibrate,
    /// Report intervals for every configured cell.
    Infer,
    /// Convergence, Gram-matrix and per-cell diagnostics.
    Diagnose,
    /// Monte Carlo coverage on a synthetic population.
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Calibrate => "calibrate",
            Command::Infer => "infer",
            Command::Diagnose => "diagnose",
            Command::Simulate => "simulate",
        }
    }
}

/// Resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub command: Command,
    pub config: RunConfig,
    pub sha256: String,
    pub seed: u64,
    pub out: PathBuf,
    pub draws: Option<PathBuf>,
}

impl Context {
    pub fn new(command: Command, loaded: LoadedConfig, seed: Option<u64>, out: Option<PathBuf>, draws: Option<PathBuf>) -> Self {
        let LoadedConfig { config, sha256, .. } = loaded;
        Context {
            command,
            seed: seed.unwrap_or(config.seed),
            out: out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
            draws: draws.or_else(|| config.draws.clone()),
            config,
            sha256,
        }
    }

    fn header(&self) -> Vec<(String, String)> {
        vec![
            ("command".into(), self.command.name().into()),
            ("seed".into(), self.seed.to_string()),
            ("config_sha256".into(), self.sha256.clone()),
        ]
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }
}

/// Parses nothing: runs an already-parsed command line and maps the outcome
/// to an exit code.
pub fn run(cli: Cli) -> i32 {
    let level = if cli.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let ctx = Context::new(cli.command, RunConfig::load(path)?, cli.seed, cli.out, cli.draws);
    dispatch(&ctx)
}

pub fn dispatch(ctx: &Context) -> Result<()> {
    match ctx.command {
        Command::Fit => cmd_fit(ctx),
        Command::Calibrate => cmd_calibrate(ctx).map(|_| ()),
        Command::Infer => cmd_infer(ctx).map(|_| ()),
        Command::Diagnose => cmd_diagnose(ctx),
        Command::Simulate => cmd_simulate(ctx).map(|_| ()),
    }
}

fn load(ctx: &Context) -> Result<(SampleSet, CalibrationSpec)> {
    let sample = load_sample(ctx.config.data()?)?;
    let spec = sample.calibration_spec();
    info!("loaded {} records, p = {}", sample.len(), spec.p());
    Ok((sample, spec))
}

fn model_notes(ctx: &Context) -> Vec<String> {
    let gaussian: Vec<&str> = ctx
        .config
        .hb
        .iter()
        .flat_map(|hb| hb.models.iter())
        .filter(|(_, m)| matches!(m, VariableModel::Gaussian { .. }))
        .map(|(k, _)| k.as_str())
        .collect();
    if gaussian.is_empty() {
        Vec::new()
    } else {
        vec![format!(
            "gaussian variables ({}) are modelled on stratum means; domain totals are sums of N_h times the mean",
            gaussian.join(", ")
        )]
    }
}

struct Posterior {
    draws: PosteriorDraws,
    convergence: ConvergenceReport,
    warnings: Vec<String>,
}

/// Reads draws when a file is given, otherwise fits in-run with the run seed.
fn posterior(ctx: &Context, sample: &SampleSet, spec: &CalibrationSpec) -> Result<Posterior> {
    if let Some(p) = &ctx.draws {
        let draws = PosteriorDraws::read_csv(p, spec)?;
        let convergence = gelman_rubin(&draws);
        return Ok(Posterior {
            draws,
            convergence,
            warnings: vec![format!("draws read from {}", p.display())],
        });
    }
    let mut mcmc = ctx.config.mcmc.clone();
    mcmc.seed = ctx.seed;
    let fit = fit_models(sample, spec, ctx.config.hb()?, &mcmc)?;
    Ok(Posterior {
        draws: fit.draws,
        convergence: fit.convergence,
        warnings: fit.warnings,
    })
}

fn rhat(c: &ConvergenceReport) -> Option<f64> {
    c.available.then_some(c.rhat_max)
}

#[derive(Serialize)]
struct ConvergenceDoc<'a> {
    seed: u64,
    config_sha256: &'a str,
    threshold: f64,
    converged: bool,
    convergence: &'a ConvergenceReport,
    columns: Vec<String>,
    warnings: &'a [String],
}

fn convergence_doc<'a>(ctx: &'a Context, spec: &CalibrationSpec, post: &'a Posterior, threshold: f64) -> ConvergenceDoc<'a> {
    ConvergenceDoc {
        seed: ctx.seed,
        config_sha256: &ctx.sha256,
        threshold,
        converged: post.convergence.converged(threshold),
        convergence: &post.convergence,
        columns: (0..spec.p()).map(|j| spec.column_name(j)).collect(),
        warnings: &post.warnings,
    }
}

fn convergence_csv(ctx: &Context, spec: &CalibrationSpec, c: &ConvergenceReport) -> String {
    let mut s = crate::report::meta_lines(&ctx.header());
    s.push_str("column,rhat\n");
    for (j, r) in c.rhat.iter().enumerate() {
        s.push_str(&format!("{},{}\n", spec.column_name(j), num17(*r)));
    }
    s
}

/// Writes `draws.csv`, `convergence.json` and `convergence.csv`. Fails with
/// the convergence error after writing when `R̂_max` exceeds the threshold.
pub fn cmd_fit(ctx: &Context) -> Result<()> {
    let (sample, spec) = load(ctx)?;
    let hb = ctx.config.hb()?;
    let mut mcmc = ctx.config.mcmc.clone();
    mcmc.seed = ctx.seed;
    let fit = fit_models(&sample, &spec, hb, &mcmc)?;
    for w in &fit.warnings {
        warn!("{w}");
    }
    let post = Posterior {
        draws: fit.draws,
        convergence: fit.convergence,
        warnings: fit.warnings,
    };
    ctx.ensure_out()?;
    let mut meta = ctx.header();
    meta.extend(model_notes(ctx).into_iter().map(|n| ("note".to_string(), n)));
    post.draws.write_csv(&ctx.path("draws.csv"), &spec, &meta)?;
    write_json(&ctx.path("convergence.json"), &convergence_doc(ctx, &spec, &post, hb.rhat_threshold))?;
    write_file(&ctx.path("convergence.csv"), convergence_csv(ctx, &spec, &post.convergence).as_bytes())?;
    if !post.convergence.converged(hb.rhat_threshold) {
        return Err(Error::NotConverged {
            rhat_max: post.convergence.rhat_max,
            threshold: hb.rhat_threshold,
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrationDoc<'a> {
    meta: RunMeta,
    dependent_blocks: Vec<String>,
    columns: Vec<String>,
    ht: &'a [f64],
    target: &'a [f64],
}

/// Writes `weights.csv` (weights calibrated to the posterior mean) and
/// `calibration.json`.
pub fn cmd_calibrate(ctx: &Context) -> Result<RunMeta> {
    let (sample, spec) = load(ctx)?;
    let post = posterior(ctx, &sample, &spec)?;
    let artifacts = CalibrationArtifacts::build(&sample, &spec)?;
    let weights = artifacts.calibrate(&sample, post.draws.posterior_mean())?;
    if weights.negative_count > 0 {
        warn!("{} calibrated weights are negative", weights.negative_count);
    }
    let meta = run_meta(ctx, &sample, &spec, &post, &artifacts, weights.negative_count);
    ctx.ensure_out()?;
    write_weights(&ctx.path("weights.csv"), &sample, &weights, &ctx.header())?;
    write_json(
        &ctx.path("calibration.json"),
        &CalibrationDoc {
            meta: meta.clone(),
            dependent_blocks: artifacts.gram.dependent_blocks(),
            columns: (0..spec.p()).map(|j| spec.column_name(j)).collect(),
            ht: &artifacts.ht,
            target: &weights.target,
        },
    )?;
    Ok(meta)
}

fn run_meta(
    ctx: &Context,
    sample: &SampleSet,
    spec: &CalibrationSpec,
    post: &Posterior,
    artifacts: &CalibrationArtifacts,
    negative: usize,
) -> RunMeta {
    let mut notes = model_notes(ctx);
    notes.extend(post.warnings.iter().cloned());
    RunMeta {
        command: ctx.command.name().into(),
        seed: ctx.seed,
        config_sha256: ctx.sha256.clone(),
        records: sample.len(),
        p: spec.p(),
        draws: post.draws.n_draws(),
        gram_rank: artifacts.gram.rank(),
        gram_condition_estimate: artifacts.gram.condition_estimate(),
        negative_weights: negative,
        rhat_max: rhat(&post.convergence),
        notes,
    }
}

fn build_report(ctx: &Context) -> Result<RunReport> {
    let (sample, spec) = load(ctx)?;
    let post = posterior(ctx, &sample, &spec)?;
    let cells = ctx.config.cells(&sample)?;
    if cells.is_empty() {
        return Err(Error::Config("no cells configured".into()));
    }
    let analysis = analyze(&sample, &spec, &post.draws, &cells, &ctx.config.inference)?;
    for r in &analysis.rows {
        for w in &r.warnings {
            warn!("{}: {w}", r.name);
        }
    }
    Ok(RunReport {
        meta: run_meta(ctx, &sample, &spec, &post, &analysis.artifacts, analysis.weights.negative_count),
        cells: analysis.rows,
    })
}

/// Writes `report.json`, `panel_a.csv`, `panel_b.csv` and `report.txt`.
pub fn cmd_infer(ctx: &Context) -> Result<RunReport> {
    let report = build_report(ctx)?;
    ctx.ensure_out()?;
    write_json(&ctx.path("report.json"), &report)?;
    write_file(&ctx.path("panel_a.csv"), panel_a_csv(&report).as_bytes())?;
    write_file(&ctx.path("panel_b.csv"), panel_b_csv(&report).as_bytes())?;
    write_file(&ctx.path("report.txt"), report_text(&report).as_bytes())?;
    Ok(report)
}

#[derive(Serialize)]
struct DiagnosticsDoc<'a> {
    meta: &'a RunMeta,
    convergence: ConvergenceReport,
    columns: Vec<String>,
    dependent_blocks: Vec<String>,
    cells: Vec<CellDiagnosticsRow<'a>>,
}

#[derive(Serialize)]
struct CellDiagnosticsRow<'a> {
    name: &'a str,
    tier: crate::domain::TierLabel,
    diagnostics: &'a crate::cbi::CellDiagnostics,
    component1: Option<f64>,
    component2: Option<f64>,
    link: Option<&'a crate::report::LinkSummary>,
    warnings: &'a [String],
}

/// Convergence per draw column, Gram rank and conditioning, and Panel B for
/// every configured cell. Rank deficiency is reported, not fatal.
pub fn cmd_diagnose(ctx: &Context) -> Result<()> {
    let (sample, spec) = load(ctx)?;
    let post = posterior(ctx, &sample, &spec)?;
    let gram = crate::calibration::GramMatrix::from_sample(&sample, &spec)?;
    ctx.ensure_out()?;
    let mut text = format!(
        "seed {}  config {}\nrank(G) {} of {}  condition estimate {}\n",
        ctx.seed,
        ctx.sha256,
        gram.rank(),
        gram.p(),
        sig6(gram.condition_estimate())
    );
    let dependent = gram.dependent_blocks();
    if !dependent.is_empty() {
        text.push_str(&format!("dependent blocks: {}\n", dependent.join(", ")));
    }
    text.push_str(&format!(
        "R-hat max {}\n\n",
        rhat(&post.convergence).map_or("unavailable".into(), sig6)
    ));
    let conv_rows: Vec<Vec<String>> = post
        .convergence
        .rhat
        .iter()
        .enumerate()
        .map(|(j, r)| vec![spec.column_name(j), sig6(*r)])
        .collect();
    text.push_str(&text_table(&["Column", "R-hat"], &conv_rows));

    let report = if gram.is_full_rank() && !ctx.config.cells(&sample)?.is_empty() {
        let cells = ctx.config.cells(&sample)?;
        let analysis = analyze(&sample, &spec, &post.draws, &cells, &ctx.config.inference)?;
        Some(RunReport {
            meta: run_meta(ctx, &sample, &spec, &post, &analysis.artifacts, analysis.weights.negative_count),
            cells: analysis.rows,
        })
    } else {
        None
    };
    let meta = match &report {
        Some(r) => r.meta.clone(),
        None => {
            let mut notes = model_notes(ctx);
            notes.extend(post.warnings.iter().cloned());
            RunMeta {
                command: ctx.command.name().into(),
                seed: ctx.seed,
                config_sha256: ctx.sha256.clone(),
                records: sample.len(),
                p: spec.p(),
                draws: post.draws.n_draws(),
                gram_rank: gram.rank(),
                gram_condition_estimate: gram.condition_estimate(),
                negative_weights: 0,
                rhat_max: rhat(&post.convergence),
                notes,
            }
        }
    };
    let rows: Vec<CellDiagnosticsRow> = report
        .iter()
        .flat_map(|r| r.cells.iter())
        .map(|c| CellDiagnosticsRow {
            name: &c.name,
            tier: c.tier,
            diagnostics: &c.diagnostics,
            component1: c.cbi.as_ref().map(|b| b.components.component1),
            component2: c.cbi.as_ref().map(|b| b.components.component2),
            link: c.link.as_ref(),
            warnings: &c.warnings,
        })
        .collect();
    write_json(
        &ctx.path("diagnostics.json"),
        &DiagnosticsDoc {
            meta: &meta,
            convergence: post.convergence.clone(),
            columns: (0..spec.p()).map(|j| spec.column_name(j)).collect(),
            dependent_blocks: dependent,
            cells: rows,
        },
    )?;
    if let Some(r) = &report {
        write_file(&ctx.path("panel_b.csv"), panel_b_csv(r).as_bytes())?;
        text.push('\n');
        text.push_str(&report_text(r));
    }
    write_file(&ctx.path("diagnostics.txt"), text.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct SimulationMeta<'a> {
    command: &'static str,
    seed: u64,
    config_sha256: &'a str,
    population_seed: u64,
    population_size: usize,
    strata: usize,
    replications: usize,
    sampling_fraction: f64,
    burnin: usize,
    iterations: usize,
    chains: usize,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct CoverageDoc<'a> {
    meta: SimulationMeta<'a>,
    report: &'a CoverageReport,
}

/// Generates the population, runs every replication and writes
/// `coverage.json`, `coverage.csv`, `coverage_by_tier.csv`, `cv_by_tier.csv`, `tables.txt`
/// and `truth.csv`.
pub fn cmd_simulate(ctx: &Context) -> Result<CoverageReport> {
    let spec = ctx
        .config
        .population
        .as_ref()
        .ok_or_else(|| Error::Config("missing [population] section".into()))?;
    let frame = generate_population(spec, ctx.seed)?;
    let mut mc = ctx.config.mc_config(&frame.population)?;
    mc.seed = ctx.seed;
    let truths = frame.truth_table(&mc.cells)?;
    let tiers = classify_cells(&frame, &mc.cells)?;
    info!(
        "population of {} units in {} strata; {} cells; {} replications",
        frame.population.len(),
        frame.population.strata().len(),
        mc.cells.len(),
        mc.replications
    );
    let outcomes = run_simulation(&frame, &truths, &mc)?;
    for o in &outcomes {
        if let crate::sim::ReplicationStatus::Failed { error } = &o.status {
            warn!("replication {} failed: {error}", o.index);
        }
    }
    let report = accumulate_report(&mc.cells, &tiers, &truths, &outcomes, mc.inference.level)?;

    ctx.ensure_out()?;
    let header = ctx.header();
    let mut notes = model_notes(ctx);
    if !report.not_converged.is_empty() {
        notes.push(format!(
            "{} replications excluded for R-hat above {}",
            report.not_converged.len(),
            mc.hb.rhat_threshold
        ));
    }
    if !report.failed.is_empty() {
        notes.push(format!("{} replications failed and were excluded", report.failed.len()));
    }
    let meta = SimulationMeta {
        command: ctx.command.name(),
        seed: ctx.seed,
        config_sha256: &ctx.sha256,
        population_seed: frame.seed,
        population_size: frame.population.len(),
        strata: frame.population.strata().len(),
        replications: mc.replications,
        sampling_fraction: mc.sampling_fraction,
        burnin: mc.mcmc.burnin,
        iterations: mc.mcmc.iterations,
        chains: mc.mcmc.chains,
        notes,
    };
    write_json(&ctx.path("coverage.json"), &CoverageDoc { meta, report: &report })?;
    write_file(&ctx.path("coverage.csv"), coverage_csv(&report, &header).as_bytes())?;
    write_file(&ctx.path("coverage_by_tier.csv"), coverage_by_tier_csv(&report, &header).as_bytes())?;
    write_file(&ctx.path("cv_by_tier.csv"), cv_by_tier_csv(&report, &header).as_bytes())?;
    write_file(&ctx.path("tables.txt"), tables_text(&report).as_bytes())?;
    let mut truth = crate::report::meta_lines(&header);
    truth.push_str("cell,tier,truth\n");
    for ((q, t), v) in mc.cells.iter().zip(&tiers).zip(&truths) {
        truth.push_str(&format!("{},{},{}\n", q.name, t.as_str(), num17(*v)));
    }
    write_file(&ctx.path("truth.csv"), truth.as_bytes())?;
    if ctx.config.output.replications {
        write_replications(&ctx.path("replications"), &outcomes, &header)?;
    }
    if ctx.config.output.export_sample {
        write_sample(&frame.population, &ctx.path("population_units.csv"), &ctx.path("population_strata.csv"))?;
        let s = replication_sample(&frame, &mc, 0)?;
        write_sample(&s, &ctx.path("sample_units.csv"), &ctx.path("sample_strata.csv"))?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct ReplicationDoc<'a> {
    meta: &'a [(String, String)],
    replication: &'a ReplicationOutcome,
}

fn write_replications(dir: &Path, outcomes: &[ReplicationOutcome], header: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for o in outcomes {
        write_json(
            &dir.join(format!("replication_{:04}.json", o.index)),
            &ReplicationDoc {
                meta: header,
                replication: o,
            },
        )?;
    }
    Ok(())
}
