//! Command-line front end: simulate ensembles, identify parameters from
//! recorded trials, synthesize assistive gains, and reproduce the built-in
//! reaching example end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lqs::hvroc::{
    automation_filter, evaluate_joint, synthesize, AutomationPolicy, SynthesisOptions,
    VarianceTarget,
};
use lqs::ident::{
    data_moments, identify, segment_and_align, IdentificationConfig, SegmentOptions,
};
use lqs::io::{
    load_measured_csv, write_ensemble_csv, write_measured_csv, write_moments_csv,
    write_overlay_csv, write_synthesis_csv,
};
use lqs::model::{build_cost, build_noise_model, CostParams, ModelConfig, NoiseParams};
use lqs::moments::{propagate_moments, AutomationLoop, ClosedLoopSpec};
use lqs::sim::{compute_metrics, simulate_ensemble, TaskMetrics};
use lqs::solver::{solve_lqs, HumanPolicy, SolveOptions};

#[derive(Parser)]
#[command(
    name = "lqs",
    version,
    about = "Stochastic reaching: simulate, identify, and synthesize assistive control"
)]
struct Cli {
    /// Worker threads for parallel sections (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a trial ensemble and write moments, ensemble, and metrics.
    Simulate(SimulateArgs),
    /// Fit cost and noise parameters to recorded trials.
    Identify(IdentifyArgs),
    /// Search automation gains for a closed-loop variance target.
    Synthesize(SynthesizeArgs),
    /// Compare human-only and assisted conditions against the claim set.
    Evaluate(EvaluateArgs),
    /// Self-contained pipeline on the built-in example: generate synthetic
    /// measured data, identify, synthesize both targets, evaluate claims.
    DemoPaper(DemoArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration JSON; the built-in reaching example when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "lqs-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_trials: usize,
    /// Automation policy JSON; simulates the joint condition when given.
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Zero out all noise scales (deterministic rollouts).
    #[arg(long, default_value_t = false)]
    sigma_zero: bool,
}

#[derive(Args)]
struct IdentifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Recorded trials CSV (full ensemble schema or reduced measured schema).
    #[arg(long)]
    data: PathBuf,
    /// Linearly resample trials onto the model grid instead of rejecting
    /// mismatched sample intervals.
    #[arg(long, default_value_t = false)]
    resample: bool,
    /// Noise scales to hold at their initial values, as 1-based indices:
    /// "1-7", "2,9", or "1-3,8".
    #[arg(long)]
    freeze_sigma: Option<String>,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Identified parameters JSON; the config's cost/noise when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum)]
    target: TargetArg,
    /// Peak-variance fraction for the reduce target.
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Identified parameters JSON; the config's cost/noise when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Automation policy JSON for the variance-matching condition.
    #[arg(long)]
    match_gains: Option<PathBuf>,
    /// Automation policy JSON for the variance-reducing condition.
    #[arg(long)]
    reduce_gains: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    n_trials: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Match,
    Reduce,
}

/// Everything a run needs, with the built-in example as the default for any
/// missing section.
#[derive(Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    identification: IdentificationConfig,
    synthesis: SynthesisOptions,
    segmentation: SegmentOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::reaching_demo(),
            identification: IdentificationConfig::default(),
            synthesis: SynthesisOptions::default(),
            segmentation: SegmentOptions::default(),
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    tool_version: String,
    seed: Option<u64>,
    n_trials: Option<usize>,
    files: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ClaimResult {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Serialize, Deserialize)]
struct EvaluationReport {
    human_only: TaskMetrics,
    #[serde(rename = "match")]
    match_mode: Option<TaskMetrics>,
    #[serde(rename = "reduce")]
    reduce_mode: Option<TaskMetrics>,
    peak_variance_ratio_match: Option<f64>,
    peak_variance_ratio_reduce: Option<f64>,
    reduce_to_match_peak_ratio: Option<f64>,
    claims: Vec<ClaimResult>,
    all_claims_pass: bool,
}

/// Tracks artifacts for the manifest and writes them deterministically.
struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn finish(mut self, command: &str, config_sha256: &str, seed: Option<u64>, n_trials: Option<usize>) -> Result<()> {
        self.files.sort();
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: config_sha256.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            n_trials,
            files: self.files.clone(),
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, String)> {
    let cfg: RunConfig = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("cannot parse config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let canonical = serde_json::to_string(&cfg)?;
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    Ok((cfg, hash))
}

/// Applies an identified parameter file on top of the config's cost/noise.
fn apply_params(cfg: &mut RunConfig, params: Option<&Path>) -> Result<()> {
    let Some(path) = params else { return Ok(()) };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read parameters file {}", path.display()))?;
    let result = lqs::ident::IdentificationResult::from_json(&text)
        .with_context(|| format!("cannot parse parameters file {}", path.display()))?;
    cfg.model.cost = CostParams {
        s_terminal: result.s_terminal,
        s_running: result.s_running,
        r_effort: result.r_effort,
    };
    cfg.model.noise = NoiseParams { sigma: result.sigma };
    Ok(())
}

struct SolvedModel {
    model: lqs::model::SystemModel,
    noise: lqs::model::NoiseModel,
    cost: lqs::model::CostMatrices,
    task: lqs::model::TaskSpec,
    human: HumanPolicy,
}

fn solve_human(cfg: &ModelConfig) -> Result<SolvedModel> {
    let model = cfg.system()?;
    let noise = build_noise_model(&model, &cfg.noise)?;
    let cost = build_cost(&model, &cfg.cost)?;
    let task = cfg.task_spec();
    let human = solve_lqs(&model, &noise, &cost, &task, &SolveOptions::default())?;
    if !human.converged {
        log::warn!(
            "policy fixed point stopped at residual {:.3e} without reaching tolerance",
            human.residual
        );
    }
    Ok(SolvedModel { model, noise, cost, task, human })
}

fn load_automation(path: &Path, n: usize) -> Result<AutomationPolicy> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read gains file {}", path.display()))?;
    AutomationPolicy::from_json(&text, n)
        .with_context(|| format!("cannot parse gains file {}", path.display()))
}

/// Parses "1-3,8"-style 1-based index lists.
fn parse_index_spec(spec: &str, max: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse::<usize>()?, b.trim().parse::<usize>()?),
            None => {
                let v = part.parse::<usize>()?;
                (v, v)
            }
        };
        if lo < 1 || hi > max || lo > hi {
            bail!("index range '{part}' outside 1..={max}");
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let (mut cfg, hash) = load_config(args.common.config.as_deref())?;
    if args.sigma_zero {
        cfg.model.noise = NoiseParams::zero();
    }
    let solved = solve_human(&cfg.model)?;
    let automation = args
        .gains
        .as_deref()
        .map(|p| load_automation(p, solved.model.n()))
        .transpose()?;
    let filter = automation
        .as_ref()
        .map(|_| automation_filter(&solved.model, &solved.noise, &solved.task, &solved.human))
        .transpose()?;

    let spec = ClosedLoopSpec {
        model: &solved.model,
        noise: &solved.noise,
        task: &solved.task,
        human: &solved.human,
        automation: automation
            .as_ref()
            .zip(filter.as_ref())
            .map(|(a, f)| AutomationLoop { gains: &a.gains, filter: f }),
    };
    let moments = propagate_moments(&spec)?;
    let metrics = compute_metrics(&moments, &solved.task);
    let ensemble = simulate_ensemble(&spec, args.n_trials, args.seed)?;

    let mut out = OutDir::create(&args.common.out)?;
    out.write_json("effective_config.json", &cfg)?;
    write_moments_csv(&out.path("moments.csv"), &moments)?;
    write_ensemble_csv(&out.path("ensemble.csv"), &ensemble)?;
    out.write_json("metrics.json", &metrics)?;
    out.finish("simulate", &hash, Some(args.seed), Some(args.n_trials))?;
    Ok(())
}

fn cmd_identify(args: &IdentifyArgs) -> Result<()> {
    let (mut cfg, hash) = load_config(args.common.config.as_deref())?;
    if let Some(spec) = &args.freeze_sigma {
        for i in parse_index_spec(spec, lqs::model::N_SIGMA)? {
            let v = cfg.identification.log10_sigma_init[i - 1];
            cfg.identification.log10_sigma_lower[i - 1] = v;
            cfg.identification.log10_sigma_upper[i - 1] = v;
        }
    }
    let model = cfg.model.system()?;
    let task = cfg.model.task_spec();

    let trials = load_measured_csv(&args.data, model.dt_s, args.resample)?;
    let (aligned, report) =
        segment_and_align(&trials, &task, model.dt_s, model.horizon_steps, &cfg.segmentation);
    if aligned.len() < 2 {
        bail!(
            "only {} usable trial(s) after segmentation \
             (dropped: {} no onset, {} short, {} wrong direction)",
            aligned.len(),
            report.dropped_no_onset,
            report.dropped_short,
            report.dropped_direction
        );
    }

    let (result, overlay) = identify(&aligned, &cfg.model, &cfg.identification)?;
    log::info!(
        "identified: mean fit {:.3e} m RMSE, variance fit {:.3e} m^2 RMSE, converged: {}",
        result.mean_fit_rmse_m,
        result.var_fit_rmse_m2,
        result.converged
    );

    let mut out = OutDir::create(&args.common.out)?;
    out.write_json("effective_config.json", &cfg)?;
    out.write_json("identification.json", &result)?;
    write_overlay_csv(&out.path("fit_overlay.csv"), &overlay)?;
    out.finish("identify", &hash, None, None)?;
    Ok(())
}

fn target_from_args(args: &SynthesizeArgs) -> Result<VarianceTarget> {
    let target = match args.target {
        TargetArg::Match => VarianceTarget::match_human(),
        TargetArg::Reduce => VarianceTarget::reduce(args.kappa),
    };
    target.validate()?;
    Ok(target)
}

fn cmd_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let (mut cfg, hash) = load_config(args.common.config.as_deref())?;
    apply_params(&mut cfg, args.params.as_deref())?;
    let solved = solve_human(&cfg.model)?;
    let target = target_from_args(args)?;

    let (policy, report) = synthesize(
        &solved.model,
        &solved.noise,
        &solved.human,
        &solved.cost,
        &solved.task,
        target,
        &cfg.synthesis,
    )?;
    let mode = match args.target {
        TargetArg::Match => "match",
        TargetArg::Reduce => "reduce",
    };
    log::info!(
        "selected rho = {:.6e}, achieved peak variance {:.6e} (baseline {:.6e})",
        policy.rho,
        policy.achieved_peak_variance_m2,
        policy.baseline_peak_variance_m2
    );

    let mut out = OutDir::create(&args.common.out)?;
    out.write_json("effective_config.json", &cfg)?;
    let json = policy.to_json()?;
    fs::write(out.path(&format!("automation_{mode}.json")), json + "\n")?;
    write_synthesis_csv(&out.path(&format!("synthesis_{mode}.csv")), &report.trace)?;
    out.finish("synthesize", &hash, None, None)?;
    Ok(())
}

/// Claim set shared by `evaluate` and the demo pipeline.
fn build_report(
    human: TaskMetrics,
    match_mode: Option<TaskMetrics>,
    reduce_mode: Option<TaskMetrics>,
    mut extra: Vec<ClaimResult>,
) -> EvaluationReport {
    let mut claims = Vec::new();
    let mut claim = |name: &str, passed: bool, detail: String| {
        claims.push(ClaimResult { name: name.to_string(), passed, detail });
    };
    let faster = |cond: &TaskMetrics| match (cond.time_to_reach_s, human.time_to_reach_s) {
        (Some(c), Some(h)) => (c < h, format!("{c} s vs human-only {h} s")),
        (Some(c), None) => (true, format!("{c} s vs human-only never")),
        (None, h) => (false, format!("never reaches vs human-only {h:?}")),
    };
    let endpoint_similar = |cond: &TaskMetrics| {
        let ratio = cond.endpoint_variance_m2 / human.endpoint_variance_m2;
        (
            (0.5..=2.0).contains(&ratio),
            format!("endpoint variance ratio {ratio:.3} (accepted band [0.5, 2])"),
        )
    };

    if let Some(m) = &match_mode {
        claim(
            "match_peak_variance_not_above_human",
            m.peak_position_variance_m2 <= human.peak_position_variance_m2 * (1.0 + 1e-9),
            format!(
                "{:.6e} vs {:.6e}",
                m.peak_position_variance_m2, human.peak_position_variance_m2
            ),
        );
        let (ok, detail) = faster(m);
        claim("match_reaches_faster_than_human", ok, detail);
        let (ok, detail) = endpoint_similar(m);
        claim("match_endpoint_variance_similar", ok, detail);
    }
    if let Some(r) = &reduce_mode {
        claim(
            "reduce_peak_variance_below_human",
            r.peak_position_variance_m2 < human.peak_position_variance_m2,
            format!(
                "{:.6e} vs {:.6e}",
                r.peak_position_variance_m2, human.peak_position_variance_m2
            ),
        );
        let (ok, detail) = faster(r);
        claim("reduce_reaches_faster_than_human", ok, detail);
        let (ok, detail) = endpoint_similar(r);
        claim("reduce_endpoint_variance_similar", ok, detail);
    }
    let gap = match (&match_mode, &reduce_mode) {
        (Some(m), Some(r)) => {
            let ratio = r.peak_position_variance_m2 / m.peak_position_variance_m2;
            claim(
                "reduce_peak_variance_below_match",
                ratio < 1.0,
                format!("ratio {ratio:.3}"),
            );
            claim(
                "reduce_to_match_gap_in_expected_range",
                ratio > 0.0 && ratio <= 0.95,
                format!("ratio {ratio:.3}, expected in (0, 0.95]"),
            );
            Some(ratio)
        }
        _ => None,
    };
    claims.append(&mut extra);

    let all = claims.iter().all(|c| c.passed);
    EvaluationReport {
        peak_variance_ratio_match: match_mode
            .as_ref()
            .map(|m| m.peak_position_variance_m2 / human.peak_position_variance_m2),
        peak_variance_ratio_reduce: reduce_mode
            .as_ref()
            .map(|r| r.peak_position_variance_m2 / human.peak_position_variance_m2),
        reduce_to_match_peak_ratio: gap,
        human_only: human,
        match_mode,
        reduce_mode,
        claims,
        all_claims_pass: all,
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (mut cfg, hash) = load_config(args.common.config.as_deref())?;
    apply_params(&mut cfg, args.params.as_deref())?;
    let solved = solve_human(&cfg.model)?;

    let mut out = OutDir::create(&args.common.out)?;
    out.write_json("effective_config.json", &cfg)?;

    let human_moments = propagate_moments(&ClosedLoopSpec {
        model: &solved.model,
        noise: &solved.noise,
        task: &solved.task,
        human: &solved.human,
        automation: None,
    })?;
    let human_metrics = compute_metrics(&human_moments, &solved.task);
    write_moments_csv(&out.path("moments_human_only.csv"), &human_moments)?;
    out.write_json("metrics_human_only.json", &human_metrics)?;

    let run_condition = |name: &str, path: Option<&Path>, out: &mut OutDir| -> Result<Option<TaskMetrics>> {
        let Some(path) = path else { return Ok(None) };
        let policy = load_automation(path, solved.model.n())?;
        let (moments, metrics) =
            evaluate_joint(&solved.model, &solved.noise, &solved.human, &policy, &solved.task)?;
        write_moments_csv(&out.path(&format!("moments_{name}.csv")), &moments)?;
        out.write_json(&format!("metrics_{name}.json"), &metrics)?;
        Ok(Some(metrics))
    };
    let match_metrics = run_condition("match", args.match_gains.as_deref(), &mut out)?;
    let reduce_metrics = run_condition("reduce", args.reduce_gains.as_deref(), &mut out)?;

    let report = build_report(human_metrics, match_metrics, reduce_metrics, Vec::new());
    for c in &report.claims {
        log::info!("claim {}: {} ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
    out.write_json("evaluation.json", &report)?;
    out.finish("evaluate", &hash, None, None)?;
    Ok(())
}

fn cmd_demo(args: &DemoArgs) -> Result<ExitCode> {
    let (cfg, hash) = load_config(args.common.config.as_deref())?;
    let mut out = OutDir::create(&args.common.out)?;
    out.write_json("effective_config.json", &cfg)?;

    // Ground truth behavior and its synthetic "recording".
    let truth = solve_human(&cfg.model)?;
    let truth_spec = ClosedLoopSpec {
        model: &truth.model,
        noise: &truth.noise,
        task: &truth.task,
        human: &truth.human,
        automation: None,
    };
    let ensemble = simulate_ensemble(&truth_spec, args.n_trials, args.seed)?;
    write_measured_csv(&out.path("measured.csv"), &ensemble)?;
    log::info!("generated {} synthetic trials", args.n_trials);

    // Identification from the file, exactly as an external user would run it.
    let trials = load_measured_csv(&out.dir.join("measured.csv"), truth.model.dt_s, false)?;
    let (aligned, _) = segment_and_align(
        &trials,
        &truth.task,
        truth.model.dt_s,
        truth.model.horizon_steps,
        &cfg.segmentation,
    );
    if aligned.len() < 2 {
        bail!("segmentation left fewer than 2 trials");
    }
    let data = data_moments(&aligned, truth.model.dt_s)?;
    let (ident, overlay) = identify(&aligned, &cfg.model, &cfg.identification)?;
    out.write_json("identification.json", &ident)?;
    write_overlay_csv(&out.path("fit_overlay.csv"), &overlay)?;
    log::info!(
        "identification: mean fit {:.3e} m, variance fit {:.3e} m^2, converged: {}",
        ident.mean_fit_rmse_m,
        ident.var_fit_rmse_m2,
        ident.converged
    );

    // Re-solve the human on the identified parameters; all downstream
    // synthesis and evaluation run on the identified model.
    let mut id_cfg = cfg.model.clone();
    id_cfg.cost = CostParams {
        s_terminal: ident.s_terminal,
        s_running: ident.s_running,
        r_effort: ident.r_effort,
    };
    id_cfg.noise = NoiseParams { sigma: ident.sigma };
    let solved = solve_human(&id_cfg)?;

    let human_moments = propagate_moments(&ClosedLoopSpec {
        model: &solved.model,
        noise: &solved.noise,
        task: &solved.task,
        human: &solved.human,
        automation: None,
    })?;
    let human_metrics = compute_metrics(&human_moments, &solved.task);
    write_moments_csv(&out.path("moments_human_only.csv"), &human_moments)?;
    out.write_json("metrics_human_only.json", &human_metrics)?;

    let mut conditions: Vec<(&str, TaskMetrics)> = Vec::new();
    for (name, target) in [
        ("match", VarianceTarget::match_human()),
        ("reduce", VarianceTarget::reduce(0.5)),
    ] {
        let (policy, report) = synthesize(
            &solved.model,
            &solved.noise,
            &solved.human,
            &solved.cost,
            &solved.task,
            target,
            &cfg.synthesis,
        )?;
        let json = policy.to_json()?;
        fs::write(out.path(&format!("automation_{name}.json")), json + "\n")?;
        write_synthesis_csv(&out.path(&format!("synthesis_{name}.csv")), &report.trace)?;
        let (moments, metrics) =
            evaluate_joint(&solved.model, &solved.noise, &solved.human, &policy, &solved.task)?;
        write_moments_csv(&out.path(&format!("moments_{name}.csv")), &moments)?;
        out.write_json(&format!("metrics_{name}.json"), &metrics)?;
        log::info!(
            "{name}: rho = {:.3e}, peak variance {:.6e} ({} of baseline)",
            policy.rho,
            policy.achieved_peak_variance_m2,
            policy.achieved_peak_variance_m2 / policy.baseline_peak_variance_m2
        );
        conditions.push((name, metrics));
    }
    let match_metrics = conditions.iter().find(|(n, _)| *n == "match").map(|(_, m)| *m);
    let reduce_metrics = conditions.iter().find(|(n, _)| *n == "reduce").map(|(_, m)| *m);

    // Identification quality is part of the reproduction: the recovered
    // model must retrace the data it was fit to.
    let peak_var_data = data.var_p.iter().cloned().fold(0.0f64, f64::max);
    let extra = vec![
        ClaimResult {
            name: "identification_mean_fit_below_1mm".into(),
            passed: ident.mean_fit_rmse_m < 1e-3,
            detail: format!("mean fit RMSE {:.3e} m", ident.mean_fit_rmse_m),
        },
        ClaimResult {
            name: "identification_peak_variance_within_10_percent".into(),
            passed: (human_moments.peak_var_p() - peak_var_data).abs() <= 0.1 * peak_var_data,
            detail: format!(
                "model peak {:.4e} vs data peak {:.4e}",
                human_moments.peak_var_p(),
                peak_var_data
            ),
        },
    ];

    let report = build_report(human_metrics, match_metrics, reduce_metrics, extra);
    out.write_json("evaluation.json", &report)?;
    out.finish("demo-paper", &hash, Some(args.seed), Some(args.n_trials))?;

    if report.all_claims_pass {
        println!("all {} claims pass", report.claims.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed claims:");
        for c in report.claims.iter().filter(|c| !c.passed) {
            eprintln!("  {}: {}", c.name, c.detail);
        }
        Ok(ExitCode::from(2))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore failure: the global pool can only be set once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args).map(|()| ExitCode::SUCCESS),
        Command::Identify(args) => cmd_identify(args).map(|()| ExitCode::SUCCESS),
        Command::Synthesize(args) => cmd_synthesize(args).map(|()| ExitCode::SUCCESS),
        Command::Evaluate(args) => cmd_evaluate(args).map(|()| ExitCode::SUCCESS),
        Command::DemoPaper(args) => cmd_demo(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
