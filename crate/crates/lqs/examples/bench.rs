use lqs::ident::{identify, IdentificationConfig};
use lqs::io::MeasuredTrial;
use lqs::model::{build_cost, build_noise_model, ModelConfig, IX_P, IX_V};
use lqs::moments::ClosedLoopSpec;
use lqs::sim::simulate_ensemble;
use lqs::solver::{solve_lqs, SolveOptions};

struct Stdout;
impl log::Log for Stdout {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        println!("[{}] {}", record.level(), record.args());
    }
    fn flush(&self) {}
}

fn main() {
    log::set_logger(&Stdout).unwrap();
    log::set_max_level(log::LevelFilter::Info);

    let cfg = ModelConfig::reaching_demo();
    let model = cfg.system().unwrap();
    let noise = build_noise_model(&model, &cfg.noise).unwrap();
    let cost = build_cost(&model, &cfg.cost).unwrap();
    let task = cfg.task_spec();
    let policy = solve_lqs(&model, &noise, &cost, &task, &SolveOptions::default()).unwrap();
    let spec = ClosedLoopSpec {
        model: &model,
        noise: &noise,
        task: &task,
        human: &policy,
        automation: None,
    };
    let ensemble = simulate_ensemble(&spec, 2_000, 11).unwrap();
    let trials: Vec<MeasuredTrial> = ensemble
        .trials
        .iter()
        .enumerate()
        .map(|(i, tr)| MeasuredTrial {
            trial_id: i as u64,
            time_s: (0..=tr.n_steps()).map(|t| t as f64 * ensemble.dt_s).collect(),
            p_m: (0..=tr.n_steps()).map(|t| tr.state(t)[IX_P]).collect(),
            v_mps: Some((0..=tr.n_steps()).map(|t| tr.state(t)[IX_V]).collect()),
            f_n: None,
        })
        .collect();

    let ident_cfg = IdentificationConfig {
        log10_sigma_init: cfg.noise.sigma.map(f64::log10),
        freeze_sigma: true,
        outer_iterations: 3,
        cost_level_evals: 300,
        polish_evals: 200,
        ..IdentificationConfig::default()
    };
    let t = std::time::Instant::now();
    let (result, _) = identify(&trials, &cfg, &ident_cfg).unwrap();
    println!("identify took {:?}", t.elapsed());
    println!(
        "converged = {}, mean rmse = {:.4e}, var rmse = {:.4e}",
        result.converged, result.mean_fit_rmse_m, result.var_fit_rmse_m2
    );
    println!("s = {:?}, r = {:.3e}", result.s_terminal, result.r_effort);
}
