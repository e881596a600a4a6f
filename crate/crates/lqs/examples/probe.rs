use lqs::ident::{data_moments, identify, segment_and_align, IdentificationConfig, SegmentOptions};
use lqs::io::{load_measured_csv, write_measured_csv};
use lqs::model::{build_cost, build_noise_model, ModelConfig};
use lqs::moments::{propagate_moments, ClosedLoopSpec};
use lqs::sim::simulate_ensemble;
use lqs::solver::{solve_lqs, SolveOptions};

fn main() {
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
    let truth = propagate_moments(&spec).unwrap();

    let t0 = std::time::Instant::now();
    let ensemble = simulate_ensemble(&spec, 10_000, 777).unwrap();
    println!("generate: {:?}", t0.elapsed());

    let dir = std::env::temp_dir().join("lqs_probe");
    std::fs::create_dir_all(&dir).unwrap();
    let csv_path = dir.join("measured.csv");
    let t1 = std::time::Instant::now();
    write_measured_csv(&csv_path, &ensemble).unwrap();
    println!(
        "write measured csv: {:?} ({} MB)",
        t1.elapsed(),
        std::fs::metadata(&csv_path).unwrap().len() / 1_000_000
    );

    let t2 = std::time::Instant::now();
    let trials = load_measured_csv(&csv_path, model.dt_s, false).unwrap();
    println!("load: {:?} ({} trials)", t2.elapsed(), trials.len());

    let (aligned, report) =
        segment_and_align(&trials, &task, model.dt_s, model.horizon_steps, &SegmentOptions::default());
    println!("segment: {report:?}");

    let data = data_moments(&aligned, model.dt_s).unwrap();
    let peak_var_data = data.var_p.iter().cloned().fold(0.0f64, f64::max);
    println!("peak var (data) = {peak_var_data:.4e}, (truth) = {:.4e}", truth.peak_var_p());

    let ident_cfg = IdentificationConfig::default();
    let t3 = std::time::Instant::now();
    let (result, _overlay) = identify(&aligned, &cfg, &ident_cfg).unwrap();
    println!("identify: {:?}", t3.elapsed());
    println!("converged = {}", result.converged);
    println!("s_terminal = {:?}   (truth [1, 0.253, 34.2, 0, 0])", result.s_terminal);
    println!("r_effort = {:.3e}   (truth 3.43e-9)", result.r_effort);
    println!("sigma = {:?}", result.sigma);
    println!("       truth [1.8e-3, 1.1e-5, 1.63e-2, 1.68e-2, 1.61e-2, 4.12e-2, 1.53e-2, 1.25, 1.4e-3]");
    println!(
        "mean_fit_rmse_m = {:.4e}  (criterion < 1e-3)",
        result.mean_fit_rmse_m
    );
    println!(
        "var_fit_rmse_m2 = {:.4e}  vs 10% of peak = {:.4e}",
        result.var_fit_rmse_m2,
        0.1 * peak_var_data
    );

    // RMSE of the recovered model mean against the *generating* analytic mean.
    let fitted_cost = build_cost(
        &model,
        &lqs::model::CostParams {
            s_terminal: result.s_terminal,
            s_running: result.s_running,
            r_effort: result.r_effort,
        },
    )
    .unwrap();
    let fitted_noise =
        build_noise_model(&model, &lqs::model::NoiseParams { sigma: result.sigma }).unwrap();
    let fitted_policy =
        solve_lqs(&model, &fitted_noise, &fitted_cost, &task, &SolveOptions::default()).unwrap();
    let fitted = propagate_moments(&ClosedLoopSpec {
        model: &model,
        noise: &fitted_noise,
        task: &task,
        human: &fitted_policy,
        automation: None,
    })
    .unwrap();
    let n = model.horizon_steps;
    let rmse_vs_truth = ((0..=n)
        .map(|t| (fitted.mean_p(t) - truth.mean_p(t)).powi(2))
        .sum::<f64>()
        / (n + 1) as f64)
        .sqrt();
    println!("mean RMSE vs generating analytic mean = {rmse_vs_truth:.4e}");
    println!(
        "recovered peak var = {:.4e} vs truth {:.4e} (ratio {:.3})",
        fitted.peak_var_p(),
        truth.peak_var_p(),
        fitted.peak_var_p() / truth.peak_var_p()
    );
    println!("total: {:?}", t0.elapsed());
}
