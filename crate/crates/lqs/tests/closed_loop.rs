//! Closed-loop invariants of the solved policy at the built-in example
//! parameters: optimality of the fixed point, cost-scale invariance, exact
//! moment propagation against Monte Carlo, and covariance shape.

use std::sync::OnceLock;

use lqs::hvroc::{automation_filter, automation_gains};
use lqs::model::{
    build_cost, build_noise_model, CostMatrices, CostParams, ModelConfig, NoiseModel, NoiseParams,
    SystemModel, TaskSpec, IX_P,
};
use lqs::moments::{
    expected_cost, expected_cost_from_moments, propagate_moments, AutomationLoop, ClosedLoopSpec,
    MomentTrajectory,
};
use lqs::sim::{empirical_moments, realized_cost, simulate_ensemble};
use lqs::solver::{solve_lqs, HumanPolicy, SolveOptions};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Demo {
    model: SystemModel,
    noise: NoiseModel,
    cost: CostMatrices,
    task: TaskSpec,
    policy: HumanPolicy,
}

fn demo() -> &'static Demo {
    static DEMO: OnceLock<Demo> = OnceLock::new();
    DEMO.get_or_init(|| {
        let cfg = ModelConfig::reaching_demo();
        let model = cfg.system().unwrap();
        let noise = build_noise_model(&model, &cfg.noise).unwrap();
        let cost = build_cost(&model, &cfg.cost).unwrap();
        let task = cfg.task_spec();
        let policy = solve_lqs(&model, &noise, &cost, &task, &SolveOptions::default()).unwrap();
        assert!(policy.converged);
        Demo { model, noise, cost, task, policy }
    })
}

fn human_spec(d: &Demo) -> ClosedLoopSpec<'_> {
    ClosedLoopSpec {
        model: &d.model,
        noise: &d.noise,
        task: &d.task,
        human: &d.policy,
        automation: None,
    }
}

fn spec_with<'a>(d: &'a Demo, policy: &'a HumanPolicy) -> ClosedLoopSpec<'a> {
    ClosedLoopSpec {
        model: &d.model,
        noise: &d.noise,
        task: &d.task,
        human: policy,
        automation: None,
    }
}

#[test]
fn gains_are_invariant_under_cost_scaling() {
    let d = demo();
    let base = ModelConfig::reaching_demo().cost;
    for c in [1e-4, 0.1, 10.0, 1e4] {
        let scaled = CostParams {
            s_terminal: base.s_terminal.map(|s| s * c),
            s_running: base.s_running.map(|s| s * c),
            r_effort: base.r_effort * c,
        };
        let cost = build_cost(&d.model, &scaled).unwrap();
        let policy = solve_lqs(&d.model, &d.noise, &cost, &d.task, &SolveOptions::default())
            .unwrap();
        let mut worst = 0.0f64;
        for (l, l0) in policy.gains.gains.iter().zip(&d.policy.gains.gains) {
            let scale = l0.amax().max(1e-12);
            worst = worst.max((l - l0).amax() / scale);
        }
        assert!(worst <= 1e-10, "scale {c}: max relative gain deviation {worst:.3e}");
    }
}

/// At the fixed point the control gains are stationary: the central
/// finite-difference directional derivative of the expected cost along any
/// single-entry gain perturbation is negligible against the cost itself.
#[test]
fn control_gains_are_stationary_under_finite_differences() {
    let d = demo();
    let j0 = expected_cost(&human_spec(d), &d.cost).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let h = 1e-5;
    for _ in 0..5 {
        let t = rng.gen_range(0..d.model.horizon_steps);
        let j = rng.gen_range(0..d.model.n());
        let mut eval = |delta: f64| {
            let mut p = d.policy.clone();
            p.gains.gains[t][(0, j)] += delta;
            expected_cost(&spec_with(d, &p), &d.cost).unwrap()
        };
        let deriv = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(
            deriv.abs() < 1e-6 * j0,
            "gain ({t},{j}): directional derivative {deriv:.3e} vs cost {j0:.3e}"
        );
    }
}

/// Terminal estimation-error covariance of the human filter, read off the
/// propagated augmented second moments.
fn terminal_error_trace(moments: &MomentTrajectory, n: usize) -> f64 {
    let cov = moments.covariances.last().unwrap();
    let mu = moments.means.last().unwrap();
    let mut trace = 0.0;
    for i in 0..n {
        let central = cov[(i, i)] - cov[(i, n + i)] - cov[(n + i, i)] + cov[(n + i, n + i)];
        let bias = mu[i] - mu[n + i];
        trace += central + bias * bias;
    }
    trace
}

/// The filter recursion is greedily optimal per step, which pins the
/// terminal estimation error up to the (tiny) influence a gain has on the
/// later signal-dependent noise moments: single-entry perturbations must not
/// buy any material improvement, and distorting the whole schedule must
/// clearly hurt.
#[test]
fn filter_gains_do_not_admit_error_reducing_perturbations() {
    let d = demo();
    let n = d.model.n();
    let base = propagate_moments(&human_spec(d)).unwrap();
    let trace0 = terminal_error_trace(&base, n);
    assert!(trace0 > 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    for _ in 0..10 {
        let t = rng.gen_range(0..d.model.horizon_steps);
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..d.policy.filter.filters[t].ncols());
        let step = 0.01 * d.policy.filter.filters[t][(i, j)].abs().max(1e-3);
        for sign in [-1.0, 1.0] {
            let mut p = d.policy.clone();
            p.filter.filters[t][(i, j)] += sign * step;
            let trace = terminal_error_trace(&propagate_moments(&spec_with(d, &p)).unwrap(), n);
            assert!(
                trace >= trace0 * (1.0 - 1e-6),
                "filter ({t},{i},{j}) {sign:+}: terminal error trace fell {trace0:.6e} -> {trace:.6e}"
            );
        }
    }

}

/// Re-solving from the converged iterate reproduces it: the returned policy
/// really is a fixed point of the sweep, not an artifact of the start.
#[test]
fn converged_policy_is_a_fixed_point_of_the_sweep() {
    let d = demo();
    let opts = SolveOptions {
        init: Some((d.policy.gains.clone(), d.policy.filter.clone())),
        ..SolveOptions::default()
    };
    let again = solve_lqs(&d.model, &d.noise, &d.cost, &d.task, &opts).unwrap();
    assert!(again.converged);
    assert!(again.iterations <= 2, "took {} sweeps from the fixed point", again.iterations);
    let mut worst = 0.0f64;
    for (l, l0) in again.gains.gains.iter().zip(&d.policy.gains.gains) {
        worst = worst.max((l - l0).amax());
    }
    for (k, k0) in again.filter.filters.iter().zip(&d.policy.filter.filters) {
        worst = worst.max((k - k0).amax());
    }
    assert!(worst <= 1e-7, "fixed point drifted by {worst:.3e} on re-solve");
}

fn assert_psd_along(moments: &MomentTrajectory, label: &str) {
    for (t, cov) in moments.covariances.iter().enumerate() {
        let sym = (cov + cov.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-10, "{label}: covariance at step {t} has eigenvalue {min_eig:.3e}");
    }
}

#[test]
fn covariances_stay_psd_in_both_loop_configurations() {
    let d = demo();
    assert_psd_along(&propagate_moments(&human_spec(d)).unwrap(), "human-only");

    let gains = automation_gains(&d.model, &d.policy, &d.cost, 1e-4).unwrap();
    let filter = automation_filter(&d.model, &d.noise, &d.task, &d.policy).unwrap();
    let joint = ClosedLoopSpec {
        automation: Some(AutomationLoop { gains: &gains, filter: &filter }),
        ..human_spec(d)
    };
    assert_psd_along(&propagate_moments(&joint).unwrap(), "joint");
}

/// |empirical - analytic| within 3 standard errors at every 10th step, for
/// both the mean and the variance of position.
fn assert_moments_close(analytic: &MomentTrajectory, ensemble_n: usize, empirical: &MomentTrajectory) {
    let n = ensemble_n as f64;
    for t in (0..analytic.len()).step_by(10) {
        let var = analytic.var_p(t);
        let se_mean = (var / n).sqrt() + 1e-15;
        let dm = (empirical.mean_p(t) - analytic.mean_p(t)).abs();
        assert!(
            dm <= 3.0 * se_mean,
            "step {t}: mean off by {dm:.3e} ({:.2} SE)",
            dm / se_mean
        );
        let se_var = var * (2.0 / (n - 1.0)).sqrt() + 1e-15;
        let dv = (empirical.var_p(t) - var).abs();
        assert!(
            dv <= 3.0 * se_var,
            "step {t}: variance off by {dv:.3e} ({:.2} SE)",
            dv / se_var
        );
    }
    let peak = analytic.peak_var_p();
    let peak_emp = empirical.peak_var_p();
    assert!(
        (peak_emp - peak).abs() <= 0.05 * peak,
        "peak variance {peak_emp:.4e} vs analytic {peak:.4e}"
    );
}

#[test]
fn human_only_moments_match_monte_carlo() {
    let d = demo();
    let spec = human_spec(d);
    let analytic = propagate_moments(&spec).unwrap();
    let ensemble = simulate_ensemble(&spec, 10_000, 3).unwrap();
    let empirical = empirical_moments(&ensemble).unwrap();
    assert_moments_close(&analytic, ensemble.n_trials(), &empirical);
}

#[test]
fn joint_loop_moments_match_monte_carlo() {
    let d = demo();
    let gains = automation_gains(&d.model, &d.policy, &d.cost, 1e-4).unwrap();
    let filter = automation_filter(&d.model, &d.noise, &d.task, &d.policy).unwrap();
    let spec = ClosedLoopSpec {
        automation: Some(AutomationLoop { gains: &gains, filter: &filter }),
        ..human_spec(d)
    };
    let analytic = propagate_moments(&spec).unwrap();
    let ensemble = simulate_ensemble(&spec, 10_000, 5).unwrap();
    let empirical = empirical_moments(&ensemble).unwrap();
    assert_moments_close(&analytic, ensemble.n_trials(), &empirical);
}

#[test]
fn expected_cost_matches_the_sample_average() {
    let d = demo();
    let spec = human_spec(d);
    let moments = propagate_moments(&spec).unwrap();
    let analytic = expected_cost_from_moments(&spec, &d.cost, &moments);
    let ensemble = simulate_ensemble(&spec, 10_000, 9).unwrap();
    let sample: f64 = ensemble.trials.iter().map(|t| realized_cost(t, &d.cost)).sum::<f64>()
        / ensemble.n_trials() as f64;
    let rel = (sample - analytic).abs() / analytic;
    assert!(rel <= 0.02, "expected cost {analytic:.6e} vs sample mean {sample:.6e} ({rel:.3})");
}

#[test]
fn zero_noise_loop_is_exactly_deterministic() {
    let d = demo();
    let noise = build_noise_model(&d.model, &NoiseParams::zero()).unwrap();
    let policy = solve_lqs(&d.model, &noise, &d.cost, &d.task, &SolveOptions::default()).unwrap();
    let spec = ClosedLoopSpec {
        model: &d.model,
        noise: &noise,
        task: &d.task,
        human: &policy,
        automation: None,
    };
    let moments = propagate_moments(&spec).unwrap();
    let worst = moments
        .covariances
        .iter()
        .map(DMatrix::amax)
        .fold(0.0f64, f64::max);
    assert_eq!(worst, 0.0, "zero-noise covariance must vanish identically");
    let last = moments.means.last().unwrap();
    assert!((last[IX_P] - d.task.p_ref_m).abs() < d.task.reach_tol_m);
}
