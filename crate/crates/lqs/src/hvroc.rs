//! Synthesis of assistive automation gains with a variance target.
//!
//! The automation is a certainty-equivalent finite-horizon LQR on the mean
//! closed-loop dynamics left by the (converged) human policy. Its effort
//! weight rho is the single tuning knob: large rho means a timid assistant
//! and a closed loop indistinguishable from the human alone, small rho means
//! a stiff assistant that suppresses variability. A scalar search over
//! log10(rho) places the joint peak position variance at a chosen fraction
//! of the human-only baseline.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostMatrices, NoiseModel, SystemModel, TaskSpec, IX_P, IX_REF};
use crate::moments::{
    propagate_moments, AutomationLoop, ClosedLoopSpec, MomentTrajectory, INNOVATION_RIDGE,
};
use crate::sim::{compute_metrics, TaskMetrics};
use crate::solver::{riccati_gains, Actor, FilterSchedule, GainSchedule, HumanPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// Keep the human-only peak variance (kappa = 1).
    Match,
    /// Shrink the peak variance to kappa times the baseline.
    Reduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTarget {
    pub mode: VarianceMode,
    pub kappa: f64,
}

impl VarianceTarget {
    pub fn match_human() -> Self {
        Self { mode: VarianceMode::Match, kappa: 1.0 }
    }

    pub fn reduce(kappa: f64) -> Self {
        Self { mode: VarianceMode::Reduce, kappa }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be in (0, 1], got {}",
                self.kappa
            )));
        }
        if self.mode == VarianceMode::Match && self.kappa != 1.0 {
            return Err(Error::InvalidParameter(
                "match mode requires kappa = 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisOptions {
    pub grid_log10_min: f64,
    pub grid_log10_max: f64,
    pub grid_points: usize,
    pub bisection_steps: usize,
    /// Acceptance band around the target, as a fraction of the baseline.
    pub var_tol: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            grid_log10_min: -12.0,
            grid_log10_max: 12.0,
            grid_points: 25,
            bisection_steps: 40,
            var_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AutomationPolicy {
    pub target: VarianceTarget,
    pub rho: f64,
    pub achieved_peak_variance_m2: f64,
    pub baseline_peak_variance_m2: f64,
    pub gains: GainSchedule,
}

#[derive(Debug, Clone)]
pub struct SynthesisReport {
    pub baseline_peak_variance_m2: f64,
    /// Every (rho, joint peak variance) pair evaluated, in evaluation order.
    pub trace: Vec<(f64, f64)>,
    pub bracketed: bool,
    /// Whether peak variance was non-decreasing in rho across the searched
    /// branch of the grid (from the variance minimum upward).
    pub monotone: bool,
    /// True when the target was below the achievable variance floor and the
    /// returned policy is the floor itself rather than the target.
    pub boundary_certified: bool,
}

#[derive(Serialize, Deserialize)]
struct AutomationPolicyFile {
    mode: VarianceMode,
    kappa: f64,
    rho: f64,
    achieved_peak_variance_m2: f64,
    baseline_peak_variance_m2: f64,
    gains: Vec<Vec<f64>>,
}

impl AutomationPolicy {
    pub fn to_json(&self) -> Result<String> {
        let file = AutomationPolicyFile {
            mode: self.target.mode,
            kappa: self.target.kappa,
            rho: self.rho,
            achieved_peak_variance_m2: self.achieved_peak_variance_m2,
            baseline_peak_variance_m2: self.baseline_peak_variance_m2,
            gains: self
                .gains
                .gains
                .iter()
                .map(|g| g.transpose().iter().cloned().collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str, n: usize) -> Result<Self> {
        let file: AutomationPolicyFile = serde_json::from_str(text)?;
        let mut gains = Vec::with_capacity(file.gains.len());
        for (t, row) in file.gains.iter().enumerate() {
            if row.len() % n != 0 {
                return Err(Error::DimensionMismatch(format!(
                    "gain row {t} has {} entries, not a multiple of n = {n}",
                    row.len()
                )));
            }
            let m = row.len() / n;
            gains.push(DMatrix::from_row_slice(m, n, row));
        }
        Ok(Self {
            target: VarianceTarget { mode: file.mode, kappa: file.kappa },
            rho: file.rho,
            achieved_peak_variance_m2: file.achieved_peak_variance_m2,
            baseline_peak_variance_m2: file.baseline_peak_variance_m2,
            gains: GainSchedule { actor: Actor::Automation, gains },
        })
    }
}

/// Automation LQR gains for one effort weight on the human-closed mean
/// dynamics.
///
/// The terminal state cost is the human's own. The running cost keeps only
/// the tracking-error term `(p - p_ref)^2` at the human's terminal error
/// weight: penalizing the error just at the horizon would let the assistant
/// defer all correction (leaving the mid-movement variance peak untouched no
/// matter how cheap its effort), while carrying the human's velocity and
/// force weights into the running cost would make the assistant brake the
/// movement it is supposed to help.
pub fn automation_gains(
    model: &SystemModel,
    human: &HumanPolicy,
    human_cost: &CostMatrices,
    rho: f64,
) -> Result<GainSchedule> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("rho must be positive and finite, got {rho}")));
    }
    let n = model.n();
    let a_seq: Vec<DMatrix<f64>> = human
        .gains
        .gains
        .iter()
        .map(|l_h| &model.a - &model.b_h * l_h)
        .collect();
    let mut err_row = DMatrix::zeros(1, n);
    err_row[(0, IX_P)] = 1.0;
    err_row[(0, IX_REF)] = -1.0;
    let q_running = err_row.transpose() * human_cost.q_terminal[(IX_P, IX_P)] * &err_row;
    let r = DMatrix::from_element(model.b_a.ncols(), model.b_a.ncols(), rho);
    let gains = riccati_gains(
        &a_seq,
        &model.b_a,
        &q_running,
        &human_cost.q_terminal,
        &r,
        model.horizon_steps,
    )?;
    Ok(GainSchedule { actor: Actor::Automation, gains })
}

/// Innovation gains for the automation's observer along the horizon.
///
/// The observer predicts with the expected human policy and corrects against
/// the exact measurement `y_A = H_A x`. Its prediction error is driven by
/// the additive process noise, the control-dependent channels at the human's
/// realized command power, and the human acting on an internal estimate
/// rather than the plant state. All of these are read off the human-only
/// closed-loop moments, so the gains depend on the human policy but not on
/// the automation feedback; a filter Riccati recursion then balances them
/// against what the measured components reveal.
pub fn automation_filter(
    model: &SystemModel,
    noise: &NoiseModel,
    task: &TaskSpec,
    human: &HumanPolicy,
) -> Result<FilterSchedule> {
    let human_only =
        propagate_moments(&ClosedLoopSpec { model, noise, task, human, automation: None })?;
    let n = model.n();
    let r_a = model.h_a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let ridge = DMatrix::<f64>::identity(r_a, r_a) * INNOVATION_RIDGE;

    // Measured components start exact, the rest at the task mean.
    let resid = &ident - model.h_a.transpose() * &model.h_a;
    let mut p = &resid * &task.initial_covariance * resid.transpose();

    let mut filters = Vec::with_capacity(model.horizon_steps);
    for t in 0..model.horizon_steps {
        let mean = &human_only.means[t];
        let cov = &human_only.covariances[t];
        let mu_h = mean.rows(n, n).into_owned();
        let m_hh = cov.view((n, n), (n, n)) + &mu_h * mu_h.transpose();
        let l_h = &human.gains.gains[t];
        let u2 = l_h * &m_hh * l_h.transpose();

        let mut w = noise.omega_alpha.clone();
        for c in &noise.c_channels {
            w += c * &u2 * c.transpose();
        }
        // Gap between the command the human issues (-L xh) and the one the
        // observer predicts (-L xa): covariance of xh - xa, approximated by
        // the human's estimation error plus the observer's own current error.
        let p_eh = (cov.view((0, 0), (n, n)) - cov.view((0, n), (n, n))
            - cov.view((n, 0), (n, n))
            + cov.view((n, n), (n, n)))
        .into_owned();
        let gap = l_h * (&p_eh + &p) * l_h.transpose();
        w += &model.b_h * &gap * model.b_h.transpose();

        let p_pred = &model.a * &p * model.a.transpose() + &w;
        let s = &model.h_a * &p_pred * model.h_a.transpose() + &ridge;
        let s_inv = s.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
            Error::NonFinite(format!("automation innovation covariance at step {t}"))
        })?;
        let k = &p_pred * model.h_a.transpose() * s_inv;
        let i_kh = &ident - &k * &model.h_a;
        p = &i_kh * &p_pred * i_kh.transpose() + &k * &ridge * k.transpose();
        filters.push(k);
    }
    Ok(FilterSchedule { filters })
}

/// Joint-loop moments and reach metrics for a human policy plus automation.
pub fn evaluate_joint(
    model: &SystemModel,
    noise: &NoiseModel,
    human: &HumanPolicy,
    automation: &AutomationPolicy,
    task: &TaskSpec,
) -> Result<(MomentTrajectory, TaskMetrics)> {
    let filter = automation_filter(model, noise, task, human)?;
    let moments = propagate_moments(&ClosedLoopSpec {
        model,
        noise,
        task,
        human,
        automation: Some(AutomationLoop { gains: &automation.gains, filter: &filter }),
    })?;
    let metrics = compute_metrics(&moments, task);
    Ok((moments, metrics))
}

fn joint_peak_var(
    model: &SystemModel,
    noise: &NoiseModel,
    task: &TaskSpec,
    human: &HumanPolicy,
    gains: &GainSchedule,
    filter: &FilterSchedule,
) -> Result<f64> {
    let moments = propagate_moments(&ClosedLoopSpec {
        model,
        noise,
        task,
        human,
        automation: Some(AutomationLoop { gains, filter }),
    })?;
    Ok(moments.peak_var_p())
}

/// Searches the effort weight so the joint peak position variance lands at
/// `target.kappa` times the human-only baseline (within `opts.var_tol`
/// of it, as a fraction of the baseline).
pub fn synthesize(
    model: &SystemModel,
    noise: &NoiseModel,
    human: &HumanPolicy,
    human_cost: &CostMatrices,
    task: &TaskSpec,
    target: VarianceTarget,
    opts: &SynthesisOptions,
) -> Result<(AutomationPolicy, SynthesisReport)> {
    target.validate()?;
    if !human.converged {
        return Err(Error::PolicyNotConverged { residual: human.residual });
    }
    if opts.grid_points < 2 || opts.grid_log10_min >= opts.grid_log10_max {
        return Err(Error::InvalidParameter("synthesis grid is degenerate".into()));
    }

    let baseline = propagate_moments(&ClosedLoopSpec {
        model,
        noise,
        task,
        human,
        automation: None,
    })?
    .peak_var_p();
    if !(baseline.is_finite() && baseline >= 0.0) {
        return Err(Error::Synthesis(format!("human-only baseline variance is {baseline}")));
    }

    // The target variance itself. For match mode every finite rho produces
    // variance strictly below the baseline, so aim at the inside edge of the
    // acceptance band rather than the unattainable baseline itself.
    let goal = match target.mode {
        VarianceMode::Match => (1.0 - 0.5 * opts.var_tol) * baseline,
        VarianceMode::Reduce => target.kappa * baseline,
    };
    let band = opts.var_tol * baseline;
    let within = |peak: f64| (peak - target.kappa * baseline).abs() <= band
        || (target.mode == VarianceMode::Match && (peak - baseline).abs() <= band);

    let filter = automation_filter(model, noise, task, human)?;
    let eval = |log_rho: f64| -> Result<(f64, GainSchedule, f64)> {
        let rho = 10f64.powf(log_rho);
        let gains = automation_gains(model, human, human_cost, rho)?;
        let peak = joint_peak_var(model, noise, task, human, &gains, &filter)?;
        Ok((rho, gains, peak))
    };

    // Coarse grid, evaluated in parallel and kept in grid order.
    let exps: Vec<f64> = (0..opts.grid_points)
        .map(|i| {
            opts.grid_log10_min
                + (opts.grid_log10_max - opts.grid_log10_min) * i as f64
                    / (opts.grid_points - 1) as f64
        })
        .collect();
    let grid: Result<Vec<(f64, GainSchedule, f64)>> =
        exps.par_iter().map(|&e| eval(e)).collect();
    let grid = grid?;

    let mut trace: Vec<(f64, f64)> = grid.iter().map(|(rho, _, peak)| (*rho, *peak)).collect();

    let mut best: Option<(f64, GainSchedule, f64)> = None;
    let consider = |cand: &(f64, GainSchedule, f64), best: &mut Option<(f64, GainSchedule, f64)>| {
        if within(cand.2) {
            let better = match best {
                Some((_, _, peak)) => {
                    (cand.2 - goal).abs() < (*peak - goal).abs()
                }
                None => true,
            };
            if better {
                *best = Some(cand.clone());
            }
        }
    };
    let mut floor: Option<(f64, GainSchedule, f64)> = None;
    let lower = |cand: &(f64, GainSchedule, f64), floor: &mut Option<(f64, GainSchedule, f64)>| {
        if floor.as_ref().is_none_or(|(_, _, peak)| cand.2 < *peak) {
            *floor = Some(cand.clone());
        }
    };

    // The variance curve dips with rho and rises again on the far left where
    // the loop is over-driven and amplifies its own estimation noise. Operate
    // on the branch from the minimum upward (larger rho = weaker assistant)
    // and bracket the first cell there whose variance straddles the goal.
    let arg_min = grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .2.total_cmp(&b.1 .2))
        .map(|(i, _)| i)
        .expect("grid is non-empty");
    let monotone =
        grid[arg_min..].windows(2).all(|w| w[0].2 <= w[1].2 * (1.0 + 1e-12));
    if !monotone {
        log::warn!("joint peak variance is not monotone in rho over the search branch");
    }
    let mut lo = None;
    let mut hi = None;
    for (i, entry) in grid.iter().enumerate() {
        lower(entry, &mut floor);
        if i < arg_min {
            continue;
        }
        consider(entry, &mut best);
        if entry.2 >= goal && hi.is_none() {
            hi = Some(i);
            lo = if i > arg_min { Some(i - 1) } else { None };
        }
    }

    let bracketed = lo.is_some() && hi.is_some();
    if bracketed {
        let mut e_lo = exps[lo.unwrap()];
        let mut e_hi = exps[hi.unwrap()];
        for _ in 0..opts.bisection_steps {
            if best.as_ref().is_some_and(|(_, _, peak)| (peak - goal).abs() <= 0.25 * band) {
                break;
            }
            let mid = 0.5 * (e_lo + e_hi);
            let cand = eval(mid)?;
            trace.push((cand.0, cand.2));
            if cand.2 >= goal {
                e_hi = mid;
            } else {
                e_lo = mid;
            }
            consider(&cand, &mut best);
            lower(&cand, &mut floor);
        }
    }

    // Target below anything the loop can do: polish the variance minimum by
    // ternary search and certify the achievable boundary instead.
    let mut boundary_certified = false;
    if best.is_none() && floor.as_ref().is_some_and(|(_, _, peak)| goal < *peak) {
        let mut e_lo = exps[arg_min.saturating_sub(1)];
        let mut e_hi = exps[(arg_min + 1).min(exps.len() - 1)];
        for _ in 0..opts.bisection_steps / 2 {
            let m1 = e_lo + (e_hi - e_lo) / 3.0;
            let m2 = e_hi - (e_hi - e_lo) / 3.0;
            let c1 = eval(m1)?;
            let c2 = eval(m2)?;
            trace.push((c1.0, c1.2));
            trace.push((c2.0, c2.2));
            lower(&c1, &mut floor);
            lower(&c2, &mut floor);
            if c1.2 < c2.2 {
                e_hi = m2;
            } else {
                e_lo = m1;
            }
        }
        boundary_certified = true;
        best = floor.clone();
        let (_, _, peak) = best.as_ref().unwrap();
        log::warn!(
            "target peak variance {:.3e} is below the achievable floor {:.3e} \
             ({:.1}% of baseline); certifying the floor",
            goal,
            peak,
            100.0 * peak / baseline
        );
    }

    let report = SynthesisReport {
        baseline_peak_variance_m2: baseline,
        trace,
        bracketed,
        monotone,
        boundary_certified,
    };
    let Some((rho, gains, achieved)) = best else {
        return Err(Error::Synthesis(format!(
            "no effort weight reached {:.3e} within tolerance {:.3e} \
             (baseline {baseline:.3e}, bracketed: {bracketed})",
            target.kappa * baseline,
            band,
        )));
    };

    let policy = AutomationPolicy {
        target,
        rho,
        achieved_peak_variance_m2: achieved,
        baseline_peak_variance_m2: baseline,
        gains,
    };
    Ok((policy, report))
}
