//! Finite-horizon gain synthesis: classical Riccati recursion for the
//! noise-free case and the coupled controller/estimator fixed point for the
//! full noise model.
//!
//! With control-dependent process noise and state-dependent observation
//! noise, the optimal feedback gains and filter gains depend on each other.
//! `solve_lqs` alternates a backward pass (control gains given filter gains,
//! dynamic programming on a cost-to-go quadratic in the state and in the
//! estimation error) with a forward pass (filter gains given control gains,
//! minimum-error-covariance update along the propagated loop moments) until
//! the gains stop changing.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostMatrices, NoiseModel, SystemModel, TaskSpec};
use crate::moments::{LoopContext, INNOVATION_RIDGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Human,
    Automation,
}

/// Time-varying feedback gains, one `m x n` matrix per control step.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub actor: Actor,
    pub gains: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    /// All-zero schedule (an inert actor).
    pub fn zeros(actor: Actor, n_steps: usize, m: usize, n: usize) -> Self {
        GainSchedule { actor, gains: vec![DMatrix::zeros(m, n); n_steps] }
    }
}

/// Time-varying filter gains, one `n x r_H` matrix per control step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSchedule {
    pub filters: Vec<DMatrix<f64>>,
}

/// Converged human controller/estimator pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanPolicy {
    pub gains: GainSchedule,
    pub filter: FilterSchedule,
    pub converged: bool,
    /// Max-norm gain change over the last fixed-point sweep.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Fixed-point tolerance on the max-norm gain change per sweep.
    pub tol: f64,
    pub max_iter: usize,
    /// Optional warm start; falls back to the deterministic controller and
    /// the additive-noise filter.
    pub init: Option<(GainSchedule, FilterSchedule)>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-8, max_iter: 500, init: None }
    }
}

/// Finite-horizon discrete-time Riccati recursion for a time-invariant plant.
pub fn solve_lqr_deterministic(
    model: &SystemModel,
    cost: &CostMatrices,
    actor: Actor,
) -> Result<GainSchedule> {
    let b = match actor {
        Actor::Human => &model.b_h,
        Actor::Automation => &model.b_a,
    };
    let gains = riccati_gains(
        std::slice::from_ref(&model.a),
        b,
        &cost.q_running,
        &cost.q_terminal,
        &cost.r,
        model.horizon_steps,
    )?;
    Ok(GainSchedule { actor, gains })
}

/// Backward Riccati sweep. `a_seq` holds either a single matrix (constant
/// dynamics) or one matrix per step, where `a_seq[t]` maps `x_t` to
/// `x_{t+1}`.
pub(crate) fn riccati_gains(
    a_seq: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    q_running: &DMatrix<f64>,
    q_terminal: &DMatrix<f64>,
    r: &DMatrix<f64>,
    n_steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if a_seq.len() != 1 && a_seq.len() != n_steps {
        return Err(Error::DimensionMismatch(format!(
            "dynamics sequence has {} entries for horizon {}",
            a_seq.len(),
            n_steps
        )));
    }
    let m = b.ncols();
    let n = b.nrows();
    let mut s = q_terminal.clone();
    let mut gains = vec![DMatrix::zeros(m, n); n_steps];
    for t in (0..n_steps).rev() {
        let a = if a_seq.len() == 1 { &a_seq[0] } else { &a_seq[t] };
        let g = r + b.transpose() * &s * b;
        let chol = g.clone().cholesky().ok_or(Error::SingularEffortHessian { step: t })?;
        let l = chol.solve(&(b.transpose() * &s * a));
        let mut s_next = q_running + a.transpose() * &s * (a - b * &l);
        symmetrize(&mut s_next);
        s = s_next;
        gains[t] = l;
    }
    Ok(gains)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Control gains given a fixed filter schedule. Cost-to-go is
/// `x' Sx x + e' Se e` with `e` the estimation error; the effort Hessian is
/// inflated by the control-dependent noise term `sum_i C_i' (Sx + Se) C_i`,
/// and the state-dependent observation noise feeds back through the filter
/// as `sum_i D_i' K' Se K D_i`.
fn backward_pass(
    model: &SystemModel,
    noise: &NoiseModel,
    cost: &CostMatrices,
    filters: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let n = model.n();
    let m = model.b_h.ncols();
    let n_steps = model.horizon_steps;
    let a = &model.a;
    let b = &model.b_h;
    let h = &model.h_h;

    let mut sx = cost.q_terminal.clone();
    let mut se = DMatrix::zeros(n, n);
    let mut gains = vec![DMatrix::zeros(m, n); n_steps];

    for t in (0..n_steps).rev() {
        let k = &filters[t];

        let mut g = &cost.r + b.transpose() * &sx * b;
        let sx_plus_se = &sx + &se;
        for c in &noise.c_channels {
            g += c.transpose() * &sx_plus_se * c;
        }
        let chol = g.clone().cholesky().ok_or(Error::SingularEffortHessian { step: t })?;
        let l = chol.solve(&(b.transpose() * &sx * a));

        let a_kh = a - k * h;
        let mut se_next = a.transpose() * &sx * b * &l + a_kh.transpose() * &se * &a_kh;
        let mut sx_next = &cost.q_running + a.transpose() * &sx * (a - b * &l);
        for d in &noise.d_channels {
            let kd = k * d;
            sx_next += kd.transpose() * &se * kd;
        }
        symmetrize(&mut se_next);
        symmetrize(&mut sx_next);
        se = se_next;
        sx = sx_next;
        gains[t] = l;
    }
    Ok(gains)
}

/// Filter gains given fixed control gains: propagate the stacked loop
/// moments forward, choosing each `K_t` to minimize the next-step estimation
/// error covariance. The innovation covariance uses the current estimation
/// error covariance plus both observation noise channels, with a small ridge
/// so the update stays defined when observation noise is zero.
fn forward_filter_pass(
    model: &SystemModel,
    noise: &NoiseModel,
    task: &TaskSpec,
    gains: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let n = model.n();
    let r_h = model.h_h.nrows();
    let n_steps = model.horizon_steps;
    let a = &model.a;
    let h = &model.h_h;

    let ctx = LoopContext::new(model, noise, false)?;
    let (mut mean, mut cov) = ctx.initial_moments(task);
    let mut filters = Vec::with_capacity(n_steps);

    for t in 0..n_steps {
        // e = x - xh has zero mean; its covariance from the stacked blocks.
        let mut sigma_e = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sigma_e[(i, j)] = cov[(i, j)] - cov[(i, n + j)] - cov[(n + i, j)] + cov[(n + i, n + j)];
            }
        }
        let mu_x = mean.rows(0, n).into_owned();
        let m_xx = cov.view((0, 0), (n, n)) + &mu_x * mu_x.transpose();

        let mut s_tot = h * &sigma_e * h.transpose() + &noise.omega_beta;
        for d in &noise.d_channels {
            s_tot += d * &m_xx * d.transpose();
        }
        for i in 0..r_h {
            s_tot[(i, i)] += INNOVATION_RIDGE;
        }
        let s_inv = s_tot
            .clone()
            .cholesky()
            .ok_or(Error::SingularEffortHessian { step: t })?
            .inverse();
        let k = a * &sigma_e * h.transpose() * s_inv;

        let (mean_next, cov_next) = ctx.step_moments(&mean, &cov, &gains[t], &k, None);
        mean = mean_next;
        cov = cov_next;
        filters.push(k);
    }
    Ok(filters)
}

/// Additive-noise-only filter recursion used as the fixed point's starting
/// guess.
fn additive_kalman_init(
    model: &SystemModel,
    noise: &NoiseModel,
    task: &TaskSpec,
) -> Result<Vec<DMatrix<f64>>> {
    let r_h = model.h_h.nrows();
    let a = &model.a;
    let h = &model.h_h;
    let mut sigma_e = task.initial_covariance.clone();
    let mut filters = Vec::with_capacity(model.horizon_steps);
    for t in 0..model.horizon_steps {
        let mut s_tot = h * &sigma_e * h.transpose() + &noise.omega_beta;
        for i in 0..r_h {
            s_tot[(i, i)] += INNOVATION_RIDGE;
        }
        let s_inv = s_tot
            .clone()
            .cholesky()
            .ok_or(Error::SingularEffortHessian { step: t })?
            .inverse();
        let k = a * &sigma_e * h.transpose() * s_inv;
        let mut next = &noise.omega_alpha + (a - &k * h) * &sigma_e * a.transpose();
        symmetrize(&mut next);
        sigma_e = next;
        filters.push(k);
    }
    Ok(filters)
}

fn max_abs_diff(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y.iter()) {
            worst = worst.max((u - v).abs());
        }
    }
    worst
}

fn blend(into: &mut [DMatrix<f64>], from: Vec<DMatrix<f64>>) {
    for (x, y) in into.iter_mut().zip(from) {
        *x = (&*x + y) * 0.5;
    }
}

/// Solves the coupled controller/estimator fixed point for the human actor.
///
/// Returns the best iterate with `converged = false` instead of erroring when
/// the sweep residual does not fall below `opts.tol` within `opts.max_iter`
/// sweeps. Oscillating residuals trigger damped (averaged) gain updates.
pub fn solve_lqs(
    model: &SystemModel,
    noise: &NoiseModel,
    cost: &CostMatrices,
    task: &TaskSpec,
    opts: &SolveOptions,
) -> Result<HumanPolicy> {
    let n = model.n();
    if cost.q_terminal.nrows() != n || cost.q_running.nrows() != n {
        return Err(Error::DimensionMismatch("cost matrices do not match the plant".into()));
    }

    let (mut l, mut k) = match &opts.init {
        Some((gains, filter)) => (gains.gains.clone(), filter.filters.clone()),
        None => (
            solve_lqr_deterministic(model, cost, Actor::Human)?.gains,
            additive_kalman_init(model, noise, task)?,
        ),
    };
    if l.len() != model.horizon_steps || k.len() != model.horizon_steps {
        return Err(Error::DimensionMismatch("warm start has the wrong horizon".into()));
    }

    let mut prev_resid = f64::INFINITY;
    let mut resid = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let l_cand = backward_pass(model, noise, cost, &k)?;
        let k_cand = forward_filter_pass(model, noise, task, &l_cand)?;
        resid = max_abs_diff(&l_cand, &l).max(max_abs_diff(&k_cand, &k));
        if !resid.is_finite() {
            return Err(Error::NonFinite(format!("fixed-point residual at sweep {it}")));
        }
        if resid > prev_resid {
            // Oscillation: average the candidates with the previous iterate.
            blend(&mut l, l_cand);
            blend(&mut k, k_cand);
        } else {
            l = l_cand;
            k = k_cand;
        }
        if resid < opts.tol {
            converged = true;
            break;
        }
        prev_resid = resid;
    }

    Ok(HumanPolicy {
        gains: GainSchedule { actor: Actor::Human, gains: l },
        filter: FilterSchedule { filters: k },
        converged,
        residual: resid,
        iterations,
    })
}

// -- serialization ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    actor: Actor,
    #[serde(rename = "N")]
    n_steps: usize,
    m: usize,
    n: usize,
    /// Row-major `m*n` values per step.
    gains: Vec<Vec<f64>>,
    /// Row-major `n*r` values per step; absent for open-loop actors.
    filter: Option<Vec<Vec<f64>>>,
    converged: bool,
    residual: f64,
}

fn flatten(mats: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    mats.iter()
        .map(|m| {
            let mut row = Vec::with_capacity(m.len());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    row.push(m[(i, j)]);
                }
            }
            row
        })
        .collect()
}

fn unflatten(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<Vec<DMatrix<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(t, row)| {
            if row.len() != nrows * ncols {
                return Err(Error::DimensionMismatch(format!(
                    "gain entry {t} has {} values, expected {}",
                    row.len(),
                    nrows * ncols
                )));
            }
            Ok(DMatrix::from_row_slice(nrows, ncols, row))
        })
        .collect()
}

impl HumanPolicy {
    pub fn to_json(&self) -> Result<String> {
        let m = self.gains.gains.first().map_or(0, |g| g.nrows());
        let n = self.gains.gains.first().map_or(0, |g| g.ncols());
        let file = PolicyFile {
            actor: self.gains.actor,
            n_steps: self.gains.gains.len(),
            m,
            n,
            gains: flatten(&self.gains.gains),
            filter: Some(flatten(&self.filter.filters)),
            converged: self.converged,
            residual: self.residual,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text)?;
        if file.gains.len() != file.n_steps {
            return Err(Error::DimensionMismatch(format!(
                "policy file declares N={} but carries {} gains",
                file.n_steps,
                file.gains.len()
            )));
        }
        let gains = unflatten(&file.gains, file.m, file.n)?;
        let filter_rows = file
            .filter
            .ok_or_else(|| Error::DimensionMismatch("human policy file lacks filter gains".into()))?;
        if filter_rows.len() != file.n_steps {
            return Err(Error::DimensionMismatch(format!(
                "policy file declares N={} but carries {} filter gains",
                file.n_steps,
                filter_rows.len()
            )));
        }
        let r = if file.n == 0 {
            0
        } else {
            filter_rows.first().map_or(0, |row| row.len() / file.n)
        };
        let filters = unflatten(&filter_rows, file.n, r)?;
        Ok(HumanPolicy {
            gains: GainSchedule { actor: file.actor, gains },
            filter: FilterSchedule { filters },
            converged: file.converged,
            residual: file.residual,
            iterations: 0,
        })
    }
}
