//! Exact first and second moments of the closed loop.
//!
//! The loop state is stacked as `z = [x; xh]` (human only) or
//! `z = [x; xh; xa]` (with automation), where `xh` is the human's internal
//! state estimate and `xa` the automation's. Both the mean and the central
//! covariance propagate in closed form: the mean through the noise-free loop,
//! the covariance through the loop transition plus noise terms whose size
//! depends on the current second moments (control-dependent process noise
//! scales with `E[u u']`, state-dependent observation noise with `E[x x']`).
//!
//! The human estimator is a fixed-gain filter `xh' = A xh + B_H u_H +
//! K (y_H - H_H xh)` that does not model the automation input. The
//! automation estimator predicts with the expected human policy and its own
//! command, then corrects with innovation gains on the exact measurement
//! `y_A = H_A x`: `xa' = pred + K_A (H_A x' - H_A pred)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{CostMatrices, NoiseModel, SystemModel, TaskSpec};
use crate::solver::{FilterSchedule, GainSchedule, HumanPolicy};

/// Ridge added to the innovation covariance so filter gains stay finite when
/// the observation noise vanishes.
pub(crate) const INNOVATION_RIDGE: f64 = 1e-12;

const SYMMETRY_WARN_TOL: f64 = 1e-9;

/// One closed-loop condition: plant, noise, task, human policy, and
/// optionally the automation's feedback gains plus observer.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoopSpec<'a> {
    pub model: &'a SystemModel,
    pub noise: &'a NoiseModel,
    pub task: &'a TaskSpec,
    pub human: &'a HumanPolicy,
    pub automation: Option<AutomationLoop<'a>>,
}

/// Automation side of the loop: feedback gains and the observer's innovation
/// gains, both per step.
#[derive(Debug, Clone, Copy)]
pub struct AutomationLoop<'a> {
    pub gains: &'a GainSchedule,
    pub filter: &'a FilterSchedule,
}

/// Per-step mean and central covariance of the stacked loop state, plus the
/// extracted position and velocity series used by metrics and file output.
/// Also produced from trial ensembles, in which case the vectors cover the
/// plant state only (`aug_dim == state_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrajectory {
    pub dt_s: f64,
    pub state_dim: usize,
    pub aug_dim: usize,
    /// N+1 means, one per time index.
    pub means: Vec<DVector<f64>>,
    /// N+1 central covariances.
    pub covariances: Vec<DMatrix<f64>>,
}

impl MomentTrajectory {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean_p(&self, t: usize) -> f64 {
        self.means[t][0]
    }

    pub fn var_p(&self, t: usize) -> f64 {
        self.covariances[t][(0, 0)]
    }

    pub fn mean_v(&self, t: usize) -> f64 {
        self.means[t][1]
    }

    pub fn var_v(&self, t: usize) -> f64 {
        self.covariances[t][(1, 1)]
    }

    pub fn peak_var_p(&self) -> f64 {
        (0..self.len()).map(|t| self.var_p(t)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Realized noise for one step. `None` components are zero, which makes the
/// same step usable for both sampled rollouts and mean propagation.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StepNoise<'a> {
    /// Realized additive process noise `Sigma_alpha * alpha` (dim n).
    pub alpha: Option<&'a DVector<f64>>,
    /// Scalar draws for the control-dependent channels.
    pub eps_c: Option<&'a [f64]>,
    /// Realized additive observation noise `Sigma_beta * beta` (dim r_H).
    pub beta: Option<&'a DVector<f64>>,
    /// Scalar draws for the state-dependent observation channels.
    pub eps_d: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub(crate) struct LoopState {
    pub x: DVector<f64>,
    pub xh: DVector<f64>,
    pub xa: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct StepOutput {
    pub next: LoopState,
    pub u_h: DVector<f64>,
    pub u_a: DVector<f64>,
    pub y_h: DVector<f64>,
}

/// Precomputed pieces of the loop shared by moment propagation, the solver's
/// filter pass, and the simulator.
pub(crate) struct LoopContext<'a> {
    pub model: &'a SystemModel,
    pub noise: &'a NoiseModel,
    /// For each automation observation row, the plant component it reads.
    pub observed: Option<Vec<usize>>,
}

impl<'a> LoopContext<'a> {
    pub fn new(model: &'a SystemModel, noise: &'a NoiseModel, with_automation: bool) -> Result<Self> {
        let observed = if with_automation {
            Some(selector_columns(&model.h_a)?)
        } else {
            None
        };
        Ok(LoopContext { model, noise, observed })
    }

    pub fn aug_dim(&self) -> usize {
        let n = self.model.n();
        if self.observed.is_some() {
            3 * n
        } else {
            2 * n
        }
    }

    /// Advances one realized (or mean) loop state. `auto` carries the step's
    /// automation feedback and innovation gains, `Some` iff the context was
    /// built with automation.
    pub fn step_state(
        &self,
        state: &LoopState,
        l_h: &DMatrix<f64>,
        k_h: &DMatrix<f64>,
        auto: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
        draw: StepNoise<'_>,
    ) -> StepOutput {
        let model = self.model;
        let u_h = -(l_h * &state.xh);

        let mut x_next = &model.a * &state.x + &model.b_h * &u_h;
        let u_a = match (auto, state.xa.as_ref()) {
            (Some((l_a, _)), Some(xa)) => {
                let u_a = -(l_a * xa);
                x_next += &model.b_a * &u_a;
                u_a
            }
            _ => DVector::zeros(model.b_a.ncols()),
        };
        if let Some(alpha) = draw.alpha {
            x_next += alpha;
        }
        if let Some(eps) = draw.eps_c {
            for (c, &e) in self.noise.c_channels.iter().zip(eps) {
                x_next += c * &u_h * e;
            }
        }

        let mut y_h = &model.h_h * &state.x;
        if let Some(beta) = draw.beta {
            y_h += beta;
        }
        if let Some(eps) = draw.eps_d {
            for (d, &e) in self.noise.d_channels.iter().zip(eps) {
                y_h += d * &state.x * e;
            }
        }

        let innovation = &y_h - &model.h_h * &state.xh;
        let xh_next = &model.a * &state.xh + &model.b_h * &u_h + k_h * innovation;

        let xa_next = state.xa.as_ref().map(|xa| {
            // Predict with the expected human policy and own command, then
            // correct with the innovation against the exact measurement.
            let (_, k_a) = auto.expect("automation context");
            let pred = &model.a * xa + &model.b_h * (-(l_h * xa)) + &model.b_a * &u_a;
            let innovation = &model.h_a * (&x_next - &pred);
            pred + k_a * innovation
        });

        StepOutput {
            next: LoopState { x: x_next, xh: xh_next, xa: xa_next },
            u_h,
            u_a,
            y_h,
        }
    }

    /// Loop transition matrix for the stacked state at one step.
    pub fn transition(
        &self,
        l_h: &DMatrix<f64>,
        k_h: &DMatrix<f64>,
        auto: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    ) -> DMatrix<f64> {
        let model = self.model;
        let n = model.n();
        let aug = self.aug_dim();
        let bl_h = &model.b_h * l_h;
        let kh = k_h * &model.h_h;
        let a_cl_h = &model.a - &bl_h - &kh;

        let mut phi = DMatrix::zeros(aug, aug);
        phi.view_mut((0, 0), (n, n)).copy_from(&model.a);
        phi.view_mut((0, n), (n, n)).copy_from(&(-&bl_h));
        phi.view_mut((n, 0), (n, n)).copy_from(&kh);
        phi.view_mut((n, n), (n, n)).copy_from(&a_cl_h);

        if let Some((l_a, k_a)) = auto {
            let bl_a = &model.b_a * l_a;
            phi.view_mut((0, 2 * n), (n, n)).copy_from(&(-&bl_a));

            // xa' = (I - G) (A - B_H L_H - B_A L_A) xa + G x' with G = K_A H_A,
            // expanded over x' = A x - B_H L_H xh - B_A L_A xa + w.
            let g = k_a * &model.h_a;
            let a_pred = &model.a - &bl_h - &bl_a;
            phi.view_mut((2 * n, 0), (n, n)).copy_from(&(&g * &model.a));
            phi.view_mut((2 * n, n), (n, n)).copy_from(&(-(&g * &bl_h)));
            let own = (DMatrix::identity(n, n) - &g) * &a_pred - &g * &bl_a;
            phi.view_mut((2 * n, 2 * n), (n, n)).copy_from(&own);
        }
        phi
    }

    /// Central covariance contribution of one step's noise, given the current
    /// stacked mean and covariance.
    pub fn noise_covariance(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        l_h: &DMatrix<f64>,
        k_h: &DMatrix<f64>,
        k_a: Option<&DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let model = self.model;
        let noise = self.noise;
        let n = model.n();
        let aug = self.aug_dim();

        // Second moments of the signals the multiplicative channels scale.
        let mu_x = mean.rows(0, n).into_owned();
        let mu_h = mean.rows(n, n).into_owned();
        let m_xx = cov.view((0, 0), (n, n)) + &mu_x * mu_x.transpose();
        let m_hh = cov.view((n, n), (n, n)) + &mu_h * mu_h.transpose();

        let u2 = l_h * m_hh * l_h.transpose();
        let mut w_proc = noise.omega_alpha.clone();
        for c in &noise.c_channels {
            w_proc += c * &u2 * c.transpose();
        }
        let mut v_obs = noise.omega_beta.clone();
        for d in &noise.d_channels {
            v_obs += d * &m_xx * d.transpose();
        }

        let mut out = DMatrix::zeros(aug, aug);
        out.view_mut((0, 0), (n, n)).copy_from(&w_proc);
        out.view_mut((n, n), (n, n)).copy_from(&(k_h * v_obs * k_h.transpose()));

        if let Some(k_a) = k_a {
            // The automation sees the realized process noise through its
            // innovation, correlating its estimate with the plant block.
            let g = k_a * &self.model.h_a;
            let gw = &g * &w_proc;
            out.view_mut((2 * n, 0), (n, n)).copy_from(&gw);
            out.view_mut((0, 2 * n), (n, n)).copy_from(&gw.transpose());
            out.view_mut((2 * n, 2 * n), (n, n)).copy_from(&(&gw * g.transpose()));
        }
        out
    }

    /// Advances the stacked mean and central covariance by one step.
    pub fn step_moments(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        l_h: &DMatrix<f64>,
        k_h: &DMatrix<f64>,
        auto: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.model.n();
        let state = LoopState {
            x: mean.rows(0, n).into_owned(),
            xh: mean.rows(n, n).into_owned(),
            xa: self.observed.as_ref().map(|_| mean.rows(2 * n, n).into_owned()),
        };
        let out = self.step_state(&state, l_h, k_h, auto, StepNoise::default());
        let mut mean_next = DVector::zeros(self.aug_dim());
        mean_next.rows_mut(0, n).copy_from(&out.next.x);
        mean_next.rows_mut(n, n).copy_from(&out.next.xh);
        if let Some(xa) = out.next.xa.as_ref() {
            mean_next.rows_mut(2 * n, n).copy_from(xa);
        }

        let phi = self.transition(l_h, k_h, auto);
        let k_a = auto.map(|(_, k)| k);
        let mut cov_next =
            &phi * cov * phi.transpose() + self.noise_covariance(mean, cov, l_h, k_h, k_a);
        resymmetrize(&mut cov_next);
        (mean_next, cov_next)
    }

    /// Initial stacked mean and covariance from the task's initial state
    /// distribution. Both estimators start at the initial mean; the
    /// automation additionally reads its measured components exactly.
    pub fn initial_moments(&self, task: &TaskSpec) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.model.n();
        let aug = self.aug_dim();
        let mut mean = DVector::zeros(aug);
        mean.rows_mut(0, n).copy_from(&task.initial_state);
        mean.rows_mut(n, n).copy_from(&task.initial_state);
        let mut cov = DMatrix::zeros(aug, aug);
        cov.view_mut((0, 0), (n, n)).copy_from(&task.initial_covariance);
        if let Some(observed) = self.observed.as_ref() {
            mean.rows_mut(2 * n, n).copy_from(&task.initial_state);
            // xa_0 = (I-P) mean + P x_0.
            for &i in observed {
                for j in 0..n {
                    cov[(2 * n + i, j)] = task.initial_covariance[(i, j)];
                    cov[(j, 2 * n + i)] = task.initial_covariance[(j, i)];
                }
                for &j in observed {
                    cov[(2 * n + i, 2 * n + j)] = task.initial_covariance[(i, j)];
                }
            }
        }
        (mean, cov)
    }
}

fn resymmetrize(cov: &mut DMatrix<f64>) {
    let mut worst: f64 = 0.0;
    let n = cov.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((cov[(i, j)] - cov[(j, i)]).abs());
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    let scale = cov.iter().fold(0.0f64, |acc, &v| acc.max(v.abs())).max(1.0);
    if worst > SYMMETRY_WARN_TOL * scale {
        log::warn!("covariance drifted from symmetry by {worst:.3e}; re-symmetrized");
    }
}

/// Extracts a plant-row selector's column indices; errors when a row is not a
/// standard basis vector (the automation estimate is initialized by reading
/// the measured components exactly).
fn selector_columns(h: &DMatrix<f64>) -> Result<Vec<usize>> {
    let mut cols = Vec::with_capacity(h.nrows());
    for i in 0..h.nrows() {
        let mut hit = None;
        for j in 0..h.ncols() {
            let v = h[(i, j)];
            if v == 1.0 && hit.is_none() {
                hit = Some(j);
            } else if v != 0.0 {
                return Err(Error::DimensionMismatch(format!(
                    "automation observation row {i} is not a component selector"
                )));
            }
        }
        cols.push(hit.ok_or_else(|| {
            Error::DimensionMismatch(format!("automation observation row {i} is all zero"))
        })?);
    }
    Ok(cols)
}

pub(crate) fn validate_spec(spec: &ClosedLoopSpec<'_>) -> Result<()> {
    let n = spec.model.n();
    let n_steps = spec.model.horizon_steps;
    let human = spec.human;
    if human.gains.gains.len() != n_steps || human.filter.filters.len() != n_steps {
        return Err(Error::DimensionMismatch(format!(
            "human policy has {} gains / {} filters for horizon {}",
            human.gains.gains.len(),
            human.filter.filters.len(),
            n_steps
        )));
    }
    for l in &human.gains.gains {
        if l.ncols() != n || l.nrows() != spec.model.b_h.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "human gain is {}x{}, expected {}x{}",
                l.nrows(),
                l.ncols(),
                spec.model.b_h.ncols(),
                n
            )));
        }
    }
    for k in &human.filter.filters {
        if k.nrows() != n || k.ncols() != spec.model.h_h.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "human filter gain is {}x{}, expected {}x{}",
                k.nrows(),
                k.ncols(),
                n,
                spec.model.h_h.nrows()
            )));
        }
    }
    if let Some(auto) = spec.automation {
        if auto.gains.gains.len() != n_steps || auto.filter.filters.len() != n_steps {
            return Err(Error::DimensionMismatch(format!(
                "automation has {} gains / {} filters for horizon {}",
                auto.gains.gains.len(),
                auto.filter.filters.len(),
                n_steps
            )));
        }
        for l in &auto.gains.gains {
            if l.ncols() != n || l.nrows() != spec.model.b_a.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "automation gain is {}x{}, expected {}x{}",
                    l.nrows(),
                    l.ncols(),
                    spec.model.b_a.ncols(),
                    n
                )));
            }
        }
        for k in &auto.filter.filters {
            if k.nrows() != n || k.ncols() != spec.model.h_a.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "automation filter gain is {}x{}, expected {}x{}",
                    k.nrows(),
                    k.ncols(),
                    n,
                    spec.model.h_a.nrows()
                )));
            }
        }
    }
    if spec.task.initial_state.len() != n
        || spec.task.initial_covariance.nrows() != n
        || spec.task.initial_covariance.ncols() != n
    {
        return Err(Error::DimensionMismatch(
            "task initial state/covariance does not match the plant dimension".into(),
        ));
    }
    Ok(())
}

/// Propagates the exact stacked-state moments over the full horizon.
pub fn propagate_moments(spec: &ClosedLoopSpec<'_>) -> Result<MomentTrajectory> {
    validate_spec(spec)?;
    let ctx = LoopContext::new(spec.model, spec.noise, spec.automation.is_some())?;
    let n_steps = spec.model.horizon_steps;

    let (mut mean, mut cov) = ctx.initial_moments(spec.task);
    let mut means = Vec::with_capacity(n_steps + 1);
    let mut covs = Vec::with_capacity(n_steps + 1);
    means.push(mean.clone());
    covs.push(cov.clone());

    for t in 0..n_steps {
        let auto = spec.automation.map(|a| (&a.gains.gains[t], &a.filter.filters[t]));
        let (mean_next, cov_next) = ctx.step_moments(
            &mean,
            &cov,
            &spec.human.gains.gains[t],
            &spec.human.filter.filters[t],
            auto,
        );
        if mean_next.iter().any(|v| !v.is_finite()) || cov_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("moment propagation at step {}", t + 1)));
        }
        mean = mean_next;
        cov = cov_next;
        means.push(mean.clone());
        covs.push(cov.clone());
    }

    Ok(MomentTrajectory {
        dt_s: spec.model.dt_s,
        state_dim: spec.model.n(),
        aug_dim: ctx.aug_dim(),
        means,
        covariances: covs,
    })
}

/// Expected quadratic cost of the human actor under the closed loop:
/// running state and effort terms over `0..N` plus the terminal state term.
pub fn expected_cost(spec: &ClosedLoopSpec<'_>, cost: &CostMatrices) -> Result<f64> {
    let moments = propagate_moments(spec)?;
    Ok(expected_cost_from_moments(spec, cost, &moments))
}

/// Same as [`expected_cost`] but reuses an already propagated trajectory.
pub fn expected_cost_from_moments(
    spec: &ClosedLoopSpec<'_>,
    cost: &CostMatrices,
    moments: &MomentTrajectory,
) -> f64 {
    let n = spec.model.n();
    let n_steps = spec.model.horizon_steps;
    let second_moment = |t: usize, offset: usize| -> DMatrix<f64> {
        let mu = moments.means[t].rows(offset, n).into_owned();
        moments.covariances[t].view((offset, offset), (n, n)) + &mu * mu.transpose()
    };

    let mut total = 0.0;
    for t in 0..n_steps {
        let m_xx = second_moment(t, 0);
        total += (&cost.q_running * m_xx).trace();
        let m_hh = second_moment(t, n);
        let l = &spec.human.gains.gains[t];
        let u2 = l * m_hh * l.transpose();
        total += (&cost.r * u2).trace();
    }
    total += (&cost.q_terminal * second_moment(n_steps, 0)).trace();
    total
}
