//! Monte-Carlo rollouts of the closed loop and summary metrics.
//!
//! Every trial draws from its own counter-derived substream, so an ensemble
//! is bit-identical for a given seed regardless of how many threads run the
//! trials. Within a step the draw order is fixed (process noise, observation
//! noise, control-channel scalars, observation-channel scalars) and does not
//! depend on the noise magnitudes, so two ensembles with different sigma but
//! the same seed consume identical normal variates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostMatrices, TaskSpec};
use crate::moments::{ClosedLoopSpec, LoopContext, LoopState, MomentTrajectory, StepNoise};

/// One simulated trial. Flat step-major storage keeps large ensembles cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub r_h: usize,
    /// `(N+1) * n` plant states.
    pub states: Vec<f64>,
    /// `N` human commands (scalar actuation).
    pub u_h: Vec<f64>,
    /// `N` automation commands; zero when no automation is active.
    pub u_a: Vec<f64>,
    /// `N * r_h` human observations.
    pub y_h: Vec<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.u_h.len()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.n..(t + 1) * self.n]
    }
}

/// A batch of trials from one closed-loop condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub dt_s: f64,
    pub seed: u64,
    /// Fingerprints of the generating model and policies, for provenance.
    pub model_hash: String,
    pub policy_hash: String,
    pub trials: Vec<Trajectory>,
}

impl TrajectoryEnsemble {
    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }
}

/// Summary statistics of one condition, computed from moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub peak_position_variance_m2: f64,
    /// First time after which the mean stays inside the reach band; absent
    /// when the mean ends outside the band.
    pub time_to_reach_s: Option<f64>,
    pub endpoint_variance_m2: f64,
    pub endpoint_bias_m: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-trial substream seed. Part of the output contract: changing
/// this mixing would silently change every seeded ensemble.
pub fn trial_seed(seed: u64, trial_index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(trial_index))
}

/// Entrywise square root of a PSD matrix via its symmetric eigensystem;
/// tiny negative eigenvalues are clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

struct SampledNoise {
    sqrt_alpha: DMatrix<f64>,
    sqrt_beta: DMatrix<f64>,
    sqrt_init: DMatrix<f64>,
    n_c: usize,
    n_d: usize,
}

fn draw_scaled(rng: &mut ChaCha8Rng, dim: usize, scale: &DMatrix<f64>) -> DVector<f64> {
    let raw = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    scale * raw
}

fn rollout_one(
    ctx: &LoopContext<'_>,
    spec: &ClosedLoopSpec<'_>,
    sampled: &SampledNoise,
    trial: usize,
    seed: u64,
) -> Result<Trajectory> {
    let model = spec.model;
    let n = model.n();
    let r_h = model.h_h.nrows();
    let n_steps = model.horizon_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, trial as u64));

    let x0 = if spec.task.initial_covariance.iter().all(|&v| v == 0.0) {
        spec.task.initial_state.clone()
    } else {
        &spec.task.initial_state + draw_scaled(&mut rng, n, &sampled.sqrt_init)
    };
    let xh0 = spec.task.initial_state.clone();
    let xa0 = ctx.observed.as_ref().map(|observed| {
        let mut xa = spec.task.initial_state.clone();
        for &j in observed {
            xa[j] = x0[j];
        }
        xa
    });

    let mut state = LoopState { x: x0, xh: xh0, xa: xa0 };
    let mut traj = Trajectory {
        n,
        r_h,
        states: Vec::with_capacity((n_steps + 1) * n),
        u_h: Vec::with_capacity(n_steps),
        u_a: Vec::with_capacity(n_steps),
        y_h: Vec::with_capacity(n_steps * r_h),
    };
    traj.states.extend(state.x.iter());

    for t in 0..n_steps {
        let alpha = draw_scaled(&mut rng, n, &sampled.sqrt_alpha);
        let beta = draw_scaled(&mut rng, r_h, &sampled.sqrt_beta);
        let eps_c: Vec<f64> =
            (0..sampled.n_c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let eps_d: Vec<f64> =
            (0..sampled.n_d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let auto = spec.automation.map(|a| (&a.gains.gains[t], &a.filter.filters[t]));
        let out = ctx.step_state(
            &state,
            &spec.human.gains.gains[t],
            &spec.human.filter.filters[t],
            auto,
            StepNoise {
                alpha: Some(&alpha),
                eps_c: Some(&eps_c),
                beta: Some(&beta),
                eps_d: Some(&eps_d),
            },
        );
        if out.next.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrialDiverged { trial, step: t + 1 });
        }
        traj.u_h.push(out.u_h[0]);
        traj.u_a.push(out.u_a[0]);
        traj.y_h.extend(out.y_h.iter());
        traj.states.extend(out.next.x.iter());
        state = out.next;
    }
    Ok(traj)
}

fn hash_f64s<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    // FNV-1a over the IEEE bit patterns; provenance fingerprint only.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Simulates `n_trials` independent rollouts of the condition.
pub fn simulate_ensemble(
    spec: &ClosedLoopSpec<'_>,
    n_trials: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if n_trials == 0 {
        return Err(Error::Ensemble("n_trials must be at least 1".into()));
    }
    // Reuse the moment validator: same dimension rules apply.
    crate::moments::validate_spec(spec)?;
    let ctx = LoopContext::new(spec.model, spec.noise, spec.automation.is_some())?;

    let sampled = SampledNoise {
        sqrt_alpha: psd_sqrt(&spec.noise.omega_alpha),
        sqrt_beta: psd_sqrt(&spec.noise.omega_beta),
        sqrt_init: psd_sqrt(&spec.task.initial_covariance),
        n_c: spec.noise.c_channels.len(),
        n_d: spec.noise.d_channels.len(),
    };

    let trials: Result<Vec<Trajectory>> = (0..n_trials)
        .into_par_iter()
        .map(|trial| rollout_one(&ctx, spec, &sampled, trial, seed))
        .collect();

    let model_hash = hash_f64s(
        spec.model
            .a
            .iter()
            .chain(spec.model.b_h.iter())
            .chain(spec.model.b_a.iter())
            .chain(spec.noise.omega_alpha.iter())
            .chain(spec.noise.omega_beta.iter()),
    );
    let policy_hash = hash_f64s(
        spec.human
            .gains
            .gains
            .iter()
            .flat_map(|g| g.iter())
            .chain(spec.human.filter.filters.iter().flat_map(|k| k.iter()))
            .chain(spec.automation.iter().flat_map(|a| {
                a.gains
                    .gains
                    .iter()
                    .flat_map(|g| g.iter())
                    .chain(a.filter.filters.iter().flat_map(|k| k.iter()))
            })),
    );

    Ok(TrajectoryEnsemble {
        dt_s: spec.model.dt_s,
        seed,
        model_hash,
        policy_hash,
        trials: trials?,
    })
}

/// Per-step sample mean and unbiased sample covariance of the plant state.
pub fn empirical_moments(ensemble: &TrajectoryEnsemble) -> Result<MomentTrajectory> {
    let m = ensemble.n_trials();
    if m < 2 {
        return Err(Error::Ensemble(format!(
            "need at least 2 trials for sample covariance, got {m}"
        )));
    }
    let first = &ensemble.trials[0];
    let n = first.n;
    let n_steps = first.n_steps();
    if ensemble
        .trials
        .iter()
        .any(|t| t.n != n || t.n_steps() != n_steps)
    {
        return Err(Error::Ensemble("trials have inconsistent shapes".into()));
    }

    let mut means = Vec::with_capacity(n_steps + 1);
    let mut covs = Vec::with_capacity(n_steps + 1);
    for t in 0..=n_steps {
        let mut mean = DVector::zeros(n);
        for trial in &ensemble.trials {
            for (i, &v) in trial.state(t).iter().enumerate() {
                mean[i] += v;
            }
        }
        mean /= m as f64;

        let mut cov = DMatrix::zeros(n, n);
        for trial in &ensemble.trials {
            let s = trial.state(t);
            for i in 0..n {
                let di = s[i] - mean[i];
                for j in i..n {
                    cov[(i, j)] += di * (s[j] - mean[j]);
                }
            }
        }
        cov /= (m - 1) as f64;
        for i in 0..n {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        means.push(mean);
        covs.push(cov);
    }

    Ok(MomentTrajectory {
        dt_s: ensemble.dt_s,
        state_dim: n,
        aug_dim: n,
        means,
        covariances: covs,
    })
}

/// Realized quadratic cost of one trial (running state + effort, terminal
/// state). Used to cross-check the analytic expected cost.
pub fn realized_cost(traj: &Trajectory, cost: &CostMatrices) -> f64 {
    let n = traj.n;
    let quad = |q: &DMatrix<f64>, s: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += s[i] * q[(i, j)] * s[j];
            }
        }
        acc
    };
    let mut total = 0.0;
    for t in 0..traj.n_steps() {
        total += quad(&cost.q_running, traj.state(t));
        total += cost.r[(0, 0)] * traj.u_h[t] * traj.u_h[t];
    }
    total + quad(&cost.q_terminal, traj.state(traj.n_steps()))
}

/// Reach metrics from a moment trajectory. Time to reach uses the sustained
/// criterion: the earliest time after which the mean never leaves the band
/// `|mean_p - p_ref| <= reach_tol`.
pub fn compute_metrics(moments: &MomentTrajectory, task: &TaskSpec) -> TaskMetrics {
    let last = moments.len() - 1;
    let mut entry = None;
    for t in (0..=last).rev() {
        if (moments.mean_p(t) - task.p_ref_m).abs() <= task.reach_tol_m {
            entry = Some(t);
        } else {
            break;
        }
    }
    TaskMetrics {
        peak_position_variance_m2: moments.peak_var_p(),
        time_to_reach_s: entry.map(|t| t as f64 * moments.dt_s),
        endpoint_variance_m2: moments.var_p(last),
        endpoint_bias_m: moments.mean_p(last) - task.p_ref_m,
    }
}

impl TaskMetrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
