//! Discrete-time model of a one-dimensional reaching task shared by a human
//! and an assistive automation.
//!
//! The state is `x = [p, v, f, g, p_ref]`:
//! position (m), velocity (m/s), muscle force (N), muscle activation (N), and
//! the constant target position (m). A point mass with viscous damping is
//! driven through a second-order muscle filter; the human command `u_H` feeds
//! the activation stage, the automation command `u_A` adds force directly.
//! Forward-Euler discretization with step `dt`:
//!
//! ```text
//! p'     = p + dt * v
//! v'     = (1 - dt*d/m) * v + (dt/m) * f
//! f'     = (1 - dt/tau2) * f + (dt/tau2) * g + u_A
//! g'     = (1 - dt/tau1) * g + (dt/tau1) * u_H
//! p_ref' = p_ref
//! ```
//!
//! Noise enters three ways: additive process noise on the first four states,
//! control-dependent process noise on the human channel, and additive plus
//! state-dependent noise on the human's observation `y_H = H_H x`. The
//! automation observes `y_A = H_A x` without noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State vector indices.
pub const IX_P: usize = 0;
pub const IX_V: usize = 1;
pub const IX_F: usize = 2;
pub const IX_G: usize = 3;
pub const IX_REF: usize = 4;

/// State dimension.
pub const NX: usize = 5;
/// Human observation dimension (p, v, f).
pub const NY_H: usize = 3;
/// Automation observation dimension (p, v).
pub const NY_A: usize = 2;
/// Number of scalar noise magnitudes.
pub const N_SIGMA: usize = 9;

/// Continuous-time plant constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PhysicalParams {
    pub mass_kg: f64,
    pub damping_kg_per_s: f64,
    /// Activation stage time constant (s).
    pub tau1_s: f64,
    /// Force stage time constant (s).
    pub tau2_s: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Discretization {
    pub dt_s: f64,
    /// Number of control steps N; the trajectory holds N+1 states.
    pub horizon_steps: usize,
}

/// Discrete-time system matrices for the shared plant.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b_h: DMatrix<f64>,
    pub b_a: DMatrix<f64>,
    pub h_h: DMatrix<f64>,
    pub h_a: DMatrix<f64>,
    pub dt_s: f64,
    pub horizon_steps: usize,
}

impl SystemModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

/// The nine noise magnitudes. Layout:
/// `sigma[0..4]` additive process noise on p, v, f, g;
/// `sigma[4..7]` additive observation noise on p, v, f;
/// `sigma[7]` control-dependent process noise scale;
/// `sigma[8]` state-dependent observation noise scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NoiseParams {
    pub sigma: [f64; N_SIGMA],
}

impl NoiseParams {
    pub fn zero() -> Self {
        NoiseParams { sigma: [0.0; N_SIGMA] }
    }
}

/// Noise channel matrices derived from [`NoiseParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Additive process noise covariance (n x n).
    pub omega_alpha: DMatrix<f64>,
    /// Additive observation noise covariance (r_H x r_H).
    pub omega_beta: DMatrix<f64>,
    /// Control-dependent process noise channels (n x m_H each).
    pub c_channels: Vec<DMatrix<f64>>,
    /// State-dependent observation noise channels (r_H x n each).
    pub d_channels: Vec<DMatrix<f64>>,
}

impl NoiseModel {
    /// True when every channel is identically zero.
    pub fn is_zero(&self) -> bool {
        let z = |m: &DMatrix<f64>| m.iter().all(|&v| v == 0.0);
        z(&self.omega_alpha)
            && z(&self.omega_beta)
            && self.c_channels.iter().all(z)
            && self.d_channels.iter().all(z)
    }
}

/// Diagonal cost weights in tracking-error coordinates plus the scalar
/// effort weight. `s_*[0]` weighs the squared tracking error `(p - p_ref)^2`;
/// the remaining entries weigh the squared raw states v, f, g, p_ref.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CostParams {
    pub s_terminal: [f64; NX],
    pub s_running: [f64; NX],
    pub r_effort: f64,
}

/// Quadratic cost matrices `x' Q x` and `u' R u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    pub q_terminal: DMatrix<f64>,
    pub q_running: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Reach geometry and initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub p_start_m: f64,
    pub p_ref_m: f64,
    pub initial_state: DVector<f64>,
    pub initial_covariance: DMatrix<f64>,
    /// Band half-width used by the time-to-reach metric (m).
    pub reach_tol_m: f64,
}

impl TaskSpec {
    /// Start at rest at `p_start` with an exactly known initial state.
    pub fn reach(p_start_m: f64, p_ref_m: f64) -> Self {
        let mut x0 = DVector::zeros(NX);
        x0[IX_P] = p_start_m;
        x0[IX_REF] = p_ref_m;
        TaskSpec {
            p_start_m,
            p_ref_m,
            initial_state: x0,
            initial_covariance: DMatrix::zeros(NX, NX),
            reach_tol_m: 0.01,
        }
    }
}

fn require(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(what.to_string()))
    }
}

/// Builds the discrete-time reaching plant.
///
/// Rejects parameter sets that violate the forward-Euler stability
/// inequalities `dt_s * damping_kg_per_s / mass_kg < 1`, `dt_s / tau1_s < 1`,
/// and `dt_s / tau2_s < 1`.
pub fn build_reaching_system(phys: &PhysicalParams, disc: &Discretization) -> Result<SystemModel> {
    require(phys.mass_kg > 0.0, "mass_kg > 0")?;
    require(phys.damping_kg_per_s >= 0.0, "damping_kg_per_s >= 0")?;
    require(phys.tau1_s > 0.0, "tau1_s > 0")?;
    require(phys.tau2_s > 0.0, "tau2_s > 0")?;
    require(disc.dt_s > 0.0, "dt_s > 0")?;
    require(disc.horizon_steps >= 2, "horizon_steps >= 2")?;

    let dt = disc.dt_s;
    let ratio_damp = dt * phys.damping_kg_per_s / phys.mass_kg;
    let ratio_tau1 = dt / phys.tau1_s;
    let ratio_tau2 = dt / phys.tau2_s;
    let unstable = |what: String| Err(Error::UnstableDiscretization(what));
    if ratio_damp >= 1.0 {
        return unstable(format!(
            "dt_s * damping_kg_per_s / mass_kg < 1 violated ({ratio_damp} >= 1)"
        ));
    }
    if ratio_tau1 >= 1.0 {
        return unstable(format!("dt_s / tau1_s < 1 violated ({ratio_tau1} >= 1)"));
    }
    if ratio_tau2 >= 1.0 {
        return unstable(format!("dt_s / tau2_s < 1 violated ({ratio_tau2} >= 1)"));
    }

    let mut a = DMatrix::zeros(NX, NX);
    a[(IX_P, IX_P)] = 1.0;
    a[(IX_P, IX_V)] = dt;
    a[(IX_V, IX_V)] = 1.0 - ratio_damp;
    a[(IX_V, IX_F)] = dt / phys.mass_kg;
    a[(IX_F, IX_F)] = 1.0 - ratio_tau2;
    a[(IX_F, IX_G)] = ratio_tau2;
    a[(IX_G, IX_G)] = 1.0 - ratio_tau1;
    a[(IX_REF, IX_REF)] = 1.0;

    let mut b_h = DMatrix::zeros(NX, 1);
    b_h[(IX_G, 0)] = ratio_tau1;
    let mut b_a = DMatrix::zeros(NX, 1);
    b_a[(IX_F, 0)] = 1.0;

    // Observation selectors: the human senses p, v, f; the automation p, v.
    let mut h_h = DMatrix::zeros(NY_H, NX);
    for i in 0..NY_H {
        h_h[(i, i)] = 1.0;
    }
    let mut h_a = DMatrix::zeros(NY_A, NX);
    for i in 0..NY_A {
        h_a[(i, i)] = 1.0;
    }

    Ok(SystemModel {
        a,
        b_h,
        b_a,
        h_h,
        h_a,
        dt_s: dt,
        horizon_steps: disc.horizon_steps,
    })
}

/// Builds the noise channel matrices for a system.
///
/// All nine magnitudes must be non-negative. The channels are:
/// `Omega_alpha = diag(s1^2..s4^2, 0)`, `Omega_beta = diag(s5^2..s7^2)`,
/// one control-dependent channel `C_1 = s8 * B_H`, and three state-dependent
/// observation channels `D_i = s9 * H_H * E_i` where `E_i` selects p, v, and
/// p_ref respectively. `H_H` does not pass p_ref, so the third channel is
/// structurally zero; it is kept to preserve the channel count.
pub fn build_noise_model(model: &SystemModel, params: &NoiseParams) -> Result<NoiseModel> {
    for (i, &s) in params.sigma.iter().enumerate() {
        if !(s >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma[{i}] >= 0 violated ({s})"
            )));
        }
    }
    let n = model.n();
    let r_h = model.h_h.nrows();
    let s = &params.sigma;

    let mut omega_alpha = DMatrix::zeros(n, n);
    for i in 0..4 {
        omega_alpha[(i, i)] = s[i] * s[i];
    }
    let mut omega_beta = DMatrix::zeros(r_h, r_h);
    for i in 0..3 {
        omega_beta[(i, i)] = s[4 + i] * s[4 + i];
    }

    let c_channels = vec![&model.b_h * s[7]];

    let selector = |idx: usize| -> DMatrix<f64> {
        let mut e = DMatrix::zeros(n, n);
        e[(idx, idx)] = 1.0;
        e
    };
    let d_channels = vec![
        &model.h_h * selector(IX_P) * s[8],
        &model.h_h * selector(IX_V) * s[8],
        &model.h_h * selector(IX_REF) * s[8],
    ];

    Ok(NoiseModel {
        omega_alpha,
        omega_beta,
        c_channels,
        d_channels,
    })
}

/// Assembles quadratic cost matrices from diagonal weights expressed in
/// tracking-error coordinates.
///
/// `Q = M' diag(s) M` where `M` is the identity with the position row
/// replaced by `[1, 0, 0, 0, -1]`, so `s[0]` weighs `(p - p_ref)^2`.
pub fn build_cost(model: &SystemModel, params: &CostParams) -> Result<CostMatrices> {
    for (name, s) in [("s_terminal", &params.s_terminal), ("s_running", &params.s_running)] {
        for (i, &v) in s.iter().enumerate() {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name}[{i}] >= 0 violated ({v})"
                )));
            }
        }
    }
    if !(params.r_effort > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "r_effort > 0 violated ({})",
            params.r_effort
        )));
    }
    let n = model.n();

    let mut m = DMatrix::identity(n, n);
    m[(IX_P, IX_REF)] = -1.0;

    let weighted = |s: &[f64; NX]| -> DMatrix<f64> {
        let diag = DMatrix::from_diagonal(&DVector::from_row_slice(s));
        m.transpose() * diag * &m
    };

    Ok(CostMatrices {
        q_terminal: weighted(&params.s_terminal),
        q_running: weighted(&params.s_running),
        r: DMatrix::from_element(1, 1, params.r_effort),
    })
}

/// Serializable bundle of everything that defines one closed-loop condition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub physical: PhysicalParams,
    pub discretization: Discretization,
    pub noise: NoiseParams,
    pub cost: CostParams,
    pub task: TaskConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TaskConfig {
    pub p_start_m: f64,
    pub p_ref_m: f64,
    /// Optional override of the default 1 cm reach band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reach_tol_m: Option<f64>,
}

impl ModelConfig {
    /// Reference parameter set for the bundled reaching demo: a 50 kg point
    /// mass with 75 kg/s damping, 40 ms muscle stages, 10 ms steps over a 3 s
    /// horizon, and noise/cost values identified from human reaching data for
    /// a 0.24 m reach.
    pub fn reaching_demo() -> Self {
        ModelConfig {
            physical: PhysicalParams {
                mass_kg: 50.0,
                damping_kg_per_s: 75.0,
                tau1_s: 0.04,
                tau2_s: 0.04,
            },
            discretization: Discretization {
                dt_s: 0.01,
                horizon_steps: 300,
            },
            noise: NoiseParams {
                sigma: [
                    1.8e-3, 1.10e-5, 1.63e-2, 1.68e-2, // process p, v, f, g
                    1.61e-2, 4.12e-2, 1.53e-2, // observation p, v, f
                    1.25,   // control-dependent
                    1.4e-3, // state-dependent
                ],
            },
            cost: CostParams {
                s_terminal: [1.0, 0.253, 34.2, 0.0, 0.0],
                s_running: [0.0; NX],
                r_effort: 3.43e-9,
            },
            task: TaskConfig {
                p_start_m: 0.0,
                p_ref_m: 0.24,
                reach_tol_m: None,
            },
        }
    }

    pub fn system(&self) -> Result<SystemModel> {
        build_reaching_system(&self.physical, &self.discretization)
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut task = TaskSpec::reach(self.task.p_start_m, self.task.p_ref_m);
        if let Some(tol) = self.task.reach_tol_m {
            task.reach_tol_m = tol;
        }
        task
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
