//! Structural properties checked over randomized admissible inputs: plant
//! construction, cost matrix shape, and metric definitions must hold for any
//! parameters the builders accept, not just the shipped example.

use lqs::model::{
    build_cost, build_reaching_system, CostParams, Discretization, PhysicalParams, IX_F, IX_G,
    IX_P, IX_REF, IX_V, NX, NY_A, NY_H,
};
use lqs::moments::MomentTrajectory;
use lqs::sim::compute_metrics;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Parameter draws that satisfy the builder's stability preconditions by
/// construction (dt strictly below every continuous time constant).
fn admissible() -> impl Strategy<Value = (PhysicalParams, Discretization)> {
    (1e-3..2e-2f64, 1.0..100.0f64).prop_flat_map(|(dt, mass)| {
        (
            Just(dt),
            Just(mass),
            0.0..(0.9 * mass / dt),
            (1.2 * dt)..0.5f64,
            (1.2 * dt)..0.5f64,
            3usize..60,
        )
            .prop_map(|(dt, mass, damping, tau1, tau2, horizon)| {
                (
                    PhysicalParams {
                        mass_kg: mass,
                        damping_kg_per_s: damping,
                        tau1_s: tau1,
                        tau2_s: tau2,
                    },
                    Discretization { dt_s: dt, horizon_steps: horizon },
                )
            })
    })
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

proptest! {
    /// The discrete plant has exactly the documented sparsity and entries
    /// for every admissible parameter set.
    #[test]
    fn plant_matrices_match_the_difference_equations((phys, disc) in admissible()) {
        let model = build_reaching_system(&phys, &disc).unwrap();
        let dt = disc.dt_s;

        let mut a = DMatrix::zeros(NX, NX);
        a[(IX_P, IX_P)] = 1.0;
        a[(IX_P, IX_V)] = dt;
        a[(IX_V, IX_V)] = 1.0 - dt * phys.damping_kg_per_s / phys.mass_kg;
        a[(IX_V, IX_F)] = dt / phys.mass_kg;
        a[(IX_F, IX_F)] = 1.0 - dt / phys.tau2_s;
        a[(IX_F, IX_G)] = dt / phys.tau2_s;
        a[(IX_G, IX_G)] = 1.0 - dt / phys.tau1_s;
        a[(IX_REF, IX_REF)] = 1.0;
        prop_assert!(max_abs_diff(&model.a, &a) <= 1e-15);

        let mut b_h = DMatrix::zeros(NX, 1);
        b_h[(IX_G, 0)] = dt / phys.tau1_s;
        prop_assert!(max_abs_diff(&model.b_h, &b_h) <= 1e-15);

        let mut b_a = DMatrix::zeros(NX, 1);
        b_a[(IX_F, 0)] = 1.0;
        prop_assert_eq!(&model.b_a, &b_a);

        // Observation selectors: human reads (p, v, f), automation (p, v).
        prop_assert_eq!(model.h_h.shape(), (NY_H, NX));
        prop_assert_eq!(model.h_a.shape(), (NY_A, NX));
        for i in 0..NY_H {
            for j in 0..NX {
                prop_assert_eq!(model.h_h[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
        for i in 0..NY_A {
            for j in 0..NX {
                prop_assert_eq!(model.h_a[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    /// Cost matrices from non-negative weights are symmetric PSD.
    #[test]
    fn cost_matrices_are_symmetric_psd(
        s_terminal in prop::array::uniform5(0.0..100.0f64),
        s_running in prop::array::uniform5(0.0..100.0f64),
        r_effort in 1e-10..1.0f64,
    ) {
        let cfg = lqs::model::ModelConfig::reaching_demo();
        let model = cfg.system().unwrap();
        let cost = build_cost(&model, &CostParams { s_terminal, s_running, r_effort }).unwrap();

        for q in [&cost.q_terminal, &cost.q_running] {
            prop_assert!(max_abs_diff(q, &q.transpose()) == 0.0);
            let min_eig = q
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            prop_assert!(min_eig >= -1e-12, "min eigenvalue {min_eig}");
        }
        prop_assert_eq!(cost.r[(0, 0)], r_effort);
    }

    /// Tightening the reach band can only push time-to-reach later (or lose
    /// it altogether); it can never move it earlier.
    #[test]
    fn time_to_reach_is_monotone_in_tolerance(
        steps in prop::collection::vec(-0.02..0.02f64, 10..80),
        tol_a in 1e-3..0.05f64,
        shrink in 0.1..1.0f64,
    ) {
        let p_ref = 0.24;
        // Random walk that ends parked on the target, so the sustained-entry
        // time exists for at least the loose band.
        let mut p = 0.0;
        let mut means: Vec<DVector<f64>> = steps
            .iter()
            .map(|dp| {
                p += dp;
                let mut x = DVector::zeros(NX);
                x[IX_P] = p;
                x[IX_REF] = p_ref;
                x
            })
            .collect();
        let mut last = DVector::zeros(NX);
        last[IX_P] = p_ref;
        last[IX_REF] = p_ref;
        means.push(last);
        let n = means.len();
        let moments = MomentTrajectory {
            dt_s: 0.01,
            state_dim: NX,
            aug_dim: NX,
            means,
            covariances: vec![DMatrix::zeros(NX, NX); n],
        };

        let task = |tol: f64| {
            let mut t = lqs::model::TaskSpec::reach(0.0, p_ref);
            t.reach_tol_m = tol;
            t
        };
        let loose = compute_metrics(&moments, &task(tol_a));
        let tight = compute_metrics(&moments, &task(tol_a * shrink));
        match (loose.time_to_reach_s, tight.time_to_reach_s) {
            (Some(a), Some(b)) => prop_assert!(b >= a, "tight {b} earlier than loose {a}"),
            (None, Some(_)) => prop_assert!(false, "tight band reached but loose band not"),
            _ => {}
        }
    }
}
