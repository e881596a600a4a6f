//! Derivative-free minimization over a box.
//!
//! Nelder-Mead with candidate projection onto the bounds. Deterministic:
//! no randomness, stable ordering, and non-finite objective values are
//! treated as +inf so a diverging model proposal is rejected rather than
//! propagated.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidParameter(format!(
                "bound dimensions differ: {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "invalid bound [{lo}, {hi}] in dimension {i}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    fn clamp(&self, x: &mut [f64]) {
        for (v, (&lo, &hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(lo, hi);
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmOptions {
    /// Converged when the simplex fits in a box of this edge length and the
    /// function spread across vertices is below `f_tol`.
    pub x_tol: f64,
    pub f_tol: f64,
    pub max_evals: usize,
    /// Initial simplex edge as a fraction of each dimension's box width.
    pub initial_step: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        Self { x_tol: 1e-7, f_tol: 1e-12, max_evals: 4000, initial_step: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimizes `f` over the box starting from `x0` (clamped into the box).
pub fn minimize_bounded<F>(
    mut f: F,
    x0: &[f64],
    bounds: &Bounds,
    opts: &NmOptions,
) -> Result<NmResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    if dim == 0 {
        return Err(Error::InvalidParameter("empty parameter vector".into()));
    }
    if bounds.lower.len() != dim {
        return Err(Error::InvalidParameter(format!(
            "bounds are {}-dimensional but x0 is {dim}-dimensional",
            bounds.lower.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial point contains non-finite values".into()));
    }

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        finite_or_inf(f(x))
    };

    let mut start = x0.to_vec();
    bounds.clamp(&mut start);

    // Vertex j perturbs dimension j by a fraction of the box width; the sign
    // flips when that would leave the box.
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(start.clone());
    for j in 0..dim {
        let width = bounds.upper[j] - bounds.lower[j];
        let mut h = opts.initial_step * width;
        if start[j] + h > bounds.upper[j] {
            h = -h;
        }
        let mut v = start.clone();
        v[j] += h;
        bounds.clamp(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let order = |simplex: &mut Vec<Vec<f64>>, values: &mut Vec<f64>| {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let new_s: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let new_v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        *simplex = new_s;
        *values = new_v;
    };
    order(&mut simplex, &mut values);

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0usize;
    let mut converged = false;

    while evals < opts.max_evals {
        // Termination: simplex extent and value spread both small.
        let spread = values[dim] - values[0];
        let extent = (0..dim)
            .map(|j| {
                simplex
                    .iter()
                    .map(|v| v[j])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                        (lo.min(x), hi.max(x))
                    })
            })
            .map(|(lo, hi)| hi - lo)
            .fold(0.0f64, f64::max);
        if extent <= opts.x_tol && spread.abs() <= opts.f_tol + opts.f_tol * values[0].abs() {
            converged = true;
            break;
        }

        iterations += 1;

        let mut centroid = vec![0.0; dim];
        for v in simplex.iter().take(dim) {
            for (c, &x) in centroid.iter_mut().zip(v) {
                *c += x;
            }
        }
        for c in &mut centroid {
            *c /= dim as f64;
        }

        let point_along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(&c, &w)| c + t * (c - w))
                .collect();
            bounds.clamp(&mut p);
            p
        };

        let reflected = point_along(alpha);
        let f_r = eval(&reflected, &mut evals);

        if f_r < values[0] {
            let expanded = point_along(gamma);
            let f_e = eval(&expanded, &mut evals);
            if f_e < f_r {
                simplex[dim] = expanded;
                values[dim] = f_e;
            } else {
                simplex[dim] = reflected;
                values[dim] = f_r;
            }
        } else if f_r < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = f_r;
        } else {
            // Contraction: outside when the reflection at least beats the
            // worst vertex, inside otherwise.
            let (contracted, f_base) = if f_r < values[dim] {
                (point_along(rho), f_r)
            } else {
                (point_along(-rho), values[dim])
            };
            let f_c = eval(&contracted, &mut evals);
            if f_c < f_base {
                simplex[dim] = contracted;
                values[dim] = f_c;
            } else {
                // Shrink toward the best vertex.
                for j in 1..=dim {
                    let best = simplex[0].clone();
                    for (x, &b) in simplex[j].iter_mut().zip(&best) {
                        *x = b + sigma * (*x - b);
                    }
                    bounds.clamp(&mut simplex[j]);
                    values[j] = eval(&simplex[j], &mut evals);
                }
            }
        }
        order(&mut simplex, &mut values);
    }

    Ok(NmResult {
        x: simplex[0].clone(),
        f: values[0],
        evals,
        iterations,
        converged,
    })
}
