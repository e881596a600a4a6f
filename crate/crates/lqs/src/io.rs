//! On-disk formats: trial ensembles, moment trajectories, measured data.
//!
//! Floats are written with the shortest round-trip representation, so a file
//! written twice from the same data is byte-identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{IX_F, IX_G, IX_P, IX_REF, IX_V};
use crate::moments::MomentTrajectory;
use crate::sim::TrajectoryEnsemble;

/// One recorded reach: position samples, optionally velocity and force.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredTrial {
    pub trial_id: u64,
    pub time_s: Vec<f64>,
    pub p_m: Vec<f64>,
    pub v_mps: Option<Vec<f64>>,
    pub f_n: Option<Vec<f64>>,
}

impl MeasuredTrial {
    pub fn len(&self) -> usize {
        self.time_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_s.is_empty()
    }

    /// Velocity series: measured when present, central finite differences
    /// of position otherwise (one-sided at the ends).
    pub fn velocity(&self, dt_s: f64) -> Vec<f64> {
        if let Some(v) = &self.v_mps {
            return v.clone();
        }
        let p = &self.p_m;
        let n = p.len();
        let mut v = vec![0.0; n];
        if n >= 2 {
            v[0] = (p[1] - p[0]) / dt_s;
            v[n - 1] = (p[n - 1] - p[n - 2]) / dt_s;
            for i in 1..n - 1 {
                v[i] = (p[i + 1] - p[i - 1]) / (2.0 * dt_s);
            }
        }
        v
    }
}

pub fn write_ensemble_csv(path: &Path, ensemble: &TrajectoryEnsemble) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "trial_id,t_index,time_s,p_x_m,v_x_mps,f_x_N,g_x,p_ref_m,u_H,u_A")?;
    for (trial_id, trial) in ensemble.trials.iter().enumerate() {
        let n_steps = trial.n_steps();
        for t in 0..=n_steps {
            let s = trial.state(t);
            let (u_h, u_a) = if t < n_steps {
                (trial.u_h[t], trial.u_a[t])
            } else {
                (0.0, 0.0)
            };
            writeln!(
                w,
                "{trial_id},{t},{},{},{},{},{},{},{u_h},{u_a}",
                t as f64 * ensemble.dt_s,
                s[IX_P],
                s[IX_V],
                s[IX_F],
                s[IX_G],
                s[IX_REF],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reduced schema carrying only what identification needs.
pub fn write_measured_csv(path: &Path, ensemble: &TrajectoryEnsemble) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "trial_id,time_s,p_x_m,v_x_mps")?;
    for (trial_id, trial) in ensemble.trials.iter().enumerate() {
        for t in 0..=trial.n_steps() {
            let s = trial.state(t);
            writeln!(
                w,
                "{trial_id},{},{},{}",
                t as f64 * ensemble.dt_s,
                s[IX_P],
                s[IX_V],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_moments_csv(path: &Path, moments: &MomentTrajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t_index,time_s,mean_p_m,var_p_m2,mean_v,var_v")?;
    for t in 0..moments.len() {
        writeln!(
            w,
            "{t},{},{},{},{},{}",
            t as f64 * moments.dt_s,
            moments.mean_p(t),
            moments.var_p(t),
            moments.mean_v(t),
            moments.var_v(t),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step data-vs-model curves written after identification.
#[derive(Debug, Clone, Default)]
pub struct FitOverlay {
    pub dt_s: f64,
    pub mean_p_data: Vec<f64>,
    pub mean_p_model: Vec<f64>,
    pub var_p_data: Vec<f64>,
    pub var_p_model: Vec<f64>,
    pub mean_v_data: Vec<f64>,
    pub mean_v_model: Vec<f64>,
    pub var_v_data: Vec<f64>,
    pub var_v_model: Vec<f64>,
}

pub fn write_overlay_csv(path: &Path, overlay: &FitOverlay) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "t_index,time_s,mean_p_data,mean_p_model,var_p_data,var_p_model,\
         mean_v_data,mean_v_model,var_v_data,var_v_model"
    )?;
    for t in 0..overlay.mean_p_data.len() {
        writeln!(
            w,
            "{t},{},{},{},{},{},{},{},{},{}",
            t as f64 * overlay.dt_s,
            overlay.mean_p_data[t],
            overlay.mean_p_model[t],
            overlay.var_p_data[t],
            overlay.var_p_model[t],
            overlay.mean_v_data[t],
            overlay.mean_v_model[t],
            overlay.var_v_data[t],
            overlay.var_v_model[t],
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the effort-weight search trace.
pub fn write_synthesis_csv(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "rho,peak_var")?;
    for &(rho, peak_var) in rows {
        writeln!(w, "{rho},{peak_var}")?;
    }
    w.flush()?;
    Ok(())
}

const REQUIRED_COLUMNS: [&str; 3] = ["trial_id", "time_s", "p_x_m"];

/// Loads recorded trials from either the full ensemble schema or the reduced
/// measured schema. Sampling must be uniform at `expected_dt_s`; with
/// `allow_resample` the trial is linearly interpolated onto that grid
/// instead of rejected.
pub fn load_measured_csv(
    path: &Path,
    expected_dt_s: f64,
    allow_resample: bool,
) -> Result<Vec<MeasuredTrial>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    for name in REQUIRED_COLUMNS {
        if col(name).is_none() {
            return Err(Error::DataFormat {
                line: 1,
                message: format!("missing column '{name}'"),
            });
        }
    }
    let i_trial = col("trial_id").unwrap();
    let i_time = col("time_s").unwrap();
    let i_p = col("p_x_m").unwrap();
    let i_v = col("v_x_mps");
    let i_f = col("f_x_N");

    let mut order: Vec<u64> = Vec::new();
    let mut by_id: HashMap<u64, (usize, MeasuredTrial)> = HashMap::new();

    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record?;
        let field = |i: usize, name: &str| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| Error::DataFormat {
                    line,
                    message: format!("row too short, no value for '{name}'"),
                })?
                .parse::<f64>()
                .map_err(|_| Error::DataFormat {
                    line,
                    message: format!("'{name}' is not a number"),
                })
        };
        let trial_id: u64 = record
            .get(i_trial)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::DataFormat {
                line,
                message: "'trial_id' is not a non-negative integer".into(),
            })?;
        let time = field(i_time, "time_s")?;
        let p = field(i_p, "p_x_m")?;
        if !time.is_finite() || !p.is_finite() {
            return Err(Error::DataFormat {
                line,
                message: "non-finite sample".into(),
            });
        }

        let entry = by_id.entry(trial_id).or_insert_with(|| {
            order.push(trial_id);
            (
                line,
                MeasuredTrial {
                    trial_id,
                    time_s: Vec::new(),
                    p_m: Vec::new(),
                    v_mps: i_v.map(|_| Vec::new()),
                    f_n: i_f.map(|_| Vec::new()),
                },
            )
        });
        let trial = &mut entry.1;
        if let Some(&last) = trial.time_s.last() {
            if time <= last {
                return Err(Error::DataFormat {
                    line,
                    message: format!("time_s not strictly increasing within trial {trial_id}"),
                });
            }
        }
        trial.time_s.push(time);
        trial.p_m.push(p);
        if let (Some(i), Some(vs)) = (i_v, trial.v_mps.as_mut()) {
            vs.push(field(i, "v_x_mps")?);
        }
        if let (Some(i), Some(fs)) = (i_f, trial.f_n.as_mut()) {
            fs.push(field(i, "f_x_N")?);
        }
    }

    if order.is_empty() {
        return Err(Error::DataFormat {
            line: 2,
            message: "file contains no data rows".into(),
        });
    }

    let mut trials = Vec::with_capacity(order.len());
    for id in order {
        let (first_line, trial) = by_id.remove(&id).expect("collected above");
        trials.push(check_sampling(trial, first_line, expected_dt_s, allow_resample)?);
    }
    Ok(trials)
}

fn check_sampling(
    trial: MeasuredTrial,
    first_line: usize,
    expected_dt_s: f64,
    allow_resample: bool,
) -> Result<MeasuredTrial> {
    if trial.len() < 2 {
        return Err(Error::DataFormat {
            line: first_line,
            message: format!("trial {} has fewer than 2 samples", trial.trial_id),
        });
    }
    let dts: Vec<f64> = trial.time_s.windows(2).map(|w| w[1] - w[0]).collect();
    let dt0 = dts[0];
    let uniform = dts.iter().all(|&d| (d - dt0).abs() <= 1e-6 * dt0.max(expected_dt_s));
    let matches = uniform && (dt0 - expected_dt_s).abs() <= 1e-9 + 1e-6 * expected_dt_s;
    if matches {
        return Ok(trial);
    }
    if !allow_resample {
        let what = if uniform {
            format!("sample interval {dt0} s differs from the model step {expected_dt_s} s")
        } else {
            "non-uniform sampling".to_string()
        };
        return Err(Error::DataFormat {
            line: first_line,
            message: format!("trial {}: {what}; enable resampling to accept", trial.trial_id),
        });
    }
    Ok(resample(trial, expected_dt_s))
}

/// Linear interpolation onto a uniform grid spanning the recorded window.
fn resample(trial: MeasuredTrial, dt_s: f64) -> MeasuredTrial {
    let t0 = trial.time_s[0];
    let t_end = *trial.time_s.last().unwrap();
    let n_out = ((t_end - t0) / dt_s).floor() as usize + 1;

    let interp = |series: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(n_out);
        let mut j = 0usize;
        for k in 0..n_out {
            let t = t0 + k as f64 * dt_s;
            while j + 2 < trial.time_s.len() && trial.time_s[j + 1] < t {
                j += 1;
            }
            let (ta, tb) = (trial.time_s[j], trial.time_s[j + 1]);
            let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            out.push(series[j] + w * (series[j + 1] - series[j]));
        }
        out
    };

    MeasuredTrial {
        trial_id: trial.trial_id,
        time_s: (0..n_out).map(|k| k as f64 * dt_s).collect(),
        p_m: interp(&trial.p_m),
        v_mps: trial.v_mps.as_deref().map(interp),
        f_n: trial.f_n.as_deref().map(interp),
    }
}
