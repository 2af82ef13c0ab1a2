//! Horizon rollouts and prediction-error metrics.
//!
//! The error of a predicted trajectory against the truth over `h` steps is
//!
//! ```text
//! ε = (1/h) Σ_j sqrt((q_j − q̂_j)ᵀ Σ (q_j − q̂_j))
//! ```
//!
//! with `Σ = diag(1, 1, 0)` for translation and `diag(0, 0, 1)` for rotation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    diff_drive_body_velocity, propagate_state, wrap_angle, PlanarState, RobotGeometry, WheelSpeeds,
};
use crate::powertrain::{PowertrainParams, SidePair, WheelTrack};
use crate::protocol::{DriveDataset, SessionLog};
use crate::slip::SlipModel;
use crate::stats;
use crate::training::{fit_slip, LEAD_IN_S};

pub const DEFAULT_HORIZON_S: f64 = 2.0;
pub const DEFAULT_HORIZON: usize = 40;
pub const TRANSLATIONAL: [f64; 3] = [1.0, 1.0, 0.0];
pub const ROTATIONAL: [f64; 3] = [0.0, 0.0, 1.0];
/// Gradient bound (error units per second of training) for convergence.
pub const CONVERGENCE_GRADIENT: f64 = 0.01;

pub fn horizon_steps(horizon_s: f64, rate_hz: f64) -> usize {
    (horizon_s * rate_hz).round() as usize
}

/// A stretch of `h` logged commands with the poses they produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionWindow {
    pub initial_state: PlanarState,
    /// Encoder reading at the start of the window.
    pub initial_wheels: WheelSpeeds,
    /// Commands issued shortly before the window.
    pub lead_in: Vec<(f64, WheelSpeeds)>,
    /// `h + 1` timestamps: the start and the end of every step.
    pub times: Vec<f64>,
    pub commands: Vec<WheelSpeeds>,
    /// Poses at the end of every step.
    pub truth: Vec<PlanarState>,
}

impl PredictionWindow {
    pub fn horizon(&self) -> usize {
        self.commands.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.commands.len();
        if h == 0 {
            return Err(Error::InvalidParameter("prediction window is empty".into()));
        }
        if self.truth.len() != h {
            return Err(Error::LengthMismatch {
                expected: h,
                actual: self.truth.len(),
            });
        }
        if self.times.len() != h + 1 {
            return Err(Error::LengthMismatch {
                expected: h + 1,
                actual: self.times.len(),
            });
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("window times must increase".into()));
        }
        Ok(())
    }
}

/// Non-overlapping windows of `horizon` steps, skipping any that straddle a
/// sampling gap.
pub fn extract_windows(log: &SessionLog, horizon: usize) -> Vec<PredictionWindow> {
    let recs = &log.records;
    let Some(period) = log.period_s() else {
        return Vec::new();
    };
    if horizon == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s + horizon < recs.len() {
        let span = &recs[s..=s + horizon];
        if span.windows(2).all(|w| w[1].t_s - w[0].t_s <= 1.5 * period) {
            let t0 = span[0].t_s;
            out.push(PredictionWindow {
                initial_state: span[0].pose,
                initial_wheels: span[0].measured,
                lead_in: recs[..s]
                    .iter()
                    .filter(|r| r.t_s >= t0 - LEAD_IN_S)
                    .map(|r| (r.t_s, r.command))
                    .collect(),
                times: span.iter().map(|r| r.t_s).collect(),
                commands: span[..horizon].iter().map(|r| r.command).collect(),
                truth: span[1..].iter().map(|r| r.pose).collect(),
            });
        }
        s += horizon;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum MotionModel {
    /// Ideal kinematics on the commanded wheel speeds.
    Naive,
    /// Ideal kinematics on lag-filtered wheel speeds.
    PowertrainAware(SidePair<PowertrainParams>),
    /// Lag-filtered kinematics minus the posterior-mean slip.
    SlipBlr {
        powertrain: SidePair<PowertrainParams>,
        slip: SlipModel,
    },
}

impl MotionModel {
    pub fn name(&self) -> &'static str {
        match self {
            MotionModel::Naive => "naive",
            MotionModel::PowertrainAware(_) => "powertrain",
            MotionModel::SlipBlr { .. } => "slip-blr",
        }
    }
}

/// Predicted poses at the end of each step of the window.
pub fn rollout(
    model: &MotionModel,
    geom: &RobotGeometry,
    window: &PredictionWindow,
) -> Result<Vec<PlanarState>> {
    window.validate()?;
    let (powertrain, slip) = match model {
        MotionModel::Naive => (None, None),
        MotionModel::PowertrainAware(p) => (Some(*p), None),
        MotionModel::SlipBlr { powertrain, slip } => {
            slip.validate()?;
            (Some(*powertrain), Some(slip))
        }
    };
    let t0 = window.times[0];
    let mut track = match powertrain {
        Some(p) => {
            let prior = window
                .lead_in
                .first()
                .map_or(window.initial_wheels, |&(_, c)| c);
            let mut track = WheelTrack::new(p, t0, window.initial_wheels, prior);
            for &(t, c) in &window.lead_in {
                track.push_command(t, c)?;
            }
            Some(track)
        }
        None => None,
    };
    let mut state = window.initial_state;
    let mut out = Vec::with_capacity(window.horizon());
    for (j, &cmd) in window.commands.iter().enumerate() {
        let t = window.times[j];
        let wheels = match track.as_mut() {
            Some(track) => {
                let w = track.advance_to(t);
                track.push_command(t, cmd)?;
                w
            }
            None => cmd,
        };
        let f = diff_drive_body_velocity(geom, wheels);
        let v = match slip {
            Some(s) => f - s.mean_slip(&f),
            None => f,
        };
        state = propagate_state(state, v, window.times[j + 1] - t);
        out.push(state);
    }
    Ok(out)
}

/// Masked mean root squared error between two trajectories. Yaw residuals
/// are wrapped before squaring.
pub fn mrmse(truth: &[PlanarState], predicted: &[PlanarState], mask: [f64; 3]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidParameter("trajectories are empty".into()));
    }
    let sum: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(q, p)| {
            let dx = q.x_m - p.x_m;
            let dy = q.y_m - p.y_m;
            let dyaw = wrap_angle(q.yaw_rad - p.yaw_rad);
            (mask[0] * dx * dx + mask[1] * dy * dy + mask[2] * dyaw * dyaw).sqrt()
        })
        .sum();
    Ok(sum / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrmseResult {
    pub epsilon_t: f64,
    pub epsilon_r: f64,
}

pub fn window_errors(
    model: &MotionModel,
    geom: &RobotGeometry,
    windows: &[PredictionWindow],
) -> Result<Vec<MrmseResult>> {
    windows
        .iter()
        .map(|w| {
            let pred = rollout(model, geom, w)?;
            Ok(MrmseResult {
                epsilon_t: mrmse(&w.truth, &pred, TRANSLATIONAL)?,
                epsilon_r: mrmse(&w.truth, &pred, ROTATIONAL)?,
            })
        })
        .collect()
}

/// Medians and interquartile ranges over windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub epsilon_t_median: f64,
    pub epsilon_t_iqr: f64,
    pub epsilon_r_median: f64,
    pub epsilon_r_iqr: f64,
    pub windows: usize,
}

pub fn summarize(errors: &[MrmseResult]) -> Option<ErrorSummary> {
    let t: Vec<f64> = errors.iter().map(|e| e.epsilon_t).collect();
    let r: Vec<f64> = errors.iter().map(|e| e.epsilon_r).collect();
    Some(ErrorSummary {
        epsilon_t_median: stats::median(&t)?,
        epsilon_t_iqr: stats::iqr(&t)?,
        epsilon_r_median: stats::median(&r)?,
        epsilon_r_iqr: stats::iqr(&r)?,
        windows: errors.len(),
    })
}

pub fn evaluate(
    model: &MotionModel,
    geom: &RobotGeometry,
    windows: &[PredictionWindow],
) -> Result<ErrorSummary> {
    let errors = window_errors(model, geom, windows)?;
    summarize(&errors).ok_or_else(|| Error::InvalidParameter("no evaluation windows".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePoint {
    pub train_seconds: f64,
    /// `None` when the prefix could not be trained on.
    pub summary: Option<ErrorSummary>,
    pub flag: Option<String>,
}

/// Error of the slip model trained on growing chronological prefixes of
/// `train`, each evaluated on the same windows with a fixed powertrain.
pub fn convergence_curve(
    train: &DriveDataset,
    powertrain: SidePair<PowertrainParams>,
    geom: &RobotGeometry,
    windows: &[PredictionWindow],
    grid: &[f64],
    phi: f64,
) -> Result<Vec<ConvergencePoint>> {
    if windows.is_empty() {
        return Err(Error::InvalidParameter("no evaluation windows".into()));
    }
    // The final logged sample has no successor pose and never yields a row,
    // so a grid point may exceed the row span by one period.
    let duration = dataset_duration(train);
    let slack = match train.rows.len() {
        0 | 1 => 0.0,
        n => duration / n as f64,
    };
    grid.iter()
        .map(|&seconds| {
            if !(seconds > 0.0) || seconds > duration + slack + 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "grid point {seconds} s outside the {duration} s of training data"
                )));
            }
            let prefix = train.prefix(seconds);
            match fit_slip(&prefix, phi) {
                Ok(slip) => {
                    let model = MotionModel::SlipBlr { powertrain, slip };
                    Ok(ConvergencePoint {
                        train_seconds: seconds,
                        summary: Some(evaluate(&model, geom, windows)?),
                        flag: None,
                    })
                }
                Err(e @ (Error::InsufficientExcitation(_) | Error::Untrained(_))) => {
                    Ok(ConvergencePoint {
                        train_seconds: seconds,
                        summary: None,
                        flag: Some(e.to_string()),
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Time span covered by a dataset, counting the last row's period.
pub fn dataset_duration(data: &DriveDataset) -> f64 {
    match (data.rows.first(), data.rows.last()) {
        (Some(a), Some(b)) if data.rows.len() > 1 => {
            let period = (b.t_s - a.t_s) / (data.rows.len() - 1) as f64;
            b.t_s - a.t_s + period
        }
        _ => 0.0,
    }
}

/// Finite-difference gradients of a series on a grid: central inside,
/// one-sided at the ends. `None` where a needed value is missing.
pub fn grid_gradient(x: &[f64], y: &[Option<f64>]) -> Vec<Option<f64>> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                _ if n < 2 => return None,
                0 => (0, 1),
                _ if i == n - 1 => (n - 2, n - 1),
                _ => (i - 1, i + 1),
            };
            Some((y[b]? - y[a]?) / (x[b] - x[a]))
        })
        .collect()
}

/// Smallest grid time from which the gradients of both median errors stay
/// below `threshold` in magnitude for every later point. Flagged points
/// count as violations.
pub fn converged_time(curve: &[ConvergencePoint], threshold: f64) -> Option<f64> {
    if curve.len() < 3 {
        return None;
    }
    let x: Vec<f64> = curve.iter().map(|p| p.train_seconds).collect();
    let et: Vec<Option<f64>> = curve
        .iter()
        .map(|p| p.summary.map(|s| s.epsilon_t_median))
        .collect();
    let er: Vec<Option<f64>> = curve
        .iter()
        .map(|p| p.summary.map(|s| s.epsilon_r_median))
        .collect();
    let gt = grid_gradient(&x, &et);
    let gr = grid_gradient(&x, &er);
    let ok = |i: usize| matches!((gt[i], gr[i]), (Some(a), Some(b)) if a.abs() < threshold && b.abs() < threshold);
    let mut first = None;
    for i in (0..curve.len()).rev() {
        if !ok(i) {
            break;
        }
        first = Some(i);
    }
    first.map(|i| x[i])
}
