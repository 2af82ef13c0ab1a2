//! Data-gathering protocol.
//!
//! 1. Drive hard forward and backward to find the wheel-speed limits; the
//!    input space is the box `[ω_min, ω_max]²`.
//! 2. Draw left/right wheel commands uniformly from that box.
//! 3. Hold each command for one training interval of three 2 s windows: one
//!    transient window followed by two steady windows.
//! 4. Turn the recorded log into per-dimension slip regressors and targets.

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    body_velocity_from_poses, diff_drive_body_velocity, observed_slip, BodyVelocity, PlanarState,
    RobotGeometry, SlipVelocity, WheelSpeeds,
};
use crate::powertrain::{PowertrainParams, SidePair, TransientWindow, WheelTrack, WindowSample};
use crate::slip::{slip_features, SlipDimension};
use crate::stats;

pub const DEFAULT_RATE_HZ: f64 = 20.0;
pub const WINDOW_S: f64 = 2.0;
pub const WINDOWS_PER_INTERVAL: usize = 3;
pub const DEFAULT_SLEW_LIMIT_RAD_S2: f64 = 8.0;

/// Box of admissible wheel-speed commands, shared by both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpace {
    pub omega_min: f64,
    pub omega_max: f64,
}

impl InputSpace {
    pub fn new(omega_min: f64, omega_max: f64) -> Result<Self> {
        let s = Self {
            omega_min,
            omega_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn symmetric(limit: f64) -> Result<Self> {
        Self::new(-limit, limit)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_min < 0.0 && self.omega_max > 0.0)
            || !self.omega_min.is_finite()
            || !self.omega_max.is_finite()
        {
            return Err(Error::InvalidParameter(format!(
                "input space needs omega_min < 0 < omega_max, got [{}, {}]",
                self.omega_min, self.omega_max
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, w: WheelSpeeds) -> WheelSpeeds {
        WheelSpeeds::new(
            w.left_rad_s.clamp(self.omega_min, self.omega_max),
            w.right_rad_s.clamp(self.omega_min, self.omega_max),
        )
    }

    pub fn contains(&self, w: WheelSpeeds) -> bool {
        let inside = |v: f64| v >= self.omega_min && v <= self.omega_max;
        inside(w.left_rad_s) && inside(w.right_rad_s)
    }
}

/// Anything that accepts a wheel command, holds it for one period and reports
/// the encoder reading at the end of it.
pub trait WheelPlant {
    fn period_s(&self) -> f64;
    fn command(&mut self, command: WheelSpeeds) -> WheelSpeeds;
}

/// Commands used to drive the plant into saturation.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitRamp {
    pub peak_rad_s: f64,
    pub ramp_s: f64,
    pub hold_s: f64,
}

impl Default for LimitRamp {
    fn default() -> Self {
        Self {
            peak_rad_s: 50.0,
            ramp_s: 2.0,
            hold_s: 4.0,
        }
    }
}

impl LimitRamp {
    /// Command magnitudes sampled at `rate_hz`.
    pub fn samples(&self, rate_hz: f64) -> Vec<f64> {
        let ramp = (self.ramp_s * rate_hz).round() as usize;
        let hold = (self.hold_s * rate_hz).round() as usize;
        (1..=ramp)
            .map(|k| self.peak_rad_s * k as f64 / ramp as f64)
            .chain(std::iter::repeat_n(self.peak_rad_s, hold))
            .collect()
    }
}

/// Relative spread under which a one-second stretch counts as a plateau.
pub const PLATEAU_TOLERANCE: f64 = 0.01;
const PLATEAU_MIN_RAD_S: f64 = 1e-3;

fn plateau(values: &[f64], width: usize, sign: f64) -> Option<f64> {
    if width == 0 || values.len() < width {
        return None;
    }
    values.windows(width).find_map(|w| {
        let mean = w.iter().sum::<f64>() / width as f64;
        let (lo, hi) = w
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        (mean * sign > PLATEAU_MIN_RAD_S && hi - lo <= PLATEAU_TOLERANCE * mean.abs())
            .then_some(mean)
    })
}

/// Sends the ramp forward then backward on both wheels and reads the speed
/// plateaus. Each bound is the more conservative of the two sides.
pub fn characterize_limits(plant: &mut impl WheelPlant, ramp: &[f64]) -> Result<InputSpace> {
    let period = plant.period_s();
    if !(period > 0.0) {
        return Err(Error::InvalidParameter(
            "plant period must be positive".into(),
        ));
    }
    let width = (1.0 / period).round().max(1.0) as usize;
    let mut bounds = [0.0; 2];
    for (slot, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let mut left = Vec::with_capacity(ramp.len());
        let mut right = Vec::with_capacity(ramp.len());
        for &c in ramp {
            let m = plant.command(WheelSpeeds::new(sign * c.abs(), sign * c.abs()));
            left.push(m.left_rad_s);
            right.push(m.right_rad_s);
        }
        let direction = if sign > 0.0 { "forward" } else { "reverse" };
        let l = plateau(&left, width, sign).ok_or_else(|| {
            Error::Characterization(format!("no {direction} plateau on the left side"))
        })?;
        let r = plateau(&right, width, sign).ok_or_else(|| {
            Error::Characterization(format!("no {direction} plateau on the right side"))
        })?;
        bounds[slot] = sign * (l * sign).min(r * sign);
    }
    InputSpace::new(bounds[1], bounds[0]).map_err(|e| Error::Characterization(e.to_string()))
}

/// `count` i.i.d. commands uniform over the input space.
pub fn sample_commands(space: &InputSpace, count: usize, seed: u64) -> Result<Vec<WheelSpeeds>> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(space.omega_min, space.omega_max)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok((0..count)
        .map(|_| {
            let left = dist.sample(&mut rng);
            let right = dist.sample(&mut rng);
            WheelSpeeds::new(left, right)
        })
        .collect())
}

/// Half-width of the wheel-speed difference of [`sample_forward_biased`]
/// schedules, as a fraction of `ω_max`: nearly straight driving.
pub const LINEAR_FOCUSED_TURN_FRACTION: f64 = 0.02;

/// Commands concentrated on forward driving with gentle turns: the common
/// speed is uniform on `[0, ω_max]` and the left/right difference is uniform
/// within `±turn_fraction · ω_max`. Used as a narrow-coverage baseline.
pub fn sample_forward_biased(
    space: &InputSpace,
    count: usize,
    turn_fraction: f64,
    seed: u64,
) -> Result<Vec<WheelSpeeds>> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = Uniform::new_inclusive(0.0, space.omega_max)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let half = turn_fraction.abs() * space.omega_max;
    let turn =
        Uniform::new_inclusive(-half, half).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok((0..count)
        .map(|_| {
            let c = speed.sample(&mut rng);
            let d = turn.sample(&mut rng);
            space.clamp(WheelSpeeds::new(c - d, c + d))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowTag {
    Transient,
    Steady,
}

impl WindowTag {
    pub fn code(self) -> char {
        match self {
            WindowTag::Transient => 'T',
            WindowTag::Steady => 'S',
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "T" => Some(WindowTag::Transient),
            "S" => Some(WindowTag::Steady),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingWindow {
    pub tag: WindowTag,
    pub start_index: usize,
    pub len: usize,
}

/// One sampled command held for three windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInterval {
    pub id: usize,
    pub commanded: WheelSpeeds,
    pub start_time_s: f64,
    pub start_index: usize,
    pub windows: [TrainingWindow; WINDOWS_PER_INTERVAL],
}

impl TrainingInterval {
    pub fn len(&self) -> usize {
        self.windows.iter().map(|w| w.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledCommand {
    pub t_s: f64,
    pub command: WheelSpeeds,
    pub interval_id: usize,
    pub window_tag: WindowTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub rate_hz: f64,
    pub commands: Vec<ScheduledCommand>,
    pub intervals: Vec<TrainingInterval>,
}

impl Schedule {
    pub fn duration_s(&self) -> f64 {
        self.commands.len() as f64 / self.rate_hz
    }

    /// A schedule from a raw command stream, one interval per `interval_len`
    /// commands, without window structure checks.
    pub fn from_commands(rate_hz: f64, commands: &[WheelSpeeds]) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "rate must be positive, got {rate_hz}"
            )));
        }
        let per_window = samples_per_window(rate_hz);
        let per_interval = per_window * WINDOWS_PER_INTERVAL;
        let commands = commands
            .iter()
            .enumerate()
            .map(|(k, &command)| ScheduledCommand {
                t_s: k as f64 / rate_hz,
                command,
                interval_id: k / per_interval,
                window_tag: if k % per_interval < per_window {
                    WindowTag::Transient
                } else {
                    WindowTag::Steady
                },
            })
            .collect();
        Ok(Self {
            rate_hz,
            commands,
            intervals: Vec::new(),
        })
    }
}

pub fn samples_per_window(rate_hz: f64) -> usize {
    (WINDOW_S * rate_hz).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub rate_hz: f64,
    /// Largest change of a wheel command per second; `None` disables it.
    pub slew_limit_rad_s2: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            rate_hz: DEFAULT_RATE_HZ,
            slew_limit_rad_s2: Some(DEFAULT_SLEW_LIMIT_RAD_S2),
        }
    }
}

impl ScheduleConfig {
    pub fn at_rate(rate_hz: f64) -> Self {
        Self {
            rate_hz,
            ..Self::default()
        }
    }
}

/// Holds every sample for one interval, emitting commands at the configured
/// rate. The robot is assumed at rest before the first command.
pub fn build_schedule(samples: &[WheelSpeeds], config: &ScheduleConfig) -> Result<Schedule> {
    let rate = config.rate_hz;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "rate must be positive, got {rate}"
        )));
    }
    let per_window = samples_per_window(rate);
    if per_window == 0 {
        return Err(Error::InvalidParameter(format!(
            "rate {rate} Hz leaves windows empty"
        )));
    }
    let max_step = config.slew_limit_rad_s2.map(|s| s.abs() / rate);
    let mut commands = Vec::with_capacity(samples.len() * per_window * WINDOWS_PER_INTERVAL);
    let mut intervals = Vec::with_capacity(samples.len());
    let mut current = WheelSpeeds::default();
    for (id, &target) in samples.iter().enumerate() {
        let start_index = commands.len();
        let mut windows = [TrainingWindow {
            tag: WindowTag::Steady,
            start_index,
            len: per_window,
        }; WINDOWS_PER_INTERVAL];
        for (w, window) in windows.iter_mut().enumerate() {
            window.tag = if w == 0 {
                WindowTag::Transient
            } else {
                WindowTag::Steady
            };
            window.start_index = start_index + w * per_window;
            for _ in 0..per_window {
                current = match max_step {
                    Some(step) => WheelSpeeds::new(
                        current.left_rad_s
                            + (target.left_rad_s - current.left_rad_s).clamp(-step, step),
                        current.right_rad_s
                            + (target.right_rad_s - current.right_rad_s).clamp(-step, step),
                    ),
                    None => target,
                };
                commands.push(ScheduledCommand {
                    t_s: commands.len() as f64 / rate,
                    command: current,
                    interval_id: id,
                    window_tag: window.tag,
                });
            }
        }
        intervals.push(TrainingInterval {
            id,
            commanded: target,
            start_time_s: start_index as f64 / rate,
            start_index,
            windows,
        });
    }
    Ok(Schedule {
        rate_hz: rate,
        commands,
        intervals,
    })
}

/// One synchronized sample of a session: command, encoder reading and pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub t_s: f64,
    pub command: WheelSpeeds,
    pub measured: WheelSpeeds,
    pub pose: PlanarState,
    pub interval_id: usize,
    pub window_tag: WindowTag,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionLog {
    pub records: Vec<LogRecord>,
}

impl SessionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Median sampling period.
    pub fn period_s(&self) -> Option<f64> {
        let diffs: Vec<f64> = self
            .records
            .windows(2)
            .map(|w| w[1].t_s - w[0].t_s)
            .collect();
        stats::median(&diffs)
    }

    pub fn interval_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = Vec::new();
        for r in &self.records {
            if ids.last() != Some(&r.interval_id) {
                ids.push(r.interval_id);
            }
        }
        ids
    }

    /// Chronological split by interval: the first half of the intervals
    /// (rounded up) trains, the rest evaluates.
    pub fn split_train_eval(&self) -> Result<(SessionLog, SessionLog)> {
        let ids = self.interval_ids();
        if ids.len() < 2 {
            return Err(Error::TooFewIntervals(ids.len()));
        }
        let cut = ids[ids.len().div_ceil(2)];
        let idx = self
            .records
            .iter()
            .position(|r| r.interval_id == cut)
            .unwrap_or(self.records.len());
        Ok((
            SessionLog {
                records: self.records[..idx].to_vec(),
            },
            SessionLog {
                records: self.records[idx..].to_vec(),
            },
        ))
    }

    /// Transient windows of each side, with up to `lead_in_s` of preceding
    /// commands attached.
    pub fn transient_windows(&self, lead_in_s: f64) -> SidePair<Vec<TransientWindow>> {
        let mut out = SidePair::new(Vec::new(), Vec::new());
        let recs = &self.records;
        let mut i = 0;
        while i < recs.len() {
            if recs[i].window_tag != WindowTag::Transient {
                i += 1;
                continue;
            }
            let id = recs[i].interval_id;
            let start = i;
            while i < recs.len()
                && recs[i].interval_id == id
                && recs[i].window_tag == WindowTag::Transient
            {
                i += 1;
            }
            let t0 = recs[start].t_s;
            let lead: Vec<&LogRecord> = recs[..start]
                .iter()
                .filter(|r| r.t_s >= t0 - lead_in_s)
                .collect();
            let window = |pick: fn(&WheelSpeeds) -> f64| TransientWindow {
                lead_in: lead.iter().map(|r| (r.t_s, pick(&r.command))).collect(),
                samples: recs[start..i]
                    .iter()
                    .map(|r| WindowSample {
                        time_s: r.t_s,
                        commanded: pick(&r.command),
                        measured: pick(&r.measured),
                    })
                    .collect(),
            };
            out.left.push(window(|w| w.left_rad_s));
            out.right.push(window(|w| w.right_rad_s));
        }
        out
    }
}

/// One regression sample of the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetRow {
    pub t_s: f64,
    pub interval_id: usize,
    pub window_tag: WindowTag,
    pub command: WheelSpeeds,
    pub measured: WheelSpeeds,
    /// Wheel speeds fed to the kinematic map: powertrain predictions, or the
    /// encoder readings in raw mode.
    pub wheels: WheelSpeeds,
    pub commanded_velocity: BodyVelocity,
    pub slip: SlipVelocity,
}

impl DatasetRow {
    pub fn features(&self, dim: SlipDimension) -> Vec<f64> {
        slip_features(dim, &self.commanded_velocity)
    }

    pub fn target(&self, dim: SlipDimension) -> f64 {
        match dim {
            SlipDimension::Longitudinal => self.slip.gx_m_s,
            SlipDimension::Lateral => self.slip.gy_m_s,
            SlipDimension::Angular => self.slip.gomega_rad_s,
        }
    }
}

/// Commands, encoder readings, and the slip regressors/targets of every
/// dimension, one row per accepted log sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DriveDataset {
    pub rows: Vec<DatasetRow>,
}

impl DriveDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `n × k` regressors of one dimension.
    pub fn design(&self, dim: SlipDimension) -> DMatrix<f64> {
        let k = dim.arity();
        let mut x = DMatrix::zeros(self.rows.len(), k);
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.features(dim).into_iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        x
    }

    pub fn targets(&self, dim: SlipDimension) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.target(dim)))
    }

    pub fn interval_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = Vec::new();
        for r in &self.rows {
            if ids.last() != Some(&r.interval_id) {
                ids.push(r.interval_id);
            }
        }
        ids
    }

    /// Rows recorded within the first `seconds` of the dataset.
    pub fn prefix(&self, seconds: f64) -> DriveDataset {
        let Some(first) = self.rows.first() else {
            return DriveDataset::default();
        };
        let end = first.t_s + seconds - 1e-9;
        DriveDataset {
            rows: self
                .rows
                .iter()
                .take_while(|r| r.t_s < end)
                .copied()
                .collect(),
        }
    }

    /// Same interval-granular rule as [`SessionLog::split_train_eval`].
    pub fn split_train_eval(&self) -> Result<(DriveDataset, DriveDataset)> {
        split_train_eval(self)
    }
}

pub fn split_train_eval(dataset: &DriveDataset) -> Result<(DriveDataset, DriveDataset)> {
    let ids = dataset.interval_ids();
    if ids.len() < 2 {
        return Err(Error::TooFewIntervals(ids.len()));
    }
    let cut = ids[ids.len().div_ceil(2)];
    let idx = dataset
        .rows
        .iter()
        .position(|r| r.interval_id == cut)
        .unwrap_or(dataset.rows.len());
    Ok((
        DriveDataset {
            rows: dataset.rows[..idx].to_vec(),
        },
        DriveDataset {
            rows: dataset.rows[idx..].to_vec(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The next sample arrives more than 1.5 periods later.
    Gap,
    /// Last sample of the log; no pose follows it.
    NoSuccessor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RejectedRow {
    pub index: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssembledDataset {
    pub dataset: DriveDataset,
    pub rejected: Vec<RejectedRow>,
}

/// Builds slip regressors and targets from a session log.
///
/// With `powertrain` the wheel speeds entering the kinematic map are the
/// lag-model predictions driven by the logged commands, starting from the
/// first encoder reading; without it they are the raw encoder readings.
/// Each sample's target is the commanded body velocity minus the velocity
/// realized between its pose and the next one.
pub fn assemble_dataset(
    log: &SessionLog,
    geom: &RobotGeometry,
    powertrain: Option<SidePair<PowertrainParams>>,
) -> Result<AssembledDataset> {
    geom.validate()?;
    let recs = &log.records;
    let Some(first) = recs.first() else {
        return Ok(AssembledDataset::default());
    };
    if let Some(p) = powertrain {
        p.left.validate()?;
        p.right.validate()?;
    }
    let period = log.period_s().unwrap_or(f64::INFINITY);
    let mut track =
        powertrain.map(|p| WheelTrack::new(p, first.t_s, first.measured, first.measured));
    let mut rows = Vec::with_capacity(recs.len());
    let mut rejected = Vec::new();
    for (k, rec) in recs.iter().enumerate() {
        let wheels = match track.as_mut() {
            Some(track) => {
                let w = track.advance_to(rec.t_s);
                track.push_command(rec.t_s, rec.command)?;
                w
            }
            None => rec.measured,
        };
        let Some(next) = recs.get(k + 1) else {
            rejected.push(RejectedRow {
                index: k,
                reason: RejectReason::NoSuccessor,
            });
            continue;
        };
        let dt = next.t_s - rec.t_s;
        if !(dt > 0.0) {
            return Err(Error::Schema {
                line: k + 2,
                message: format!(
                    "timestamps must increase strictly ({} then {})",
                    rec.t_s, next.t_s
                ),
            });
        }
        if dt > 1.5 * period {
            rejected.push(RejectedRow {
                index: k,
                reason: RejectReason::Gap,
            });
            continue;
        }
        let commanded_velocity = diff_drive_body_velocity(geom, wheels);
        let realized = body_velocity_from_poses(rec.pose, next.pose, dt)?;
        rows.push(DatasetRow {
            t_s: rec.t_s,
            interval_id: rec.interval_id,
            window_tag: rec.window_tag,
            command: rec.command,
            measured: rec.measured,
            wheels,
            commanded_velocity,
            slip: observed_slip(commanded_velocity, realized),
        });
    }
    Ok(AssembledDataset {
        dataset: DriveDataset { rows },
        rejected,
    })
}
