//! First-order plus dead-time wheel-speed response.
//!
//! Between two changes of the (delayed) command the wheel relaxes toward the
//! command with
//!
//! ```text
//! ω̂(t) = e^β ω(t0) + (1 − e^β) ω̃(t − τd),   β = −(t − t0) / τc
//! ```
//!
//! Commands are held zero-order. Chaining the expression across every
//! command change gives the exact response of the continuous lag to a
//! piecewise-constant input, which is what every consumer in this crate
//! (simulator, dataset assembly, rollout) evaluates.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WheelSpeeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowertrainParams {
    pub time_constant_s: f64,
    pub dead_time_s: f64,
}

impl PowertrainParams {
    pub fn new(time_constant_s: f64, dead_time_s: f64) -> Result<Self> {
        let p = Self {
            time_constant_s,
            dead_time_s,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time_constant_s > 0.0 && self.time_constant_s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "time constant must be positive, got {}",
                self.time_constant_s
            )));
        }
        if !(self.dead_time_s >= 0.0 && self.dead_time_s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dead time must be non-negative, got {}",
                self.dead_time_s
            )));
        }
        Ok(())
    }
}

/// A value for each side of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SidePair<T> {
    pub left: T,
    pub right: T,
}

impl<T> SidePair<T> {
    pub fn new(left: T, right: T) -> Self {
        Self { left, right }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> SidePair<U> {
        SidePair {
            left: f(self.left),
            right: f(self.right),
        }
    }

    pub fn as_ref(&self) -> SidePair<&T> {
        SidePair {
            left: &self.left,
            right: &self.right,
        }
    }
}

impl<T: Clone> SidePair<T> {
    pub fn both(value: T) -> Self {
        Self {
            left: value.clone(),
            right: value,
        }
    }
}

/// Zero-order-hold command signal. Before the first entry the signal equals
/// `initial`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandHistory {
    initial: f64,
    entries: VecDeque<(f64, f64)>,
}

impl CommandHistory {
    pub fn new(initial: f64) -> Self {
        Self {
            initial,
            entries: VecDeque::new(),
        }
    }

    /// Builds a history from `(time, command)` pairs. The signal before the
    /// first pair holds the first command.
    pub fn from_samples(samples: &[(f64, f64)]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyHistory)?;
        let mut h = Self::new(first.1);
        for &(t, c) in samples {
            h.push(t, c)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, time_s: f64, command: f64) -> Result<()> {
        if let Some(&(last, _)) = self.entries.back() {
            if !(time_s > last) {
                return Err(Error::InvalidParameter(format!(
                    "command times must increase strictly ({time_s} after {last})"
                )));
            }
        }
        self.entries.push_back((time_s, command));
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_at(&self, time_s: f64) -> f64 {
        let idx = self.entries.partition_point(|&(t, _)| t <= time_s);
        if idx == 0 {
            self.initial
        } else {
            self.entries[idx - 1].1
        }
    }

    /// Drops entries that no longer affect the signal at or after `time_s`.
    fn forget_before(&mut self, time_s: f64) {
        while self.entries.len() >= 2 && self.entries[1].0 <= time_s {
            let (_, c) = self.entries.pop_front().unwrap();
            self.initial = c;
        }
        if self.entries.len() == 1 && self.entries[0].0 <= time_s {
            let (_, c) = self.entries.pop_front().unwrap();
            self.initial = c;
        }
    }
}

fn relax(omega: f64, target: f64, elapsed_s: f64, time_constant_s: f64) -> f64 {
    let decay = (-elapsed_s / time_constant_s).exp();
    decay * omega + (1.0 - decay) * target
}

/// Wheel speed at `t` given the speed `omega_t0` at `t0` and the command
/// history. The command reaching the wheel at time `s` is the one issued at
/// `s − τd`.
pub fn predict_wheel_speed(
    params: &PowertrainParams,
    t0: f64,
    omega_t0: f64,
    history: &CommandHistory,
    t: f64,
) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if t < t0 {
        return Err(Error::InvalidParameter(format!(
            "prediction time {t} precedes initial time {t0}"
        )));
    }
    Ok(predict_unchecked(params, t0, omega_t0, history, t))
}

fn predict_unchecked(
    params: &PowertrainParams,
    t0: f64,
    omega_t0: f64,
    history: &CommandHistory,
    t: f64,
) -> f64 {
    let start = t0 - params.dead_time_s;
    let end = t - params.dead_time_s;
    let mut omega = omega_t0;
    let mut seg_start = start;
    let mut idx = history.entries.partition_point(|&(s, _)| s <= start);
    while idx < history.entries.len() && history.entries[idx].0 < end {
        let breakpoint = history.entries[idx].0;
        omega = relax(
            omega,
            history.value_at(seg_start),
            breakpoint - seg_start,
            params.time_constant_s,
        );
        seg_start = breakpoint;
        idx += 1;
    }
    relax(
        omega,
        history.value_at(seg_start),
        end - seg_start,
        params.time_constant_s,
    )
}

/// Incremental evaluation of the lag for one side: commands are pushed as
/// they are issued and the wheel speed is advanced sample by sample.
#[derive(Debug, Clone)]
pub struct WheelLag {
    params: PowertrainParams,
    history: CommandHistory,
    time_s: f64,
    omega: f64,
}

impl WheelLag {
    /// Starts at `omega` at time `t0`; commands issued before the first push
    /// equal `prior_command`.
    pub fn new(params: PowertrainParams, t0: f64, omega: f64, prior_command: f64) -> Self {
        Self {
            params,
            history: CommandHistory::new(prior_command),
            time_s: t0,
            omega,
        }
    }

    pub fn speed(&self) -> f64 {
        self.omega
    }

    pub fn time(&self) -> f64 {
        self.time_s
    }

    pub fn push_command(&mut self, time_s: f64, command: f64) -> Result<()> {
        self.history.push(time_s, command)
    }

    /// Advances the wheel to time `t` (`t` not before the current time).
    pub fn advance_to(&mut self, t: f64) -> f64 {
        debug_assert!(t >= self.time_s);
        self.omega = predict_unchecked(&self.params, self.time_s, self.omega, &self.history, t);
        self.time_s = t;
        self.history
            .forget_before(self.time_s - self.params.dead_time_s);
        self.omega
    }
}

/// Both sides of the vehicle advanced together.
#[derive(Debug, Clone)]
pub struct WheelTrack {
    sides: SidePair<WheelLag>,
}

impl WheelTrack {
    pub fn new(
        params: SidePair<PowertrainParams>,
        t0: f64,
        speeds: WheelSpeeds,
        prior_command: WheelSpeeds,
    ) -> Self {
        Self {
            sides: SidePair {
                left: WheelLag::new(params.left, t0, speeds.left_rad_s, prior_command.left_rad_s),
                right: WheelLag::new(
                    params.right,
                    t0,
                    speeds.right_rad_s,
                    prior_command.right_rad_s,
                ),
            },
        }
    }

    pub fn speeds(&self) -> WheelSpeeds {
        WheelSpeeds::new(self.sides.left.speed(), self.sides.right.speed())
    }

    pub fn push_command(&mut self, time_s: f64, command: WheelSpeeds) -> Result<()> {
        self.sides.left.push_command(time_s, command.left_rad_s)?;
        self.sides.right.push_command(time_s, command.right_rad_s)
    }

    pub fn advance_to(&mut self, t: f64) -> WheelSpeeds {
        WheelSpeeds::new(
            self.sides.left.advance_to(t),
            self.sides.right.advance_to(t),
        )
    }
}

/// Wheel speeds produced by a command stream sampled at `rate_hz`, starting
/// at rest. Sample `k` is the speed at `k / rate_hz`, before command `k` has
/// had any effect.
pub fn simulate_wheel_track(
    params: SidePair<PowertrainParams>,
    commands: &[WheelSpeeds],
    rate_hz: f64,
) -> Result<Vec<WheelSpeeds>> {
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "rate must be positive, got {rate_hz}"
        )));
    }
    params.left.validate()?;
    params.right.validate()?;
    let mut track = WheelTrack::new(params, 0.0, WheelSpeeds::default(), WheelSpeeds::default());
    let mut out = Vec::with_capacity(commands.len());
    for (k, cmd) in commands.iter().enumerate() {
        let t = k as f64 / rate_hz;
        out.push(track.advance_to(t));
        track.push_command(t, *cmd)?;
    }
    Ok(out)
}

/// One sample of a transient window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSample {
    pub time_s: f64,
    pub commanded: f64,
    pub measured: f64,
}

/// Samples of one side over a transient window. The first sample's measured
/// speed is the initial condition; `lead_in` holds commands issued before the
/// window, needed to cover the dead time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransientWindow {
    pub lead_in: Vec<(f64, f64)>,
    pub samples: Vec<WindowSample>,
}

impl TransientWindow {
    fn is_excited(&self) -> bool {
        let Some(first) = self.samples.first() else {
            return false;
        };
        let w0 = first.measured;
        let tol = 1e-9 * (1.0 + w0.abs());
        self.lead_in
            .iter()
            .map(|&(_, c)| c)
            .chain(self.samples.iter().map(|s| s.commanded))
            .any(|c| (c - w0).abs() > tol)
    }

    fn history(&self) -> Result<CommandHistory> {
        // Without a lead-in the wheel is assumed settled on its initial speed.
        let initial = self
            .lead_in
            .first()
            .map(|&(_, c)| c)
            .or_else(|| self.samples.first().map(|s| s.measured))
            .ok_or(Error::EmptyHistory)?;
        let mut h = CommandHistory::new(initial);
        for &(t, c) in &self.lead_in {
            h.push(t, c)?;
        }
        for s in &self.samples {
            h.push(s.time_s, s.commanded)?;
        }
        Ok(h)
    }
}

/// Search box and stopping rule for powertrain identification.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationConfig {
    pub time_constant_bounds_s: (f64, f64),
    pub dead_time_bounds_s: (f64, f64),
    pub time_constant_grid: usize,
    pub dead_time_grid: usize,
    /// Refinement stops once both step sizes fall below this.
    pub tolerance_s: f64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            time_constant_bounds_s: (0.01, 3.0),
            dead_time_bounds_s: (0.0, 0.6),
            time_constant_grid: 40,
            dead_time_grid: 25,
            tolerance_s: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowertrainFit {
    pub params: PowertrainParams,
    /// Root-mean-square residual over all fitted samples (rad/s).
    pub rms_residual: f64,
    pub samples: usize,
}

struct PreparedWindow {
    history: CommandHistory,
    t0: f64,
    omega0: f64,
    times: Vec<f64>,
    measured: Vec<f64>,
}

fn sum_squared_error(params: &PowertrainParams, windows: &[PreparedWindow]) -> f64 {
    let mut sse = 0.0;
    for w in windows {
        let mut omega = w.omega0;
        let mut t_prev = w.t0;
        for (&t, &m) in w.times.iter().zip(&w.measured) {
            omega = predict_unchecked(params, t_prev, omega, &w.history, t);
            t_prev = t;
            sse += (omega - m) * (omega - m);
        }
    }
    sse
}

/// Least-squares fit of `(τc, τd)` to transient windows of one side, with
/// the default search configuration.
pub fn identify_powertrain(windows: &[TransientWindow]) -> Result<PowertrainFit> {
    identify_powertrain_with(windows, &IdentificationConfig::default())
}

/// Grid search over the configured box followed by a compass search from the
/// best grid node. Deterministic for a fixed input.
pub fn identify_powertrain_with(
    windows: &[TransientWindow],
    config: &IdentificationConfig,
) -> Result<PowertrainFit> {
    let (tc_lo, tc_hi) = config.time_constant_bounds_s;
    let (td_lo, td_hi) = config.dead_time_bounds_s;
    if !(tc_lo > 0.0 && tc_hi > tc_lo && td_lo >= 0.0 && td_hi >= td_lo) {
        return Err(Error::InvalidParameter("invalid search bounds".into()));
    }
    if config.time_constant_grid < 2 || config.dead_time_grid < 2 {
        return Err(Error::InvalidParameter(
            "grids need at least two nodes".into(),
        ));
    }
    if !windows.iter().any(TransientWindow::is_excited) {
        return Err(Error::NonIdentifiable(
            "no window contains a command different from the initial wheel speed".into(),
        ));
    }

    let mut prepared = Vec::with_capacity(windows.len());
    let mut samples = 0;
    for w in windows.iter().filter(|w| w.samples.len() >= 2) {
        let first = w.samples[0];
        let rest = &w.samples[1..];
        samples += rest.len();
        prepared.push(PreparedWindow {
            history: w.history()?,
            t0: first.time_s,
            omega0: first.measured,
            times: rest.iter().map(|s| s.time_s).collect(),
            measured: rest.iter().map(|s| s.measured).collect(),
        });
    }
    if samples == 0 {
        return Err(Error::NonIdentifiable(
            "windows hold fewer than two samples".into(),
        ));
    }

    let cost = |tc: f64, td: f64| {
        sum_squared_error(
            &PowertrainParams {
                time_constant_s: tc,
                dead_time_s: td,
            },
            &prepared,
        )
    };

    // Time constants are spread geometrically, dead times linearly.
    let tc_ratio = (tc_hi / tc_lo).powf(1.0 / (config.time_constant_grid - 1) as f64);
    let td_step = (td_hi - td_lo) / (config.dead_time_grid - 1) as f64;
    let mut best = (f64::INFINITY, tc_lo, td_lo);
    for i in 0..config.time_constant_grid {
        let tc = tc_lo * tc_ratio.powi(i as i32);
        for j in 0..config.dead_time_grid {
            let td = td_lo + td_step * j as f64;
            let c = cost(tc, td);
            if c < best.0 {
                best = (c, tc, td);
            }
        }
    }

    let (mut best_cost, mut tc, mut td) = best;
    let mut tc_step = tc * (tc_ratio - 1.0);
    let mut td_step = td_step.max(config.tolerance_s);
    while tc_step > config.tolerance_s || td_step > config.tolerance_s {
        let mut improved = false;
        let candidates = [
            ((tc + tc_step).min(tc_hi), td),
            ((tc - tc_step).max(tc_lo), td),
            (tc, (td + td_step).min(td_hi)),
            (tc, (td - td_step).max(td_lo)),
        ];
        for (ctc, ctd) in candidates {
            let c = cost(ctc, ctd);
            if c < best_cost {
                best_cost = c;
                tc = ctc;
                td = ctd;
                improved = true;
            }
        }
        if !improved {
            tc_step *= 0.5;
            td_step *= 0.5;
        }
    }

    Ok(PowertrainFit {
        params: PowertrainParams {
            time_constant_s: tc,
            dead_time_s: td,
        },
        rms_residual: (best_cost / samples as f64).sqrt(),
        samples,
    })
}
