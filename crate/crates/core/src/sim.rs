//! Deterministic skid-steer plant used as ground truth.
//!
//! Each step the wheels follow the lag law towards the (saturated) command,
//! the ideal body velocity is reduced by the terrain slip and the pose is
//! integrated with the same Euler update the models use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    diff_drive_body_velocity, propagate_state, PlanarState, RobotGeometry, SlipVelocity,
    WheelSpeeds,
};
use crate::powertrain::{PowertrainParams, SidePair, WheelTrack};
use crate::protocol::{InputSpace, LogRecord, Schedule, SessionLog, WheelPlant};
use crate::slip::SlipModel;

/// Ground-truth slip weights, in the learner's feature basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipCoefficients {
    pub longitudinal: f64,
    pub lateral: f64,
    pub angular: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainParams {
    pub label: String,
    pub slip_coeffs: SlipCoefficients,
    /// Standard deviation of the additive slip noise, per dimension.
    pub noise_std: [f64; 3],
    /// Coefficient `q` of an extra angular slip `q·f_ω·|f_ω|` that the
    /// learner's basis cannot represent. Zero keeps the plant in-model.
    #[serde(default)]
    pub mismatch_quadratic: f64,
}

impl TerrainParams {
    pub const PRESETS: [&'static str; 4] = ["tile", "gravel", "snow", "ice"];

    pub fn preset(name: &str) -> Option<Self> {
        let (coeffs, noise, quad) = match name {
            "tile" => ((0.02, 0.01, [0.005, 0.005, 0.08]), [0.01, 0.005, 0.01], 0.0),
            "gravel" => ((0.08, 0.04, [0.015, 0.02, 0.25]), [0.02, 0.005, 0.02], 0.0),
            "snow" => ((0.15, 0.06, [0.02, 0.03, 0.3]), [0.04, 0.01, 0.04], 0.0),
            "ice" => ((0.35, 0.12, [0.05, 0.05, 0.55]), [0.08, 0.03, 0.08], 0.03),
            _ => return None,
        };
        Some(Self {
            label: name.to_string(),
            slip_coeffs: SlipCoefficients {
                longitudinal: coeffs.0,
                lateral: coeffs.1,
                angular: coeffs.2,
            },
            noise_std: noise,
            mismatch_quadratic: quad,
        })
    }

    /// No slip and no noise.
    pub fn ideal() -> Self {
        Self {
            label: "ideal".into(),
            slip_coeffs: SlipCoefficients {
                longitudinal: 0.0,
                lateral: 0.0,
                angular: [0.0; 3],
            },
            noise_std: [0.0; 3],
            mismatch_quadratic: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "terrain noise must be non-negative, got {:?}",
                self.noise_std
            )));
        }
        let c = &self.slip_coeffs;
        if !(c.longitudinal.is_finite()
            && c.lateral.is_finite()
            && c.angular.iter().all(|v| v.is_finite())
            && self.mismatch_quadratic.is_finite())
        {
            return Err(Error::InvalidParameter(
                "terrain coefficients must be finite".into(),
            ));
        }
        Ok(())
    }

    /// The noise-free in-basis part of the terrain as a slip model.
    pub fn slip_model(&self) -> SlipModel {
        let c = &self.slip_coeffs;
        SlipModel::from_weights(c.longitudinal, c.lateral, c.angular)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub geometry: RobotGeometry,
    pub powertrain: SidePair<PowertrainParams>,
    pub actuator_limits: InputSpace,
    pub terrain: TerrainParams,
    pub rate_hz: f64,
    pub seed: u64,
    /// Standard deviation of the wheel encoder noise (rad/s).
    #[serde(default)]
    pub encoder_noise_std: f64,
    /// Standard deviation of the noise on logged poses (m, m, rad).
    #[serde(default)]
    pub pose_noise_std: f64,
    /// Wheels ignore every command; used to exercise failure paths.
    #[serde(default)]
    pub stalled: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            geometry: RobotGeometry::default(),
            powertrain: SidePair::both(PowertrainParams {
                time_constant_s: 0.4,
                dead_time_s: 0.1,
            }),
            actuator_limits: InputSpace {
                omega_min: -16.67,
                omega_max: 16.67,
            },
            terrain: TerrainParams::preset("gravel").unwrap(),
            rate_hz: 20.0,
            seed: 0,
            encoder_noise_std: 0.01,
            pose_noise_std: 0.0,
            stalled: false,
        }
    }
}

impl SimConfig {
    pub fn with_terrain(terrain: TerrainParams, seed: u64) -> Self {
        Self {
            terrain,
            seed,
            ..Self::default()
        }
    }

    /// A plant that behaves like the ideal differential drive: no slip, no
    /// noise and an effectively instantaneous powertrain.
    pub fn ideal() -> Self {
        Self {
            powertrain: SidePair::both(PowertrainParams {
                time_constant_s: 1e-9,
                dead_time_s: 0.0,
            }),
            terrain: TerrainParams::ideal(),
            encoder_noise_std: 0.0,
            ..Self::default()
        }
    }

    pub fn period_s(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.powertrain.left.validate()?;
        self.powertrain.right.validate()?;
        self.actuator_limits.validate()?;
        self.terrain.validate()?;
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "rate must be positive, got {}",
                self.rate_hz
            )));
        }
        if !(self.encoder_noise_std >= 0.0 && self.pose_noise_std >= 0.0) {
            return Err(Error::InvalidParameter(
                "sensor noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one plant step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Encoder reading at the start of the step.
    pub measured: WheelSpeeds,
    /// True slip applied during the step.
    pub slip: SlipVelocity,
    pub next_state: PlanarState,
}

/// Running plant: pose, wheel dynamics and random stream.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    slip: SlipModel,
    wheels: WheelTrack,
    state: PlanarState,
    step_index: u64,
    rng: ChaCha8Rng,
}

impl Simulator {
    /// Starts at the origin with the wheels at rest.
    pub fn new(config: SimConfig) -> Result<Self> {
        Self::with_initial_wheels(config, WheelSpeeds::default())
    }

    /// Starts with the wheels already spinning at `wheels`, as if that command
    /// had been held forever.
    pub fn with_initial_wheels(config: SimConfig, wheels: WheelSpeeds) -> Result<Self> {
        config.validate()?;
        let wheels = if config.stalled {
            WheelSpeeds::default()
        } else {
            config.actuator_limits.clamp(wheels)
        };
        Ok(Self {
            slip: config.terrain.slip_model(),
            wheels: WheelTrack::new(config.powertrain, 0.0, wheels, wheels),
            state: PlanarState::default(),
            step_index: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> PlanarState {
        self.state
    }

    pub fn time_s(&self) -> f64 {
        self.step_index as f64 / self.config.rate_hz
    }

    pub fn wheel_speeds(&self) -> WheelSpeeds {
        self.wheels.speeds()
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Applies `command` for one period.
    pub fn step(&mut self, command: WheelSpeeds) -> Result<StepOutput> {
        let cfg = &self.config;
        let limits = cfg.actuator_limits;
        let t = self.step_index as f64 / cfg.rate_hz;
        let t_next = (self.step_index + 1) as f64 / cfg.rate_hz;
        let wheels = self.wheels.speeds();

        let (enc_sd, [sx, sy, sw], quad) = (
            cfg.encoder_noise_std,
            cfg.terrain.noise_std,
            cfg.terrain.mismatch_quadratic,
        );
        let noise = [(); 5].map(|_| self.normal());
        let measured = limits.clamp(WheelSpeeds::new(
            wheels.left_rad_s + enc_sd * noise[0],
            wheels.right_rad_s + enc_sd * noise[1],
        ));

        let f = diff_drive_body_velocity(&self.config.geometry, wheels);
        let base = self.slip.mean_slip(&f);
        let slip = SlipVelocity::new(
            base.gx_m_s + sx * noise[2],
            base.gy_m_s + sy * noise[3],
            base.gomega_rad_s + sw * noise[4] + quad * f.omega_rad_s * f.omega_rad_s.abs(),
        );
        let next_state = propagate_state(self.state, f - slip, t_next - t);

        let applied = if self.config.stalled {
            WheelSpeeds::default()
        } else {
            limits.clamp(command)
        };
        self.wheels.push_command(t, applied)?;
        self.wheels.advance_to(t_next);
        self.state = next_state;
        self.step_index += 1;
        Ok(StepOutput {
            measured,
            slip,
            next_state,
        })
    }

    fn noisy_pose(&mut self, pose: PlanarState) -> PlanarState {
        let sd = self.config.pose_noise_std;
        let n = [(); 3].map(|_| self.normal());
        if sd == 0.0 {
            return pose;
        }
        PlanarState::new(
            pose.x_m + sd * n[0],
            pose.y_m + sd * n[1],
            pose.yaw_rad + sd * n[2],
        )
    }

    /// Executes `schedule` and logs one record per command; the pose of each
    /// record is the one at the command's timestamp.
    pub fn run(&mut self, schedule: &Schedule) -> Result<SessionLog> {
        self.run_guarded(schedule, |_| false)
    }

    /// Like [`Simulator::run`], but stops before the first command issued
    /// from a pose for which `abort` returns true.
    pub fn run_guarded(
        &mut self,
        schedule: &Schedule,
        mut abort: impl FnMut(&PlanarState) -> bool,
    ) -> Result<SessionLog> {
        if (schedule.rate_hz - self.config.rate_hz).abs() > 1e-9 * self.config.rate_hz {
            return Err(Error::InvalidParameter(format!(
                "schedule rate {} Hz does not match plant rate {} Hz",
                schedule.rate_hz, self.config.rate_hz
            )));
        }
        let mut records = Vec::with_capacity(schedule.commands.len());
        for cmd in &schedule.commands {
            let pose = self.state;
            if abort(&pose) {
                break;
            }
            let t_s = self.time_s();
            let out = self.step(cmd.command)?;
            let logged = self.noisy_pose(pose);
            records.push(LogRecord {
                t_s,
                command: cmd.command,
                measured: out.measured,
                pose: logged,
                interval_id: cmd.interval_id,
                window_tag: cmd.window_tag,
            });
        }
        Ok(SessionLog { records })
    }
}

/// Runs a fresh plant over `schedule`.
pub fn run_session(config: &SimConfig, schedule: &Schedule) -> Result<SessionLog> {
    Simulator::new(config.clone())?.run(schedule)
}

impl WheelPlant for Simulator {
    fn period_s(&self) -> f64 {
        self.config.period_s()
    }

    fn command(&mut self, command: WheelSpeeds) -> WheelSpeeds {
        self.step(command)
            .expect("plant times increase by construction")
            .measured
    }
}
