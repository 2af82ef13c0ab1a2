use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use drive_core::evaluation::{
    converged_time, convergence_curve, evaluate, extract_windows, horizon_steps, MotionModel,
    CONVERGENCE_GRADIENT, DEFAULT_HORIZON_S,
};
use drive_core::io::{self, fmt_f64, ModelFile, Provenance};
use drive_core::protocol::{
    assemble_dataset, build_schedule, characterize_limits, sample_commands, sample_forward_biased,
    InputSpace, LimitRamp, ScheduleConfig, SessionLog, LINEAR_FOCUSED_TURN_FRACTION,
    WINDOWS_PER_INTERVAL, WINDOW_S,
};
use drive_core::sim::{SimConfig, Simulator, TerrainParams};
use drive_core::slip::DEFAULT_PHI;
use drive_core::training::{train_with, SlipInput};
use drive_core::Error;

const EXIT_CHARACTERIZATION: u8 = 2;
const EXIT_EXCITATION: u8 = 3;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;

#[derive(Parser)]
#[command(name = "drive", version, about = "Skid-steer calibration pipeline")]
struct Cli {
    /// Directory searched for relative input paths that do not exist in the
    /// working directory.
    #[arg(long, global = true, env = "DRIVE_CONFIG_DIR")]
    config_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulator configuration for a terrain preset.
    InitConfig {
        #[arg(long, default_value = "gravel")]
        terrain: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find the wheel-speed limits of a simulated plant.
    Characterize {
        #[arg(long)]
        plant: PathBuf,
        /// Overrides the plant's noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw commands over the input space and write the command schedule.
    Sample {
        #[arg(long)]
        space: PathBuf,
        /// Protocol length in seconds; rounded up to whole intervals.
        #[arg(long, default_value_t = 240.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20.0)]
        rate: f64,
        /// Slew limit on wheel commands (rad/s²); 0 disables it.
        #[arg(long, default_value_t = 8.0)]
        slew: f64,
        #[arg(long, value_enum, default_value_t = Sampler::Uniform)]
        sampler: Sampler,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a schedule on the simulator and write the session log.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// Overrides the configuration's noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the powertrain and slip models on the training half of a log.
    Train {
        #[arg(long)]
        log: PathBuf,
        /// Simulator configuration supplying the geometry and terrain label.
        #[arg(long)]
        config: PathBuf,
        /// Recorded in the model file.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PHI)]
        phi: f64,
        /// Train on the whole log instead of its first half.
        #[arg(long)]
        all: bool,
        /// Regress slip on raw encoder speeds instead of powertrain predictions.
        #[arg(long)]
        raw_wheels: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the naive, powertrain-aware and slip models on the evaluation
    /// half of a log.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Accepted for uniformity; evaluation is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_HORIZON_S)]
        horizon: f64,
        /// Evaluate on the whole log instead of its second half.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error of the slip model against the amount of training data.
    Converge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Accepted for uniformity; the curve is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid spacing in seconds of training data.
        #[arg(long, default_value_t = 6.0)]
        step: f64,
        /// Last grid point; defaults to the whole training half.
        #[arg(long)]
        max: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_HORIZON_S)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    /// Uniform over the whole input space.
    Uniform,
    /// Forward driving with gentle turns only.
    Forward,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

fn context(what: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let code = match &e {
            Error::Characterization(_) => EXIT_CHARACTERIZATION,
            Error::InsufficientExcitation(_) | Error::NonIdentifiable(_) => EXIT_EXCITATION,
            Error::Io(_) => 1,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: format!("{}: {e}", what.display()),
        }
    }
}

fn core_error(e: Error) -> Failure {
    context(Path::new("drive"))(e)
}

struct Env {
    config_dir: Option<PathBuf>,
}

impl Env {
    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_relative() && !path.exists() {
            if let Some(dir) = &self.config_dir {
                let candidate = dir.join(path);
                if candidate.exists() {
                    return candidate;
                }
            }
        }
        path.to_path_buf()
    }

    fn open(&self, path: &Path) -> Result<BufReader<File>, Failure> {
        let resolved = self.resolve(path);
        File::open(&resolved)
            .map(BufReader::new)
            .map_err(|e| Failure::usage(format!("cannot open {}: {e}", resolved.display())))
    }

    fn sim_config(&self, path: &Path) -> Result<SimConfig, Failure> {
        let cfg: SimConfig = io::read_json(self.open(path)?).map_err(context(path))?;
        cfg.validate().map_err(context(path))?;
        Ok(cfg)
    }

    fn log(&self, path: &Path) -> Result<SessionLog, Failure> {
        io::read_log(self.open(path)?).map_err(context(path))
    }

    fn model(&self, path: &Path) -> Result<ModelFile, Failure> {
        io::read_model(self.open(path)?).map_err(context(path))
    }
}

/// Writes through a temporary file in the destination directory, renamed
/// into place once complete.
fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> drive_core::Result<()>,
) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).map_err(context(path))?;
        w.flush().map_err(fail)?;
    }
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let env = Env {
        config_dir: cli.config_dir,
    };
    match cli.command {
        Command::InitConfig { terrain, seed, out } => {
            let t = TerrainParams::preset(&terrain).ok_or_else(|| {
                Failure::usage(format!(
                    "unknown terrain `{terrain}`; expected one of {}",
                    TerrainParams::PRESETS.join(", ")
                ))
            })?;
            let cfg = SimConfig::with_terrain(t, seed);
            write_atomic(&out, |w| io::write_json(w, &cfg))
        }
        Command::Characterize { plant, seed, out } => {
            let mut cfg = env.sim_config(&plant)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let rate = cfg.rate_hz;
            let mut sim = Simulator::new(cfg).map_err(context(&plant))?;
            let space = characterize_limits(&mut sim, &LimitRamp::default().samples(rate))
                .map_err(context(&plant))?;
            println!(
                "omega_min {} omega_max {}",
                space.omega_min, space.omega_max
            );
            write_atomic(&out, |w| io::write_json(w, &space))
        }
        Command::Sample {
            space,
            duration,
            seed,
            rate,
            slew,
            sampler,
            out,
        } => {
            let input: InputSpace = io::read_json(env.open(&space)?).map_err(context(&space))?;
            input.validate().map_err(context(&space))?;
            if !(duration >= 0.0 && duration.is_finite()) {
                return Err(Failure::usage("--duration must be non-negative"));
            }
            let interval_s = WINDOW_S * WINDOWS_PER_INTERVAL as f64;
            let count = (duration / interval_s - 1e-9).ceil().max(0.0) as usize;
            let samples = match sampler {
                Sampler::Uniform => sample_commands(&input, count, seed),
                Sampler::Forward => {
                    sample_forward_biased(&input, count, LINEAR_FOCUSED_TURN_FRACTION, seed)
                }
            }
            .map_err(core_error)?;
            let config = ScheduleConfig {
                rate_hz: rate,
                slew_limit_rad_s2: (slew > 0.0).then_some(slew),
            };
            let schedule =
                build_schedule(&samples, &config).map_err(|e| Failure::usage(e.to_string()))?;
            write_atomic(&out, |w| io::write_schedule(w, &schedule))
        }
        Command::Simulate {
            config,
            schedule,
            seed,
            out,
        } => {
            let mut cfg = env.sim_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let sched = io::read_schedule(env.open(&schedule)?).map_err(context(&schedule))?;
            let log = Simulator::new(cfg)
                .and_then(|mut sim| sim.run(&sched))
                .map_err(context(&schedule))?;
            write_atomic(&out, |w| io::write_log(w, &log))
        }
        Command::Train {
            log,
            config,
            seed,
            phi,
            all,
            raw_wheels,
            out,
        } => {
            let cfg = env.sim_config(&config)?;
            let session = env.log(&log)?;
            let session = if all {
                session
            } else {
                session.split_train_eval().map_err(context(&log))?.0
            };
            let input = if raw_wheels {
                SlipInput::MeasuredWheels
            } else {
                SlipInput::PredictedWheels
            };
            let trained = train_with(&session, &cfg.geometry, phi, input).map_err(context(&log))?;
            let train_seconds = session.len() as f64 / cfg.rate_hz;
            let file = ModelFile::new(
                cfg.geometry,
                trained.powertrain,
                &trained.slip,
                Provenance {
                    seed,
                    terrain: cfg.terrain.label.clone(),
                    train_seconds,
                },
            );
            let rejected = trained.assembled.rejected.len();
            println!(
                "trained on {} rows ({rejected} rejected); tau_c {:.4}/{:.4} s, tau_d {:.4}/{:.4} s",
                trained.assembled.dataset.len(),
                trained.powertrain.left.time_constant_s,
                trained.powertrain.right.time_constant_s,
                trained.powertrain.left.dead_time_s,
                trained.powertrain.right.dead_time_s,
            );
            write_atomic(&out, |w| io::write_json(w, &file))
        }
        Command::Eval {
            model,
            log,
            seed: _,
            horizon,
            all,
            out,
        } => {
            let file = env.model(&model)?;
            let session = env.log(&log)?;
            let session = if all {
                session
            } else {
                session.split_train_eval().map_err(context(&log))?.1
            };
            let windows = eval_windows(&session, horizon, &log)?;
            let slip = file.slip_model().map_err(context(&model))?;
            let models = [
                MotionModel::Naive,
                MotionModel::PowertrainAware(file.powertrain),
                MotionModel::SlipBlr {
                    powertrain: file.powertrain,
                    slip,
                },
            ];
            let mut rows = Vec::new();
            for m in &models {
                let s = evaluate(m, &file.geometry, &windows).map_err(context(&log))?;
                rows.push(format!(
                    "{},{},{},{},{},{}",
                    m.name(),
                    fmt_f64(s.epsilon_t_median),
                    fmt_f64(s.epsilon_t_iqr),
                    fmt_f64(s.epsilon_r_median),
                    fmt_f64(s.epsilon_r_iqr),
                    s.windows
                ));
            }
            write_atomic(&out, |w| {
                writeln!(
                    w,
                    "model,eps_t_median,eps_t_iqr,eps_r_median,eps_r_iqr,windows"
                )?;
                for r in &rows {
                    writeln!(w, "{r}")?;
                }
                Ok(())
            })
        }
        Command::Converge {
            model,
            log,
            seed: _,
            step,
            max,
            horizon,
            out,
        } => {
            let file = env.model(&model)?;
            let session = env.log(&log)?;
            let (train_log, eval_log) = session.split_train_eval().map_err(context(&log))?;
            let train_set = assemble_dataset(&train_log, &file.geometry, Some(file.powertrain))
                .map_err(context(&log))?
                .dataset;
            let windows = eval_windows(&eval_log, horizon, &log)?;
            let total = train_log.len() as f64 * train_log.period_s().unwrap_or(0.0);
            let last = max.unwrap_or(total);
            if !(step > 0.0) || !(last > 0.0) {
                return Err(Failure::usage("--step and --max must be positive"));
            }
            if last > total + 1e-9 {
                return Err(Failure::usage(format!(
                    "--max {last} s exceeds the {total} s of training data"
                )));
            }
            let n = (last / step + 1e-9).floor() as usize;
            let grid: Vec<f64> = (1..=n).map(|k| k as f64 * step).collect();
            let curve = convergence_curve(
                &train_set,
                file.powertrain,
                &file.geometry,
                &windows,
                &grid,
                file.phi,
            )
            .map_err(context(&log))?;
            write_atomic(&out, |w| {
                writeln!(w, "train_seconds,epsilon_t_median,epsilon_t_iqr,epsilon_r_median,epsilon_r_iqr,flag")?;
                for p in &curve {
                    match (&p.summary, &p.flag) {
                        (Some(s), _) => writeln!(
                            w,
                            "{},{},{},{},{},",
                            fmt_f64(p.train_seconds),
                            fmt_f64(s.epsilon_t_median),
                            fmt_f64(s.epsilon_t_iqr),
                            fmt_f64(s.epsilon_r_median),
                            fmt_f64(s.epsilon_r_iqr)
                        )?,
                        (None, flag) => writeln!(
                            w,
                            "{},,,,,\"{}\"",
                            fmt_f64(p.train_seconds),
                            flag.as_deref().unwrap_or("").replace('"', "'")
                        )?,
                    }
                }
                Ok(())
            })?;
            match converged_time(&curve, CONVERGENCE_GRADIENT) {
                Some(t) => println!("converged_time {t}"),
                None => println!("converged_time none"),
            }
            Ok(())
        }
    }
}

fn eval_windows(
    session: &SessionLog,
    horizon_s: f64,
    source: &Path,
) -> Result<Vec<drive_core::evaluation::PredictionWindow>, Failure> {
    let rate = session.period_s().map(|p| 1.0 / p).ok_or_else(|| {
        context(source)(Error::InvalidParameter(
            "log has fewer than two samples".into(),
        ))
    })?;
    let h = horizon_steps(horizon_s, rate);
    if h == 0 {
        return Err(Failure::usage("--horizon is shorter than one sample"));
    }
    let windows = extract_windows(session, h);
    if windows.is_empty() {
        return Err(context(source)(Error::InvalidParameter(
            "log is too short for a single prediction window".into(),
        )));
    }
    Ok(windows)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("drive: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
