//! File formats: CSV session logs, schedules and datasets, and JSON model
//! files.
//!
//! Floats are written in scientific notation with 17 significant digits, so
//! every `f64` reads back bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BodyVelocity, PlanarState, RobotGeometry, SlipVelocity, WheelSpeeds};
use crate::powertrain::{PowertrainParams, SidePair};
use crate::protocol::{
    DatasetRow, DriveDataset, LogRecord, Schedule, ScheduledCommand, SessionLog, WindowTag,
};
use crate::slip::{NigPosterior, SlipDimension, SlipModel};

pub const LOG_COLUMNS: [&str; 10] = [
    "t_s",
    "cmd_left_rad_s",
    "cmd_right_rad_s",
    "meas_left_rad_s",
    "meas_right_rad_s",
    "x_m",
    "y_m",
    "yaw_rad",
    "interval_id",
    "window_tag",
];

pub const SCHEDULE_COLUMNS: [&str; 5] = [
    "t_s",
    "cmd_left_rad_s",
    "cmd_right_rad_s",
    "interval_id",
    "window_tag",
];

pub const DATASET_COLUMNS: [&str; 15] = [
    "t_s",
    "interval_id",
    "window_tag",
    "cmd_left_rad_s",
    "cmd_right_rad_s",
    "meas_left_rad_s",
    "meas_right_rad_s",
    "wheel_left_rad_s",
    "wheel_right_rad_s",
    "f_x_m_s",
    "f_y_m_s",
    "f_omega_rad_s",
    "g_x_m_s",
    "g_y_m_s",
    "g_omega_rad_s",
];

/// Tolerance on the deviation of any log period from the first one.
pub const PERIOD_TOLERANCE_S: f64 = 1e-6;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv<W: Write>(
    out: W,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_io)?;
    for row in rows {
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Schema {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Rows of a CSV file with its header checked against `columns`.
struct CsvRows {
    rows: Vec<(usize, csv::StringRecord)>,
}

impl CsvRows {
    fn read<R: Read>(input: R, columns: &[&str]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(input);
        let mut records = reader.records();
        let header = match records.next() {
            Some(r) => r.map_err(|e| schema_from_csv(e, 1))?,
            None => {
                return Err(Error::Schema {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        if header.iter().map(str::trim).ne(columns.iter().copied()) {
            return Err(Error::Schema {
                line: 1,
                message: format!("expected header `{}`", columns.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| schema_from_csv(e, line))?;
            if rec.len() != columns.len() {
                return Err(Error::Schema {
                    line,
                    message: format!("expected {} fields, found {}", columns.len(), rec.len()),
                });
            }
            rows.push((line, rec));
        }
        Ok(Self { rows })
    }
}

fn schema_from_csv(e: csv::Error, line: usize) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Schema {
            line,
            message: format!("{other:?}"),
        },
    }
}

struct Fields<'a> {
    line: usize,
    rec: &'a csv::StringRecord,
    columns: &'a [&'a str],
}

impl Fields<'_> {
    fn raw(&self, i: usize) -> &str {
        self.rec[i].trim()
    }

    fn err(&self, i: usize, what: &str) -> Error {
        Error::Schema {
            line: self.line,
            message: format!("column `{}`: {what} `{}`", self.columns[i], self.raw(i)),
        }
    }

    fn f64(&self, i: usize) -> Result<f64> {
        match self.raw(i).parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(i, "expected a finite number, found")),
        }
    }

    fn usize(&self, i: usize) -> Result<usize> {
        self.raw(i)
            .parse()
            .map_err(|_| self.err(i, "expected a non-negative integer, found"))
    }

    fn tag(&self, i: usize) -> Result<WindowTag> {
        WindowTag::from_code(self.raw(i)).ok_or_else(|| self.err(i, "expected T or S, found"))
    }
}

fn check_times(times: &[(usize, f64)], uniform: bool) -> Result<()> {
    let first_period = match times {
        [(_, a), (_, b), ..] => b - a,
        _ => return Ok(()),
    };
    for w in times.windows(2) {
        let ((_, a), (line, b)) = (w[0], w[1]);
        if !(b > a) {
            return Err(Error::Schema {
                line,
                message: format!("t_s must increase strictly ({a} then {b})"),
            });
        }
        if uniform && ((b - a) - first_period).abs() > PERIOD_TOLERANCE_S {
            return Err(Error::Schema {
                line,
                message: format!(
                    "sampling period {} s differs from {} s",
                    b - a,
                    first_period
                ),
            });
        }
    }
    Ok(())
}

pub fn write_log<W: Write>(out: W, log: &SessionLog) -> Result<()> {
    write_csv(
        out,
        &LOG_COLUMNS,
        log.records.iter().map(|r| {
            vec![
                fmt_f64(r.t_s),
                fmt_f64(r.command.left_rad_s),
                fmt_f64(r.command.right_rad_s),
                fmt_f64(r.measured.left_rad_s),
                fmt_f64(r.measured.right_rad_s),
                fmt_f64(r.pose.x_m),
                fmt_f64(r.pose.y_m),
                fmt_f64(r.pose.yaw_rad),
                r.interval_id.to_string(),
                r.window_tag.code().to_string(),
            ]
        }),
    )
}

/// Reads a session log, enforcing strictly increasing, uniformly spaced
/// timestamps.
pub fn read_log<R: Read>(input: R) -> Result<SessionLog> {
    let csv = CsvRows::read(input, &LOG_COLUMNS)?;
    let mut records = Vec::with_capacity(csv.rows.len());
    let mut times = Vec::with_capacity(csv.rows.len());
    for (line, rec) in &csv.rows {
        let f = Fields {
            line: *line,
            rec,
            columns: &LOG_COLUMNS,
        };
        let yaw = f.f64(7)?;
        records.push(LogRecord {
            t_s: f.f64(0)?,
            command: WheelSpeeds::new(f.f64(1)?, f.f64(2)?),
            measured: WheelSpeeds::new(f.f64(3)?, f.f64(4)?),
            pose: PlanarState {
                x_m: f.f64(5)?,
                y_m: f.f64(6)?,
                yaw_rad: yaw,
            },
            interval_id: f.usize(8)?,
            window_tag: f.tag(9)?,
        });
        times.push((*line, records.last().unwrap().t_s));
    }
    check_times(&times, true)?;
    Ok(SessionLog { records })
}

pub fn write_schedule<W: Write>(out: W, schedule: &Schedule) -> Result<()> {
    write_csv(
        out,
        &SCHEDULE_COLUMNS,
        schedule.commands.iter().map(|c| {
            vec![
                fmt_f64(c.t_s),
                fmt_f64(c.command.left_rad_s),
                fmt_f64(c.command.right_rad_s),
                c.interval_id.to_string(),
                c.window_tag.code().to_string(),
            ]
        }),
    )
}

/// Reads a schedule; the rate is recovered from the timestamps.
pub fn read_schedule<R: Read>(input: R) -> Result<Schedule> {
    let csv = CsvRows::read(input, &SCHEDULE_COLUMNS)?;
    let mut commands = Vec::with_capacity(csv.rows.len());
    let mut times = Vec::with_capacity(csv.rows.len());
    for (line, rec) in &csv.rows {
        let f = Fields {
            line: *line,
            rec,
            columns: &SCHEDULE_COLUMNS,
        };
        let t_s = f.f64(0)?;
        commands.push(ScheduledCommand {
            t_s,
            command: WheelSpeeds::new(f.f64(1)?, f.f64(2)?),
            interval_id: f.usize(3)?,
            window_tag: f.tag(4)?,
        });
        times.push((*line, t_s));
    }
    check_times(&times, true)?;
    let rate_hz = match commands.as_slice() {
        [a, .., b] => ((commands.len() - 1) as f64 / (b.t_s - a.t_s) * 1e6).round() / 1e6,
        _ => crate::protocol::DEFAULT_RATE_HZ,
    };
    Ok(Schedule {
        rate_hz,
        commands,
        intervals: Vec::new(),
    })
}

pub fn write_dataset<W: Write>(out: W, data: &DriveDataset) -> Result<()> {
    write_csv(
        out,
        &DATASET_COLUMNS,
        data.rows.iter().map(|r| {
            let mut row = vec![
                fmt_f64(r.t_s),
                r.interval_id.to_string(),
                r.window_tag.code().to_string(),
            ];
            row.extend(
                [
                    r.command.left_rad_s,
                    r.command.right_rad_s,
                    r.measured.left_rad_s,
                    r.measured.right_rad_s,
                    r.wheels.left_rad_s,
                    r.wheels.right_rad_s,
                    r.commanded_velocity.vx_m_s,
                    r.commanded_velocity.vy_m_s,
                    r.commanded_velocity.omega_rad_s,
                    r.slip.gx_m_s,
                    r.slip.gy_m_s,
                    r.slip.gomega_rad_s,
                ]
                .map(fmt_f64),
            );
            row
        }),
    )
}

/// Datasets may contain gaps where rows were rejected, so only increasing
/// timestamps are required.
pub fn read_dataset<R: Read>(input: R) -> Result<DriveDataset> {
    let csv = CsvRows::read(input, &DATASET_COLUMNS)?;
    let mut rows = Vec::with_capacity(csv.rows.len());
    let mut times = Vec::with_capacity(csv.rows.len());
    for (line, rec) in &csv.rows {
        let f = Fields {
            line: *line,
            rec,
            columns: &DATASET_COLUMNS,
        };
        let v = |i: usize| f.f64(i);
        rows.push(DatasetRow {
            t_s: v(0)?,
            interval_id: f.usize(1)?,
            window_tag: f.tag(2)?,
            command: WheelSpeeds::new(v(3)?, v(4)?),
            measured: WheelSpeeds::new(v(5)?, v(6)?),
            wheels: WheelSpeeds::new(v(7)?, v(8)?),
            commanded_velocity: BodyVelocity::new(v(9)?, v(10)?, v(11)?),
            slip: SlipVelocity::new(v(12)?, v(13)?, v(14)?),
        });
        times.push((*line, v(0)?));
    }
    check_times(&times, false)?;
    Ok(DriveDataset { rows })
}

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub weights: Vec<f64>,
    /// Row-major `k × k` scatter matrix `K`.
    pub scatter: Vec<f64>,
    pub shape: f64,
    pub scale: f64,
    pub obs_count: usize,
}

impl PosteriorRecord {
    pub fn from_posterior(p: &NigPosterior) -> Self {
        let k = p.arity();
        Self {
            weights: p.weights.iter().copied().collect(),
            scatter: (0..k)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .map(|ij| p.scatter[ij])
                .collect(),
            shape: p.shape,
            scale: p.scale,
            obs_count: p.obs_count,
        }
    }

    pub fn to_posterior(&self) -> Result<NigPosterior> {
        let k = self.weights.len();
        if self.scatter.len() != k * k {
            return Err(Error::LengthMismatch {
                expected: k * k,
                actual: self.scatter.len(),
            });
        }
        Ok(NigPosterior {
            weights: DVector::from_column_slice(&self.weights),
            scatter: DMatrix::from_row_slice(k, k, &self.scatter),
            shape: self.shape,
            scale: self.scale,
            obs_count: self.obs_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub terrain: String,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub geometry: RobotGeometry,
    pub powertrain: SidePair<PowertrainParams>,
    pub basis: String,
    pub phi: f64,
    pub posteriors: BTreeMap<SlipDimension, PosteriorRecord>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn new(
        geometry: RobotGeometry,
        powertrain: SidePair<PowertrainParams>,
        slip: &SlipModel,
        provenance: Provenance,
    ) -> Self {
        Self {
            version: MODEL_FILE_VERSION,
            geometry,
            powertrain,
            basis: slip.basis.clone(),
            phi: slip.phi,
            posteriors: SlipDimension::ALL
                .into_iter()
                .map(|d| (d, PosteriorRecord::from_posterior(slip.posterior(d))))
                .collect(),
            provenance,
        }
    }

    pub fn slip_model(&self) -> Result<SlipModel> {
        let get = |d: SlipDimension| {
            self.posteriors
                .get(&d)
                .ok_or_else(|| {
                    Error::InvalidParameter(format!("model file lacks the {d:?} posterior"))
                })?
                .to_posterior()
        };
        let model = SlipModel {
            longitudinal: get(SlipDimension::Longitudinal)?,
            lateral: get(SlipDimension::Lateral)?,
            angular: get(SlipDimension::Angular)?,
            basis: self.basis.clone(),
            phi: self.phi,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported model file version {}",
                self.version
            )));
        }
        if self.basis != crate::slip::BASIS_TAG {
            return Err(Error::InvalidParameter(format!(
                "unknown slip basis `{}`",
                self.basis
            )));
        }
        self.geometry.validate()?;
        self.powertrain.left.validate()?;
        self.powertrain.right.validate()?;
        self.slip_model().map(|_| ())
    }
}

pub fn write_json<W: Write, T: Serialize>(mut out: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<T> {
    Ok(serde_json::from_reader(input)?)
}

pub fn read_model<R: Read>(input: R) -> Result<ModelFile> {
    let m: ModelFile = read_json(input)?;
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{
        assemble_dataset, build_schedule, sample_commands, InputSpace, ScheduleConfig,
    };
    use crate::sim::{run_session, SimConfig};
    use crate::training::fit_slip;

    fn session() -> SessionLog {
        let space = InputSpace::symmetric(16.67).unwrap();
        let samples = sample_commands(&space, 4, 3).unwrap();
        let schedule = build_schedule(&samples, &ScheduleConfig::default()).unwrap();
        run_session(&SimConfig::default(), &schedule).unwrap()
    }

    #[test]
    fn log_round_trip_is_exact() {
        let log = session();
        let mut buf = Vec::new();
        write_log(&mut buf, &log).unwrap();
        assert!(buf.starts_with(LOG_COLUMNS.join(",").as_bytes()));
        assert_eq!(read_log(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn empty_log_is_header_only() {
        let mut buf = Vec::new();
        write_log(&mut buf, &SessionLog::default()).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            LOG_COLUMNS.join(",") + "\n"
        );
        assert!(read_log(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn schedule_round_trip() {
        let samples = vec![WheelSpeeds::new(1.0, -2.0); 2];
        let s = build_schedule(&samples, &ScheduleConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_schedule(&mut buf, &s).unwrap();
        let back = read_schedule(buf.as_slice()).unwrap();
        assert_eq!(back.commands, s.commands);
        assert_eq!(back.rate_hz, 20.0);
    }

    #[test]
    fn dataset_round_trip() {
        let log = session();
        let data = assemble_dataset(&log, &RobotGeometry::default(), None)
            .unwrap()
            .dataset;
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
    }

    fn schema_line(text: &str) -> usize {
        match read_log(text.as_bytes()) {
            Err(Error::Schema { line, .. }) => line,
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let header = LOG_COLUMNS.join(",");
        let row = |t: &str| format!("{t},0,0,0,0,0,0,0,0,T");
        assert_eq!(schema_line("a,b\n"), 1);
        assert_eq!(schema_line(""), 1);
        assert_eq!(
            schema_line(&format!("{header}\n{}\n{}\n", row("0"), row("x"))),
            3
        );
        assert_eq!(
            schema_line(&format!("{header}\n{}\n{}\n", row("0"), row("0"))),
            3
        );
        assert_eq!(
            schema_line(&format!(
                "{header}\n{}\n{}\n{}\n",
                row("0"),
                row("0.05"),
                row("0.2")
            )),
            4
        );
        assert_eq!(schema_line(&format!("{header}\n0,0,0,0,0,0,0,0,0,Q\n")), 2);
        assert_eq!(schema_line(&format!("{header}\n0,0,0\n")), 2);
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let log = session();
        let geom = RobotGeometry::default();
        let pt = SidePair::both(PowertrainParams::new(0.4, 0.1).unwrap());
        let data = assemble_dataset(&log, &geom, Some(pt)).unwrap().dataset;
        let slip = fit_slip(&data, crate::slip::DEFAULT_PHI).unwrap();
        let file = ModelFile::new(
            geom,
            pt,
            &slip,
            Provenance {
                seed: 3,
                terrain: "gravel".into(),
                train_seconds: 24.0,
            },
        );
        let mut buf = Vec::new();
        write_json(&mut buf, &file).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.slip_model().unwrap(), slip);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"version\": 1"));
        assert!(text.contains("\"longitudinal\""));
    }

    #[test]
    fn model_file_requires_version() {
        let file = ModelFile::new(
            RobotGeometry::default(),
            SidePair::both(PowertrainParams::new(0.4, 0.1).unwrap()),
            &SlipModel::from_weights(0.1, 0.0, [0.0; 3]),
            Provenance {
                seed: 0,
                terrain: "tile".into(),
                train_seconds: 0.0,
            },
        );
        let mut v = serde_json::to_value(&file).unwrap();
        v.as_object_mut().unwrap().remove("version");
        assert!(read_model(v.to_string().as_bytes()).is_err());
    }
}
