use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use drive_core::io;
use drive_core::model::WheelSpeeds;
use drive_core::protocol::{build_schedule, ScheduleConfig};
use drive_core::sim::SimConfig;

fn drive(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drive"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRIVE_CONFIG_DIR")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = drive(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gravel_log(dir: &Path) {
    ok(
        dir,
        &[
            "init-config",
            "--terrain",
            "gravel",
            "--seed",
            "7",
            "--out",
            "sim.json",
        ],
    );
    ok(
        dir,
        &["characterize", "--plant", "sim.json", "--out", "space.json"],
    );
    ok(
        dir,
        &[
            "sample",
            "--space",
            "space.json",
            "--duration",
            "240",
            "--seed",
            "7",
            "--out",
            "schedule.csv",
        ],
    );
    ok(
        dir,
        &[
            "simulate",
            "--config",
            "sim.json",
            "--schedule",
            "schedule.csv",
            "--out",
            "log.csv",
        ],
    );
}

#[test]
fn pipeline_beats_naive_rotation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gravel_log(dir);
    let space: drive_core::protocol::InputSpace =
        io::read_json(fs::File::open(dir.join("space.json")).unwrap()).unwrap();
    assert!((space.omega_max - 16.67).abs() < 0.01 * 16.67);
    assert!((space.omega_min + 16.67).abs() < 0.01 * 16.67);
    ok(
        dir,
        &[
            "train",
            "--log",
            "log.csv",
            "--config",
            "sim.json",
            "--out",
            "model.json",
        ],
    );
    ok(
        dir,
        &[
            "eval",
            "--model",
            "model.json",
            "--log",
            "log.csv",
            "--out",
            "report.csv",
        ],
    );
    let report = fs::read_to_string(dir.join("report.csv")).unwrap();
    let eps_r = |name: &str| -> f64 {
        let line = report.lines().find(|l| l.starts_with(name)).unwrap();
        line.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(eps_r("slip-blr") < eps_r("naive"), "{report}");
    assert_eq!(
        report.lines().next().unwrap(),
        "model,eps_t_median,eps_t_iqr,eps_r_median,eps_r_iqr,windows"
    );
}

#[test]
fn converge_reports_every_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gravel_log(dir);
    ok(
        dir,
        &[
            "train",
            "--log",
            "log.csv",
            "--config",
            "sim.json",
            "--out",
            "model.json",
        ],
    );
    let stdout = ok(
        dir,
        &[
            "converge",
            "--model",
            "model.json",
            "--log",
            "log.csv",
            "--step",
            "50",
            "--out",
            "curve.csv",
        ],
    );
    assert!(stdout.starts_with("converged_time"));
    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    let times: Vec<f64> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(times, vec![50.0, 100.0]);
    let out = drive(
        dir,
        &[
            "converge",
            "--model",
            "model.json",
            "--log",
            "log.csv",
            "--max",
            "500",
            "--out",
            "c.csv",
        ],
    );
    assert_eq!(code(&out), 64);
}

#[test]
fn dead_plant_fails_characterization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        stalled: true,
        ..SimConfig::default()
    };
    io::write_json(
        fs::File::create(tmp.path().join("dead.json")).unwrap(),
        &cfg,
    )
    .unwrap();
    let out = drive(
        tmp.path(),
        &[
            "characterize",
            "--plant",
            "dead.json",
            "--out",
            "space.json",
        ],
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!tmp.path().join("space.json").exists());
}

#[test]
fn usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = drive(
        tmp.path(),
        &[
            "characterize",
            "--plant",
            "missing.json",
            "--out",
            "space.json",
        ],
    );
    assert_eq!(code(&out), 64);
    assert_eq!(code(&drive(tmp.path(), &["frobnicate"])), 64);
    assert_eq!(code(&drive(tmp.path(), &["train", "--log", "x.csv"])), 64);
    assert_eq!(
        code(&drive(
            tmp.path(),
            &["init-config", "--terrain", "lava", "--out", "a.json"]
        )),
        64
    );
}

#[test]
fn straight_driving_is_insufficient_excitation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = SimConfig {
        encoder_noise_std: 0.0,
        ..SimConfig::default()
    };
    io::write_json(fs::File::create(dir.join("sim.json")).unwrap(), &cfg).unwrap();
    let samples: Vec<WheelSpeeds> = [4.0, -6.0, 9.0, 2.0, -12.0, 7.0]
        .iter()
        .map(|&v| WheelSpeeds::new(v, v))
        .collect();
    let schedule = build_schedule(&samples, &ScheduleConfig::default()).unwrap();
    io::write_schedule(
        fs::File::create(dir.join("straight.csv")).unwrap(),
        &schedule,
    )
    .unwrap();
    ok(
        dir,
        &[
            "simulate",
            "--config",
            "sim.json",
            "--schedule",
            "straight.csv",
            "--out",
            "log.csv",
        ],
    );
    let out = drive(
        dir,
        &[
            "train",
            "--log",
            "log.csv",
            "--config",
            "sim.json",
            "--out",
            "model.json",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("excitation"));
}

#[test]
fn malformed_log_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["init-config", "--out", "sim.json"]);
    let header = io::LOG_COLUMNS.join(",");
    fs::write(
        dir.join("bad.csv"),
        format!("{header}\n0,0,0,0,0,0,0,0,0,T\n0.05,0,0,0,0,zero,0,0,0,T\n"),
    )
    .unwrap();
    let out = drive(
        dir,
        &[
            "train",
            "--log",
            "bad.csv",
            "--config",
            "sim.json",
            "--out",
            "model.json",
        ],
    );
    assert_eq!(code(&out), 65);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn config_dir_resolves_relative_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let configs = tmp.path().join("configs");
    let work = tmp.path().join("work");
    fs::create_dir_all(&configs).unwrap();
    fs::create_dir_all(&work).unwrap();
    ok(
        &configs,
        &["init-config", "--terrain", "tile", "--out", "sim.json"],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_drive"))
        .args(["characterize", "--plant", "sim.json", "--out", "space.json"])
        .current_dir(&work)
        .env("DRIVE_CONFIG_DIR", &configs)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(work.join("space.json").exists());
}

#[test]
fn seeds_change_the_session() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gravel_log(dir);
    ok(
        dir,
        &[
            "simulate",
            "--config",
            "sim.json",
            "--schedule",
            "schedule.csv",
            "--seed",
            "8",
            "--out",
            "other.csv",
        ],
    );
    assert_ne!(
        fs::read(dir.join("log.csv")).unwrap(),
        fs::read(dir.join("other.csv")).unwrap()
    );
    let log = io::read_log(fs::File::open(dir.join("log.csv")).unwrap()).unwrap();
    assert_eq!(log.len(), 4800);
}

#[test]
fn raw_wheel_training_differs_from_predicted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gravel_log(dir);
    ok(
        dir,
        &[
            "train", "--log", "log.csv", "--config", "sim.json", "--out", "a.json",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "--log",
            "log.csv",
            "--config",
            "sim.json",
            "--raw-wheels",
            "--out",
            "b.json",
        ],
    );
    let a: io::ModelFile = io::read_json(fs::File::open(dir.join("a.json")).unwrap()).unwrap();
    let b: io::ModelFile = io::read_json(fs::File::open(dir.join("b.json")).unwrap()).unwrap();
    assert_eq!(a.powertrain, b.powertrain);
    assert_ne!(a.posteriors, b.posteriors);
}
