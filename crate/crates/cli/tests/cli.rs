use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn bundled_synthetic_benchmark_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("synthetic-small.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = stgp(&["benchmark", "--config", s(&cfg), "--out-dir", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv = fs::read_to_string(a.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().filter(|r| r.starts_with("forecast")).count(), 6);
    let table = fs::read_to_string(a.join("comparison.txt")).unwrap();
    assert_eq!(table.lines().count(), 2 + 12);
    for f in ["comparison.csv", "sites.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert!(a.join("report.json").exists());
}

#[test]
fn protocol_and_backend_flags_restrict_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("synthetic-small.toml");
    let o = stgp(&[
        "benchmark",
        "--config",
        s(&cfg),
        "--out-dir",
        s(dir.path()),
        "--protocol",
        "forecast",
        "--backend",
        "statespace",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("forecast,statespace,statespace"));
}

#[test]
fn missing_data_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nsensors = \"nowhere/readings.csv\"\n");
    let o = stgp(&["benchmark", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere/readings.csv"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[synth]\nsites = 3\nspikes_per_day = 2\n");
    let o = stgp(&["synth", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("spikes_per_day"), "{}", stderr(&o));
}

#[test]
fn synth_default_size_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = stgp(&["synth", "--out-dir", s(out), "--seed", "5"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let sensors = fs::read_to_string(a.join("sensors.csv")).unwrap();
    assert_eq!(sensors.lines().count(), 1 + 66 * 720);
    for f in ["sensors.csv", "weather.csv", "latent.csv", "synth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("synth.json")).unwrap()).unwrap();
    assert_eq!(meta["spike_rate"], serde_json::json!(0.01));
    assert_eq!(meta["config"]["seed"], serde_json::json!(5));
}

#[test]
fn fit_then_predict_recovers_training_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[data]
min_readings = 10
[synth]
sites = 3
days = 4
noise_std = 0.01
spike_rate = 0.0
[fit]
label = "fit"
periodic = true
repetitions = 1
"#,
    );
    let out = dir.path().join("out");
    let o = stgp(&["synth", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = dir.path().join("model.json");
    let o = stgp(&["fit", "--config", s(&cfg), "--out-dir", s(&out), "--model", s(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));

    // query a few training readings, with weather columns the model ignores
    let sensors = fs::read_to_string(out.join("sensors.csv")).unwrap();
    let weather = fs::read_to_string(out.join("weather.csv")).unwrap();
    let wrows: Vec<&str> = weather.lines().skip(1).collect();
    let mut query = String::from("latitude,longitude,timestamp,windspeed,winddir,windgust,humidity,temp,precip\n");
    let mut truth = Vec::new();
    for line in sensors.lines().skip(1).step_by(37).take(8) {
        let f: Vec<&str> = line.split(',').collect();
        let w = wrows.iter().find(|r| r.starts_with(f[3])).unwrap();
        let wf: Vec<&str> = w.split(',').skip(1).collect();
        query.push_str(&format!("{},{},{},{}\n", f[1], f[2], f[3], wf.join(",")));
        truth.push(f[4].parse::<f64>().unwrap());
    }
    let qpath = dir.path().join("query.csv");
    fs::write(&qpath, query).unwrap();
    let pred = dir.path().join("pred.csv");
    let o = stgp(&[
        "predict",
        "--model",
        s(&model),
        "--query",
        s(&qpath),
        "--output",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "latitude,longitude,timestamp,mean,latent_std,observed_std"
    );
    for (line, t) in lines.zip(&truth) {
        let mean: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((mean - t).abs() < 0.5, "predicted {mean}, observed {t}");
    }
}

#[test]
fn predict_requires_a_model_file() {
    let o = stgp(&["predict", "--query", "q.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_writes_figure_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[synth]\nsites = 4\ndays = 7\n");
    let o = stgp(&["stats", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("morning peak at hour 8"), "{stdout}");
    assert!(stdout.contains("evening peak at hour 21"), "{stdout}");
    let means = fs::read_to_string(dir.path().join("hourly_means.csv")).unwrap();
    assert_eq!(means.lines().filter(|l| l.contains("ALL")).count(), 24);
    assert!(dir.path().join("hourly_boxes.csv").exists());
}
