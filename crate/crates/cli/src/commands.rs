use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stgp::data::{
    drop_sparse_sites, format_timestamp, join_weather, load_sensor_csv, load_weather_csv,
    parse_timestamp, summary_stats, synth_generate, write_sensor_csv, write_weather_csv,
    SensorReading, Weather,
};
use stgp::eval::{
    comparison_table, run_matrix, write_comparison_csv, write_json, write_site_csv,
    ExperimentConfig, TrainedModel,
};
use stgp::optim::FitResult;

use crate::config::{BackendChoice, RunConfig};

/// Readings after loading (or generating), weather joining and dropping
/// sparse sites.
pub fn load_readings(cfg: &RunConfig) -> Result<Vec<SensorReading>> {
    let mut readings = match &cfg.data.sensors {
        Some(path) => {
            let (r, report) = load_sensor_csv(path)?;
            log::info!(
                "{}: {} readings, {} rows dropped, {} duplicate hours averaged",
                path.display(),
                r.len(),
                report.dropped(),
                report.duplicates.len()
            );
            r
        }
        None => {
            let synth = cfg.synth();
            log::info!(
                "generating synthetic data: {} sites x {} days, seed {}",
                synth.sites,
                synth.days,
                synth.seed
            );
            synth_generate(&synth)?.readings
        }
    };
    if let Some(path) = &cfg.data.weather {
        let (weather, _) = load_weather_csv(path)?;
        let (joined, report) = join_weather(readings, &weather);
        log::info!("joined weather from {}; {} readings had no weather hour", path.display(), report.dropped);
        readings = joined;
    }
    let (kept, dropped) = drop_sparse_sites(readings, cfg.data.min_readings);
    if !dropped.is_empty() {
        log::info!(
            "dropped {} site(s) with fewer than {} readings: {}",
            dropped.len(),
            cfg.data.min_readings,
            dropped.join(", ")
        );
    }
    if kept.is_empty() {
        bail!("no readings left after dropping sparse sites");
    }
    Ok(kept)
}

fn check_covariates(readings: &[SensorReading], experiments: &[ExperimentConfig]) -> Result<()> {
    if let Some(e) = experiments.iter().find(|e| e.additional_inputs) {
        if readings.iter().any(|r| r.weather.is_none()) {
            bail!(
                "experiment '{}' uses additional inputs but the readings have no weather; set data.weather",
                e.label
            );
        }
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

pub fn benchmark(cfg: &RunConfig, backend: Option<BackendChoice>) -> Result<()> {
    let mut experiments = cfg.experiments();
    if let Some(b) = backend {
        experiments.retain(|e| e.backend == b.backend());
        if experiments.is_empty() {
            bail!("no experiment in the config uses the {:?} backend", b);
        }
    }
    let readings = load_readings(cfg)?;
    check_covariates(&readings, &experiments)?;
    let reports = run_matrix(&readings, &experiments, &cfg.protocol.protocols(), &cfg.settings)?;
    let dir = out_dir(cfg)?;
    let table = comparison_table(&reports);
    write_comparison_csv(dir.join("comparison.csv"), &reports)?;
    write_site_csv(dir.join("sites.csv"), &reports)?;
    write_json(dir.join("report.json"), &reports)?;
    fs::write(dir.join("comparison.txt"), &table).with_context(|| format!("writing {}", dir.display()))?;
    print!("{table}");
    Ok(())
}

/// What `fit` writes and `predict` reads.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: ExperimentConfig,
    pub trained: TrainedModel,
    pub fit: Option<FitResult>,
}

pub fn fit(cfg: &RunConfig, backend: Option<BackendChoice>, model_path: Option<PathBuf>) -> Result<PathBuf> {
    let config = cfg.fit_config(backend);
    config.validate()?;
    let readings = load_readings(cfg)?;
    check_covariates(&readings, std::slice::from_ref(&config))?;
    let seed = config.seeds()[0];
    let (trained, info) = TrainedModel::train(&readings, &config, seed)?;
    if let Some(f) = &info.fit {
        log::info!(
            "fitted {} on {} points: objective {:.4} after {} iterations",
            config.label,
            info.n_train,
            f.objective,
            f.iterations
        );
    }
    let path = match model_path {
        Some(p) => p,
        None => out_dir(cfg)?.join("model.json"),
    };
    let file = ModelFile {
        config,
        trained,
        fit: info.fit,
    };
    let text = serde_json::to_string(&file)?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(path)
}

const COVARIATE_COLUMNS: [&str; 6] = ["windspeed", "winddir", "windgust", "humidity", "temp", "precip"];

/// Query rows: latitude, longitude, timestamp and optionally the six
/// weather columns.
fn read_queries(path: &Path, needs_weather: bool) -> Result<Vec<SensorReading>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let missing: Vec<&str> = ["latitude", "longitude", "timestamp"]
        .into_iter()
        .filter(|c| !col.contains_key(c))
        .collect();
    if !missing.is_empty() {
        bail!("{}: missing columns {}", path.display(), missing.join(", "));
    }
    let present: Vec<&str> = COVARIATE_COLUMNS.into_iter().filter(|c| col.contains_key(c)).collect();
    if needs_weather && present.len() < COVARIATE_COLUMNS.len() {
        let missing: Vec<&str> = COVARIATE_COLUMNS.into_iter().filter(|c| !col.contains_key(c)).collect();
        bail!(
            "{}: model uses weather covariates; missing columns {}",
            path.display(),
            missing.join(", ")
        );
    }
    if !needs_weather && !present.is_empty() {
        log::warn!("model takes no covariates; ignoring columns {}", present.join(", "));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |name: &str| -> Result<f64> {
            let v = rec.get(col[name]).unwrap_or("").trim();
            v.parse()
                .with_context(|| format!("{}:{line}: bad {name} value '{v}'", path.display()))
        };
        let ts = rec.get(col["timestamp"]).unwrap_or("").trim();
        let timestamp = parse_timestamp(ts)
            .with_context(|| format!("{}:{line}: bad timestamp '{ts}'", path.display()))?;
        let weather = if needs_weather {
            Some(Weather {
                wind_speed: num("windspeed")?,
                wind_direction: num("winddir")?,
                wind_gust: num("windgust")?,
                humidity: num("humidity")?,
                temperature: num("temp")?,
                precipitation: num("precip")?,
            })
        } else {
            None
        };
        out.push(SensorReading {
            site_id: col
                .get("site_id")
                .and_then(|&c| rec.get(c))
                .unwrap_or("")
                .to_string(),
            latitude: num("latitude")?,
            longitude: num("longitude")?,
            timestamp,
            pm25: 0.0,
            weather,
        });
    }
    Ok(out)
}

pub fn predict(cfg: &RunConfig, model_path: &Path, query: &Path, output: Option<PathBuf>) -> Result<PathBuf> {
    let text = fs::read_to_string(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let file: ModelFile =
        serde_json::from_str(&text).with_context(|| format!("{} is not a model file", model_path.display()))?;
    let needs_weather = file.trained.normalizer.has_covariates();
    let queries = read_queries(query, needs_weather)?;
    let pred = file.trained.predict(&queries)?;
    let path = match output {
        Some(p) => p,
        None => out_dir(cfg)?.join("predictions.csv"),
    };
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["latitude", "longitude", "timestamp", "mean", "latent_std", "observed_std"])?;
    let (ls, os) = (pred.latent_std(), pred.observed_std());
    for (i, q) in queries.iter().enumerate() {
        w.write_record([
            q.latitude.to_string(),
            q.longitude.to_string(),
            format_timestamp(&q.timestamp),
            format!("{:.6}", pred.mean[i]),
            format!("{:.6}", ls[i]),
            format!("{:.6}", os[i]),
        ])?;
    }
    w.flush()?;
    println!("{}", path.display());
    Ok(path)
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let readings = load_readings(cfg)?;
    let s = summary_stats(&readings, cfg.data.utc_offset_hours);
    let dir = out_dir(cfg)?;
    s.write_boxes_csv(dir.join("hourly_boxes.csv"))?;
    s.write_means_csv(dir.join("hourly_means.csv"))?;
    if let (Some(m), Some(e)) = (s.peak_hour(5..=11), s.peak_hour(17..=23)) {
        println!("morning peak at hour {m}, evening peak at hour {e}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthMeta<'a> {
    config: &'a stgp::data::SynthConfig,
    readings: usize,
    spikes: usize,
    spike_rate: f64,
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let data = synth_generate(&cfg.synth())?;
    let dir = out_dir(cfg)?;
    write_sensor_csv(dir.join("sensors.csv"), &data.readings)?;
    write_weather_csv(dir.join("weather.csv"), &data.weather)?;
    data.write_latent_csv(dir.join("latent.csv"))?;
    let meta = SynthMeta {
        config: &data.config,
        readings: data.readings.len(),
        spikes: data.is_spike.iter().filter(|&&s| s).count(),
        spike_rate: data.config.spike_rate,
    };
    fs::write(dir.join("synth.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("{} readings written to {}", data.readings.len(), dir.display());
    Ok(())
}
