use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use chrono::{DateTime, TimeDelta, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{ExperimentReport, SiteRmse};
use super::{ExperimentConfig, TrainedModel};
use crate::data::{site_ids, SensorReading};
use crate::error::{GpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Leave one site out; predict its whole series from the others.
    Nowcast,
    /// Hold out the final day at every site.
    Forecast,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Nowcast => "nowcast",
            Protocol::Forecast => "forecast",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSettings {
    /// Length of the forecast window.
    pub forecast_hours: i64,
    /// Last hour of the forecast window; the latest reading when unset.
    pub forecast_end: Option<DateTime<Utc>>,
    /// Worker threads for folds; 0 uses every core.
    pub threads: usize,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        ProtocolSettings {
            forecast_hours: 24,
            forecast_end: None,
            threads: 0,
        }
    }
}

/// Indices into the reading list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub label: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(GpError::input(format!(
            "rmse needs equal non-zero lengths, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let sse: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// One fold per site, in first-appearance order.
pub fn nowcast_folds(readings: &[SensorReading]) -> Result<Vec<Fold>> {
    let sites = site_ids(readings);
    if sites.len() < 2 {
        return Err(GpError::Protocol(format!(
            "leave-one-site-out needs at least 2 sites, found {}",
            sites.len()
        )));
    }
    Ok(sites
        .into_iter()
        .map(|s| {
            let (test, train) = (0..readings.len()).partition(|&i| readings[i].site_id == s);
            Fold {
                label: s,
                train,
                test,
            }
        })
        .collect())
}

/// Train on everything up to the window, test on the window.
pub fn forecast_split(readings: &[SensorReading], settings: &ProtocolSettings) -> Result<Fold> {
    if settings.forecast_hours <= 0 {
        return Err(GpError::input("forecast window must be positive"));
    }
    let days: BTreeSet<_> = readings.iter().map(|r| r.timestamp.date_naive()).collect();
    if days.len() < 2 {
        return Err(GpError::Protocol(format!(
            "forecasting needs readings on at least 2 days, found {}",
            days.len()
        )));
    }
    let end = settings
        .forecast_end
        .unwrap_or_else(|| readings.iter().map(|r| r.timestamp).max().unwrap());
    let start = end - TimeDelta::hours(settings.forecast_hours);
    let mut fold = Fold {
        label: format!("{} to {}", start, end),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in readings.iter().enumerate() {
        if r.timestamp <= start {
            fold.train.push(i);
        } else if r.timestamp <= end {
            fold.test.push(i);
        }
    }
    if fold.test.is_empty() {
        return Err(GpError::Protocol(format!("no readings in the forecast window ending {end}")));
    }
    if fold.train.is_empty() {
        return Err(GpError::Protocol(format!("no training readings before {start}")));
    }
    Ok(fold)
}

pub fn nowcast_loo(
    readings: &[SensorReading],
    config: &ExperimentConfig,
    settings: &ProtocolSettings,
) -> Result<ExperimentReport> {
    run_protocol(readings, config, Protocol::Nowcast, settings)
}

pub fn forecast_holdout(
    readings: &[SensorReading],
    config: &ExperimentConfig,
    settings: &ProtocolSettings,
) -> Result<ExperimentReport> {
    run_protocol(readings, config, Protocol::Forecast, settings)
}

/// Every config under every protocol, in config-major order.
pub fn run_matrix(
    readings: &[SensorReading],
    configs: &[ExperimentConfig],
    protocols: &[Protocol],
    settings: &ProtocolSettings,
) -> Result<Vec<ExperimentReport>> {
    if configs.is_empty() || protocols.is_empty() {
        return Err(GpError::input("experiment matrix needs at least one config and protocol"));
    }
    let mut out = Vec::new();
    for c in configs {
        for &p in protocols {
            log::info!("running {} / {}", c.label, p.name());
            out.push(run_protocol(readings, c, p, settings)?);
        }
    }
    Ok(out)
}

struct JobResult {
    fold: usize,
    rep: usize,
    /// Per-site (count, sum of squared errors).
    sse: HashMap<String, (usize, f64)>,
    seconds: f64,
    outliers_removed: usize,
    duplicates_averaged: usize,
}

fn run_job(
    readings: &[SensorReading],
    fold: &Fold,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(HashMap<String, (usize, f64)>, super::TrainInfo, f64)> {
    let start = Instant::now();
    let train: Vec<SensorReading> = fold.train.iter().map(|&i| readings[i].clone()).collect();
    let test: Vec<SensorReading> = fold.test.iter().map(|&i| readings[i].clone()).collect();
    let (model, info) = TrainedModel::train(&train, config, seed)?;
    let pred = model.predict(&test)?;
    let mut sse: HashMap<String, (usize, f64)> = HashMap::new();
    for (r, p) in test.iter().zip(&pred.mean) {
        let e = sse.entry(r.site_id.clone()).or_default();
        e.0 += 1;
        e.1 += (p - r.pm25).powi(2);
    }
    Ok((sse, info, start.elapsed().as_secs_f64()))
}

pub fn run_protocol(
    readings: &[SensorReading],
    config: &ExperimentConfig,
    protocol: Protocol,
    settings: &ProtocolSettings,
) -> Result<ExperimentReport> {
    config.validate()?;
    let folds = match protocol {
        Protocol::Nowcast => nowcast_folds(readings)?,
        Protocol::Forecast => vec![forecast_split(readings, settings)?],
    };
    if let Some(f) = folds.iter().find(|f| f.train.is_empty()) {
        return Err(GpError::Protocol(format!("fold '{}' has no training data", f.label)));
    }
    let seeds = config.seeds();
    let jobs: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..seeds.len()).map(move |r| (f, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()
        .map_err(|e| GpError::Numerical(format!("cannot start worker threads: {e}")))?;
    let results: Vec<JobResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(f, r)| {
                let (sse, info, seconds) = run_job(readings, &folds[f], config, seeds[r]).map_err(|e| match e {
                    GpError::Protocol(m) => GpError::Protocol(format!("fold '{}': {m}", folds[f].label)),
                    other => other,
                })?;
                Ok(JobResult {
                    fold: f,
                    rep: r,
                    sse,
                    seconds,
                    outliers_removed: info.outliers_removed,
                    duplicates_averaged: info.duplicates_averaged,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let nrep = seeds.len();
    let all_sites = site_ids(readings);
    let mut per_site: HashMap<&str, (usize, Vec<f64>)> = HashMap::new();
    let mut pooled = vec![(0usize, 0.0f64); nrep];
    for j in &results {
        for (site, &(n, sse)) in &j.sse {
            let e = per_site
                .entry(site.as_str())
                .or_insert_with(|| (n, vec![f64::NAN; nrep]));
            e.1[j.rep] = (sse / n as f64).sqrt();
            pooled[j.rep].0 += n;
            pooled[j.rep].1 += sse;
        }
    }
    let mut sites = Vec::new();
    let mut omitted = Vec::new();
    for s in &all_sites {
        match per_site.get(s.as_str()) {
            Some((n, reps)) => sites.push(SiteRmse {
                site_id: s.clone(),
                n_test: *n,
                rmse: reps.iter().sum::<f64>() / nrep as f64,
                per_repetition: reps.clone(),
            }),
            None => omitted.push(s.clone()),
        }
    }
    let mut notes = Vec::new();
    if !omitted.is_empty() {
        notes.push(format!("{} site(s) had no test readings and were omitted", omitted.len()));
    }
    let removed: usize = results.iter().map(|j| j.outliers_removed).sum();
    if config.remove_outliers {
        notes.push(format!("{removed} training outliers removed across {} fits", results.len()));
    }
    let dups: usize = results.iter().map(|j| j.duplicates_averaged).sum();
    if dups > 0 {
        notes.push(format!("{dups} duplicate grid cells averaged across fits"));
    }
    let mut fold_seconds = vec![0.0; results.len()];
    for j in &results {
        fold_seconds[j.fold * nrep + j.rep] = j.seconds;
    }
    Ok(ExperimentReport::new(
        protocol,
        config.clone(),
        sites,
        omitted,
        pooled.iter().map(|&(n, sse)| (sse / n as f64).sqrt()).collect(),
        fold_seconds,
        notes,
    ))
}
