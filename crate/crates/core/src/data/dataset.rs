use chrono::{DateTime, Utc};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SensorReading;
use crate::error::{GpError, Result};

/// Input columns in their fixed order. Wind direction enters as a sine/cosine
/// pair so that 359° and 1° are neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Latitude,
    Longitude,
    /// Hours since the dataset's first reading.
    Time,
    WindSpeed,
    WindDirSin,
    WindDirCos,
    WindGust,
    Humidity,
    Temperature,
    Precipitation,
}

impl Column {
    pub const BASE: [Column; 3] = [Column::Latitude, Column::Longitude, Column::Time];
    pub const COVARIATES: [Column; 7] = [
        Column::WindSpeed,
        Column::WindDirSin,
        Column::WindDirCos,
        Column::WindGust,
        Column::Humidity,
        Column::Temperature,
        Column::Precipitation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Column::Latitude => "latitude",
            Column::Longitude => "longitude",
            Column::Time => "time",
            Column::WindSpeed => "windspeed",
            Column::WindDirSin => "winddir_sin",
            Column::WindDirCos => "winddir_cos",
            Column::WindGust => "windgust",
            Column::Humidity => "humidity",
            Column::Temperature => "temp",
            Column::Precipitation => "precip",
        }
    }

    pub fn is_covariate(&self) -> bool {
        !Column::BASE.contains(self)
    }
}

/// Per-column z-score statistics plus the target's, fitted on a training
/// set and reused for anything predicted from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub columns: Vec<Column>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
    pub time_origin: DateTime<Utc>,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
    (mean, scale)
}

impl Normalizer {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn has_covariates(&self) -> bool {
        self.columns.iter().any(|c| c.is_covariate())
    }

    pub fn column_index(&self, c: Column) -> Option<usize> {
        self.columns.iter().position(|&x| x == c)
    }

    /// Scale of the time column in hours per normalized unit.
    pub fn time_scale(&self) -> f64 {
        self.column_index(Column::Time)
            .map(|i| self.input_scale[i])
            .unwrap_or(1.0)
    }

    pub fn hours_since_origin(&self, t: &DateTime<Utc>) -> f64 {
        (*t - self.time_origin).num_seconds() as f64 / 3600.0
    }

    /// Unnormalized feature vector for one reading.
    pub fn raw_features(&self, r: &SensorReading) -> Result<Vec<f64>> {
        self.columns
            .iter()
            .map(|c| {
                let w = || {
                    r.weather.ok_or_else(|| {
                        GpError::input(format!(
                            "reading for site {} at {} has no weather covariates",
                            r.site_id, r.timestamp
                        ))
                    })
                };
                Ok(match c {
                    Column::Latitude => r.latitude,
                    Column::Longitude => r.longitude,
                    Column::Time => self.hours_since_origin(&r.timestamp),
                    Column::WindSpeed => w()?.wind_speed,
                    Column::WindDirSin => w()?.wind_direction_sin(),
                    Column::WindDirCos => w()?.wind_direction_cos(),
                    Column::WindGust => w()?.wind_gust,
                    Column::Humidity => w()?.humidity,
                    Column::Temperature => w()?.temperature,
                    Column::Precipitation => w()?.precipitation,
                })
            })
            .collect()
    }

    /// Normalized design matrix for `readings`.
    pub fn encode(&self, readings: &[SensorReading]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut x = DMatrix::zeros(readings.len(), d);
        for (i, r) in readings.iter().enumerate() {
            for (j, v) in self.raw_features(r)?.into_iter().enumerate() {
                x[(i, j)] = (v - self.input_mean[j]) / self.input_scale[j];
            }
        }
        Ok(x)
    }

    pub fn normalize_inputs(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, j| {
            (raw[(i, j)] - self.input_mean[j]) / self.input_scale[j]
        })
    }

    pub fn denormalize_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            x[(i, j)] * self.input_scale[j] + self.input_mean[j]
        })
    }

    pub fn normalize_target(&self, v: f64) -> f64 {
        (v - self.target_mean) / self.target_scale
    }

    pub fn denormalize_target(&self, v: f64) -> f64 {
        v * self.target_scale + self.target_mean
    }
}

/// Design matrix, standardized targets and the statistics that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub normalizer: Normalizer,
    /// Per-row index into `site_ids`.
    pub sites: Vec<usize>,
    pub site_ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn schema(&self) -> Vec<&'static str> {
        self.normalizer.columns.iter().map(|c| c.name()).collect()
    }

    /// Rows `idx` in the given order; normalization statistics are kept.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            normalizer: self.normalizer.clone(),
            sites: idx.iter().map(|&i| self.sites[i]).collect(),
            site_ids: self.site_ids.clone(),
        }
    }

    /// Uniform sample of `n` rows without replacement, deterministic per seed.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(GpError::input(format!(
                "cannot subsample {n} rows from a dataset of {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        Ok(self.select_rows(&idx))
    }
}

/// Z-score every input column and the target. Inputs are latitude,
/// longitude and hours since the first reading, followed by the weather
/// covariates when `include_covariates` is set.
pub fn build_dataset(readings: &[SensorReading], include_covariates: bool) -> Result<Dataset> {
    if readings.is_empty() {
        return Err(GpError::input("cannot build a dataset from zero readings"));
    }
    let mut columns = Column::BASE.to_vec();
    if include_covariates {
        columns.extend(Column::COVARIATES);
    }
    let time_origin = readings.iter().map(|r| r.timestamp).min().unwrap();
    let d = columns.len();
    let mut proto = Normalizer {
        columns,
        input_mean: vec![0.0; d],
        input_scale: vec![1.0; d],
        target_mean: 0.0,
        target_scale: 1.0,
        time_origin,
    };
    let raw: Vec<Vec<f64>> = readings
        .iter()
        .map(|r| proto.raw_features(r))
        .collect::<Result<_>>()?;
    for j in 0..d {
        let (m, s) = mean_and_scale(raw.iter().map(|row| row[j]));
        proto.input_mean[j] = m;
        proto.input_scale[j] = s;
    }
    let (tm, ts) = mean_and_scale(readings.iter().map(|r| r.pm25));
    proto.target_mean = tm;
    proto.target_scale = ts;

    let n = readings.len();
    let x = DMatrix::from_fn(n, d, |i, j| {
        (raw[i][j] - proto.input_mean[j]) / proto.input_scale[j]
    });
    let y = DVector::from_fn(n, |i, _| proto.normalize_target(readings[i].pm25));
    let site_ids = super::site_ids(readings);
    let lookup: std::collections::HashMap<&str, usize> = site_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let sites = readings.iter().map(|r| lookup[r.site_id.as_str()]).collect();
    Ok(Dataset {
        x,
        y,
        normalizer: proto,
        sites,
        site_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_timestamp, Weather};

    fn sample_readings(with_weather: bool) -> Vec<SensorReading> {
        let t0 = parse_timestamp("2021-11-01T00:00:00Z").unwrap();
        (0..40)
            .map(|i| SensorReading {
                site_id: format!("s{}", i % 4),
                latitude: 0.3 + 0.01 * (i % 4) as f64,
                longitude: 32.5 + 0.02 * (i % 3) as f64,
                timestamp: t0 + chrono::TimeDelta::hours(i as i64 / 4),
                pm25: 20.0 + (i as f64 * 0.7).sin() * 8.0,
                weather: with_weather.then_some(Weather {
                    wind_speed: 5.0 + i as f64 * 0.1,
                    wind_direction: (i * 37 % 360) as f64,
                    wind_gust: 9.0 + (i % 5) as f64,
                    humidity: 60.0 + (i % 7) as f64,
                    temperature: 22.0 + (i % 3) as f64,
                    precipitation: 0.0,
                }),
            })
            .collect()
    }

    #[test]
    fn columns_are_standardized() {
        let ds = build_dataset(&sample_readings(true), true).unwrap();
        assert_eq!(ds.dim(), 10);
        assert_eq!(ds.schema().len(), ds.dim());
        for j in 0..ds.dim() {
            let col = ds.x.column(j);
            let mean = col.mean();
            assert!(mean.abs() <= 1e-10, "column {j} mean {mean}");
            // precipitation is constant: left at scale 1 and centred
            if ds.normalizer.columns[j] != Column::Precipitation {
                let sd = (col.map(|v| v * v).mean()).sqrt();
                assert!((sd - 1.0).abs() <= 1e-10, "column {j} sd {sd}");
            }
        }
        assert!(ds.y.mean().abs() <= 1e-10);
    }

    #[test]
    fn base_inputs_only_without_covariates() {
        let ds = build_dataset(&sample_readings(false), false).unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.schema(), vec!["latitude", "longitude", "time"]);
        assert!(build_dataset(&sample_readings(false), true).is_err());
        assert!(build_dataset(&[], false).is_err());
    }

    #[test]
    fn denormalization_round_trips() {
        let readings = sample_readings(true);
        let ds = build_dataset(&readings, true).unwrap();
        let back = ds.normalizer.denormalize_inputs(&ds.x);
        for (i, r) in readings.iter().enumerate() {
            let raw = ds.normalizer.raw_features(r).unwrap();
            for j in 0..ds.dim() {
                assert!((back[(i, j)] - raw[j]).abs() <= 1e-10);
            }
            let y = ds.normalizer.denormalize_target(ds.y[i]);
            assert!((y - r.pm25).abs() <= 1e-10);
        }
        let again = ds.normalizer.normalize_inputs(&back);
        assert!((again - &ds.x).amax() <= 1e-10);
        assert_eq!(ds.normalizer.encode(&readings).unwrap(), ds.x);
    }

    #[test]
    fn subsample_properties() {
        let ds = build_dataset(&sample_readings(false), false).unwrap();
        let all = ds.subsample(ds.len(), 3).unwrap();
        assert_eq!(all, ds);
        let a = ds.subsample(10, 42).unwrap();
        let b = ds.subsample(10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.normalizer, ds.normalizer);
        assert!(ds.subsample(41, 0).is_err());
    }
}
