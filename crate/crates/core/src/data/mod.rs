//! Sensor readings and everything between the raw CSV files and the design
//! matrix the models train on.

mod clean;
mod dataset;
mod io;
mod stats;
mod synth;
mod weather;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use clean::{
    apply_fences, drop_sparse_sites, quantile_sorted, remove_outliers, GroupFences, OutlierMode,
    OutlierOptions, OutlierReport, OutlierScope,
};
pub use dataset::{build_dataset, Column, Dataset, Normalizer};
pub use io::{
    floor_to_hour, format_timestamp, load_sensor_csv, parse_timestamp, read_sensor_csv,
    write_sensor_csv, LoadReport,
};
pub use stats::{summary_stats, HourBox, HourlyMean, SummaryStats};
pub use synth::{synth_generate, SynthConfig, SynthData};
pub use weather::{
    join_weather, load_weather_csv, read_weather_csv, write_weather_csv, JoinReport,
    WeatherRecord,
};

/// Hourly covariates from a single city-wide weather station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    /// km/h
    pub wind_speed: f64,
    /// degrees clockwise from north
    pub wind_direction: f64,
    /// km/h
    pub wind_gust: f64,
    /// percent
    pub humidity: f64,
    /// °C
    pub temperature: f64,
    /// mm
    pub precipitation: f64,
}

impl Weather {
    pub fn wind_direction_sin(&self) -> f64 {
        self.wind_direction.to_radians().sin()
    }

    pub fn wind_direction_cos(&self) -> f64 {
        self.wind_direction.to_radians().cos()
    }
}

/// One calibrated PM2.5 observation (µg/m³) at a site, aligned to the hour.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorReading {
    pub site_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub timestamp: DateTime<Utc>,
    pub pm25: f64,
    pub weather: Option<Weather>,
}

/// Distinct site ids in first-appearance order.
pub fn site_ids(readings: &[SensorReading]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    readings
        .iter()
        .filter(|r| seen.insert(r.site_id.as_str()))
        .map(|r| r.site_id.clone())
        .collect()
}
