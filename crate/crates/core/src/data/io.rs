use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, DurationRound, NaiveDateTime, TimeDelta, Utc};

use super::SensorReading;
use crate::error::{GpError, Result};

pub const SENSOR_COLUMNS: [&str; 5] = ["site_id", "latitude", "longitude", "timestamp", "pm2_5"];

/// What `load_sensor_csv` dropped or merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows_read: usize,
    /// Rows whose pm2_5 field was empty or not a number.
    pub dropped_missing_pm25: usize,
    /// Rows whose pm2_5 was negative or non-finite.
    pub dropped_invalid_pm25: usize,
    /// (site, hour) keys that had more than one row and were averaged.
    pub duplicates: Vec<(String, DateTime<Utc>)>,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.dropped_missing_pm25 + self.dropped_invalid_pm25
    }
}

/// Parse an ISO-8601 timestamp. Offsets are converted to UTC; naive
/// timestamps are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    const NAIVE: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
    ];
    NAIVE
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc())
}

pub fn floor_to_hour(t: DateTime<Utc>) -> DateTime<Utc> {
    t.duration_trunc(TimeDelta::hours(1)).expect("hour truncation")
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn load_sensor_csv(path: impl AsRef<Path>) -> Result<(Vec<SensorReading>, LoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GpError::io(path, e))?;
    read_sensor_csv(file, path)
}

fn format_err(path: &Path, line: u64, message: impl Into<String>) -> GpError {
    GpError::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parse a sensor CSV (`site_id,latitude,longitude,timestamp,pm2_5`; extra
/// columns ignored). Timestamps are floored to the hour and duplicate
/// (site, hour) rows are averaged. Output is sorted by site then time.
pub fn read_sensor_csv<R: Read>(
    reader: R,
    source: impl Into<PathBuf>,
) -> Result<(Vec<SensorReading>, LoadReport)> {
    let source = source.into();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(GpError::input(format!("{}: empty file", source.display())));
    }
    let mut idx = [0usize; 5];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(SENSOR_COLUMNS) {
        match headers.iter().position(|h| h == name) {
            Some(i) => *slot = i,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(format_err(
            &source,
            1,
            format!("header is missing column(s): {}", missing.join(", ")),
        ));
    }
    let [i_site, i_lat, i_lon, i_ts, i_pm] = idx;

    let mut report = LoadReport::default();
    // (site, hour) -> (lat, lon, sum, count)
    let mut cells: BTreeMap<(String, DateTime<Utc>), (f64, f64, f64, usize)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        report.rows_read += 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let site = field(i_site);
        if site.is_empty() {
            return Err(format_err(&source, line, "empty site_id"));
        }
        let lat: f64 = field(i_lat)
            .parse()
            .map_err(|_| format_err(&source, line, format!("bad latitude {:?}", field(i_lat))))?;
        let lon: f64 = field(i_lon).parse().map_err(|_| {
            format_err(&source, line, format!("bad longitude {:?}", field(i_lon)))
        })?;
        let ts = parse_timestamp(field(i_ts)).ok_or_else(|| {
            format_err(
                &source,
                line,
                format!("timestamp {:?} is not ISO-8601", field(i_ts)),
            )
        })?;
        let pm: f64 = match field(i_pm).parse() {
            Ok(v) => v,
            Err(_) => {
                report.dropped_missing_pm25 += 1;
                continue;
            }
        };
        if !pm.is_finite() || pm < 0.0 {
            report.dropped_invalid_pm25 += 1;
            continue;
        }
        let cell = cells
            .entry((site.to_string(), floor_to_hour(ts)))
            .or_insert((lat, lon, 0.0, 0));
        cell.2 += pm;
        cell.3 += 1;
    }
    if report.rows_read == 0 {
        return Err(GpError::input(format!(
            "{}: no data rows",
            source.display()
        )));
    }

    let mut readings = Vec::with_capacity(cells.len());
    for ((site, ts), (lat, lon, sum, count)) in cells {
        if count > 1 {
            report.duplicates.push((site.clone(), ts));
        }
        readings.push(SensorReading {
            site_id: site,
            latitude: lat,
            longitude: lon,
            timestamp: ts,
            pm25: sum / count as f64,
            weather: None,
        });
    }
    Ok((readings, report))
}

pub fn write_sensor_csv(path: impl AsRef<Path>, readings: &[SensorReading]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GpError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(SENSOR_COLUMNS)?;
    for r in readings {
        w.write_record([
            r.site_id.clone(),
            r.latitude.to_string(),
            r.longitude.to_string(),
            format_timestamp(&r.timestamp),
            r.pm25.to_string(),
        ])?;
    }
    w.flush().map_err(|e| GpError::io(path, e))?;
    Ok(())
}
