use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};

use super::io::{floor_to_hour, format_timestamp, parse_timestamp};
use super::{SensorReading, Weather};
use crate::error::{GpError, Result};

pub const WEATHER_COLUMNS: [&str; 7] = [
    "timestamp",
    "windspeed",
    "winddir",
    "windgust",
    "humidity",
    "temp",
    "precip",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherRecord {
    pub timestamp: DateTime<Utc>,
    pub weather: Weather,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JoinReport {
    /// Readings whose hour had no weather row.
    pub dropped: usize,
    /// Weather rows skipped while loading because a field was empty or bad.
    pub incomplete_weather_rows: usize,
}

pub fn load_weather_csv(path: impl AsRef<Path>) -> Result<(Vec<WeatherRecord>, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GpError::io(path, e))?;
    read_weather_csv(file, path)
}

/// Parse an hourly single-station weather CSV. Rows with an empty or
/// unparseable covariate are skipped and counted; a repeated hour is a
/// format error.
pub fn read_weather_csv<R: Read>(
    reader: R,
    source: impl Into<PathBuf>,
) -> Result<(Vec<WeatherRecord>, usize)> {
    let source = source.into();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 7];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(WEATHER_COLUMNS) {
        match headers.iter().position(|h| h == name) {
            Some(i) => *slot = i,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(GpError::Format {
            path: source,
            line: 1,
            message: format!("weather header is missing column(s): {}", missing.join(", ")),
        });
    }
    let mut by_hour: BTreeMap<DateTime<Utc>, Weather> = BTreeMap::new();
    let mut skipped = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let ts = parse_timestamp(field(0)).ok_or_else(|| GpError::Format {
            path: source.clone(),
            line,
            message: format!("timestamp {:?} is not ISO-8601", field(0)),
        })?;
        let nums: Option<Vec<f64>> = (1..7)
            .map(|i| field(i).parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        let Some(v) = nums else {
            skipped += 1;
            continue;
        };
        let hour = floor_to_hour(ts);
        let w = Weather {
            wind_speed: v[0],
            wind_direction: v[1],
            wind_gust: v[2],
            humidity: v[3],
            temperature: v[4],
            precipitation: v[5],
        };
        if by_hour.insert(hour, w).is_some() {
            return Err(GpError::Format {
                path: source,
                line,
                message: format!("duplicate weather hour {}", format_timestamp(&hour)),
            });
        }
    }
    Ok((
        by_hour
            .into_iter()
            .map(|(timestamp, weather)| WeatherRecord { timestamp, weather })
            .collect(),
        skipped,
    ))
}

pub fn write_weather_csv(path: impl AsRef<Path>, records: &[WeatherRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GpError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(WEATHER_COLUMNS)?;
    for r in records {
        let x = &r.weather;
        w.write_record([
            format_timestamp(&r.timestamp),
            x.wind_speed.to_string(),
            x.wind_direction.to_string(),
            x.wind_gust.to_string(),
            x.humidity.to_string(),
            x.temperature.to_string(),
            x.precipitation.to_string(),
        ])?;
    }
    w.flush().map_err(|e| GpError::io(path, e))?;
    Ok(())
}

/// Attach the station's covariates for each reading's hour (one station,
/// broadcast to every site). Readings without a matching hour are dropped.
pub fn join_weather(
    readings: Vec<SensorReading>,
    weather: &[WeatherRecord],
) -> (Vec<SensorReading>, JoinReport) {
    let by_hour: BTreeMap<DateTime<Utc>, Weather> =
        weather.iter().map(|w| (w.timestamp, w.weather)).collect();
    let mut report = JoinReport::default();
    let joined = readings
        .into_iter()
        .filter_map(|mut r| match by_hour.get(&r.timestamp) {
            Some(w) => {
                r.weather = Some(*w);
                Some(r)
            }
            None => {
                report.dropped += 1;
                None
            }
        })
        .collect();
    (joined, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sensor(hours: &[i64]) -> Vec<SensorReading> {
        let t0 = parse_timestamp("2021-11-01T00:00:00Z").unwrap();
        let mut out = Vec::new();
        for site in ["a", "b"] {
            for &h in hours {
                out.push(SensorReading {
                    site_id: site.into(),
                    latitude: 0.3,
                    longitude: 32.5,
                    timestamp: t0 + chrono::TimeDelta::hours(h),
                    pm25: 10.0,
                    weather: None,
                });
            }
        }
        out
    }

    const CSV: &str = "timestamp,windspeed,winddir,windgust,humidity,temp,precip\n\
        2021-11-01T00:00:00Z,10,90,15,70,22,0\n\
        2021-11-01T01:00:00Z,11,180,16,71,23,0.2\n\
        2021-11-01T02:00:00Z,12,0,17,72,24,\n";

    #[test]
    fn incomplete_rows_are_skipped() {
        let (w, skipped) = read_weather_csv(CSV.as_bytes(), "w.csv").unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn full_coverage_joins_everything() {
        let (w, _) = read_weather_csv(CSV.as_bytes(), "w.csv").unwrap();
        let (joined, rep) = join_weather(sensor(&[0, 1]), &w);
        assert_eq!(rep.dropped, 0);
        assert_eq!(joined.len(), 4);
        assert!(joined.iter().all(|r| r.weather.is_some()));
    }

    #[test]
    fn missing_hour_drops_exactly_that_hour() {
        let (w, _) = read_weather_csv(CSV.as_bytes(), "w.csv").unwrap();
        let (joined, rep) = join_weather(sensor(&[0, 1, 2]), &w);
        assert_eq!(rep.dropped, 2);
        assert!(joined.iter().all(|r| r.timestamp.format("%H").to_string() != "02"));
    }

    #[test]
    fn wind_direction_keeps_degrees_and_encodes_circularly() {
        let (w, _) = read_weather_csv(CSV.as_bytes(), "w.csv").unwrap();
        let (joined, _) = join_weather(sensor(&[0]), &w);
        let x = joined[0].weather.unwrap();
        assert_eq!(x.wind_direction, 90.0);
        assert!((x.wind_direction_sin() - 1.0).abs() < 1e-15);
        assert!(x.wind_direction_cos().abs() < 1e-15);
    }

    #[test]
    fn duplicate_hours_are_rejected() {
        let csv = "timestamp,windspeed,winddir,windgust,humidity,temp,precip\n\
            2021-11-01T00:00:00Z,1,1,1,1,1,1\n2021-11-01T00:30:00Z,1,1,1,1,1,1\n";
        assert!(matches!(
            read_weather_csv(csv.as_bytes(), "w.csv"),
            Err(GpError::Format { line: 3, .. })
        ));
    }
}
