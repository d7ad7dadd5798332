use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use chrono::{TimeDelta, Timelike};
use serde::Serialize;

use super::clean::quantile_sorted;
use super::SensorReading;
use crate::error::{GpError, Result};

/// Box-plot statistics for one site at one hour of the day.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HourBox {
    pub site_id: String,
    pub hour: u32,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Tukey fences at 1.5·IQR.
    pub lower_fence: f64,
    pub upper_fence: f64,
    /// Most extreme values still inside the fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HourlyMean {
    /// `None` for the all-site row.
    pub site_id: Option<String>,
    pub hour: u32,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SummaryStats {
    pub boxes: Vec<HourBox>,
    pub site_means: Vec<HourlyMean>,
    /// Mean over every reading at each hour of the day.
    pub overall_means: Vec<HourlyMean>,
}

fn hour_of(r: &SensorReading, utc_offset_hours: i32) -> u32 {
    (r.timestamp + TimeDelta::hours(utc_offset_hours as i64)).hour()
}

fn box_for(site: &str, hour: u32, values: &mut [f64]) -> HourBox {
    values.sort_by(|a, b| a.total_cmp(b));
    let q1 = quantile_sorted(values, 0.25);
    let q3 = quantile_sorted(values, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = values.iter().copied().filter(|v| *v >= lo && *v <= hi);
    HourBox {
        site_id: site.to_string(),
        hour,
        count: values.len(),
        min: values[0],
        q1,
        median: quantile_sorted(values, 0.5),
        q3,
        max: values[values.len() - 1],
        lower_fence: lo,
        upper_fence: hi,
        whisker_low: inside.clone().fold(f64::INFINITY, f64::min),
        whisker_high: inside.fold(f64::NEG_INFINITY, f64::max),
        outliers: values.iter().copied().filter(|v| *v < lo || *v > hi).collect(),
    }
}

/// Per-site, per-hour-of-day box plots and hourly means. Hours are local
/// time at `utc_offset_hours` from UTC.
pub fn summary_stats(readings: &[SensorReading], utc_offset_hours: i32) -> SummaryStats {
    let mut cells: BTreeMap<(&str, u32), Vec<f64>> = BTreeMap::new();
    let mut overall: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in readings {
        let h = hour_of(r, utc_offset_hours);
        cells.entry((&r.site_id, h)).or_default().push(r.pm25);
        let e = overall.entry(h).or_default();
        e.0 += r.pm25;
        e.1 += 1;
    }
    let mut out = SummaryStats::default();
    for ((site, hour), mut values) in cells {
        out.site_means.push(HourlyMean {
            site_id: Some(site.to_string()),
            hour,
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        });
        out.boxes.push(box_for(site, hour, &mut values));
    }
    out.overall_means = overall
        .into_iter()
        .map(|(hour, (sum, count))| HourlyMean {
            site_id: None,
            hour,
            count,
            mean: sum / count as f64,
        })
        .collect();
    out
}

impl SummaryStats {
    /// Hour with the largest all-site mean among `hours`.
    pub fn peak_hour(&self, hours: std::ops::RangeInclusive<u32>) -> Option<u32> {
        self.overall_means
            .iter()
            .filter(|m| hours.contains(&m.hour))
            .max_by(|a, b| a.mean.total_cmp(&b.mean))
            .map(|m| m.hour)
    }

    /// Columns: `site_id,hour,count,min,q1,median,q3,max,lower_fence,
    /// upper_fence,whisker_low,whisker_high,n_outliers,outliers` where
    /// `outliers` is a `;`-separated list.
    pub fn write_boxes_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| GpError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record([
            "site_id",
            "hour",
            "count",
            "min",
            "q1",
            "median",
            "q3",
            "max",
            "lower_fence",
            "upper_fence",
            "whisker_low",
            "whisker_high",
            "n_outliers",
            "outliers",
        ])?;
        for b in &self.boxes {
            let outliers: Vec<String> = b.outliers.iter().map(|v| v.to_string()).collect();
            w.write_record([
                b.site_id.clone(),
                b.hour.to_string(),
                b.count.to_string(),
                b.min.to_string(),
                b.q1.to_string(),
                b.median.to_string(),
                b.q3.to_string(),
                b.max.to_string(),
                b.lower_fence.to_string(),
                b.upper_fence.to_string(),
                b.whisker_low.to_string(),
                b.whisker_high.to_string(),
                b.outliers.len().to_string(),
                outliers.join(";"),
            ])?;
        }
        w.flush().map_err(|e| GpError::io(path, e))?;
        Ok(())
    }

    /// Columns: `site_id,hour,count,mean`. The all-site rows use `ALL` as the
    /// site id and come last.
    pub fn write_means_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| GpError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["site_id", "hour", "count", "mean"])?;
        for m in self.site_means.iter().chain(&self.overall_means) {
            w.write_record([
                m.site_id.clone().unwrap_or_else(|| "ALL".into()),
                m.hour.to_string(),
                m.count.to_string(),
                m.mean.to_string(),
            ])?;
        }
        w.flush().map_err(|e| GpError::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_timestamp;

    fn hourly(site: &str, days: usize, f: impl Fn(usize) -> f64) -> Vec<SensorReading> {
        let t0 = parse_timestamp("2021-11-01T00:00:00Z").unwrap();
        (0..days * 24)
            .map(|i| SensorReading {
                site_id: site.into(),
                latitude: 0.3,
                longitude: 32.5,
                timestamp: t0 + TimeDelta::hours(i as i64),
                pm25: f(i),
                weather: None,
            })
            .collect()
    }

    #[test]
    fn twin_peaks_are_found() {
        use std::f64::consts::PI;
        let bump = |h: f64, c: f64| (6.0 * (2.0 * PI * (h - c) / 24.0).cos()).exp();
        let r = hourly("a", 7, |i| {
            let h = (i % 24) as f64;
            30.0 + bump(h, 8.0) / 40.0 + bump(h, 21.0) / 40.0
        });
        let s = summary_stats(&r, 0);
        assert_eq!(s.peak_hour(0..=14), Some(8));
        assert_eq!(s.peak_hour(15..=23), Some(21));
    }

    #[test]
    fn constant_data_has_flat_boxes() {
        let s = summary_stats(&hourly("a", 3, |_| 12.0), 0);
        assert_eq!(s.boxes.len(), 24);
        for b in &s.boxes {
            assert_eq!((b.q1, b.median, b.q3), (12.0, 12.0, 12.0));
            assert!(b.outliers.is_empty());
        }
    }

    #[test]
    fn single_reading_per_hour_is_its_own_mean() {
        let s = summary_stats(&hourly("a", 1, |i| i as f64 * 2.0), 0);
        for m in &s.overall_means {
            assert_eq!(m.count, 1);
            assert_eq!(m.mean, m.hour as f64 * 2.0);
        }
    }

    #[test]
    fn offset_shifts_hours() {
        let s = summary_stats(&hourly("a", 1, |i| i as f64), 3);
        let m = s.overall_means.iter().find(|m| m.hour == 3).unwrap();
        assert_eq!(m.mean, 0.0);
    }

    #[test]
    fn outliers_listed_and_csv_written() {
        let r = hourly("a", 8, |i| if i == 24 * 5 { 500.0 } else { (i / 24) as f64 });
        let s = summary_stats(&r, 0);
        let b = s.boxes.iter().find(|b| b.hour == 0).unwrap();
        assert_eq!(b.outliers, vec![500.0]);
        assert_eq!(b.whisker_high, 7.0);
        let dir = tempfile::tempdir().unwrap();
        s.write_boxes_csv(dir.path().join("b.csv")).unwrap();
        s.write_means_csv(dir.path().join("m.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 24 + 24);
    }
}
