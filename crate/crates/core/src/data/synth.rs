use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use chrono::{DateTime, TimeDelta, Utc};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::io::{format_timestamp, parse_timestamp};
use super::weather::WeatherRecord;
use super::{SensorReading, Weather};
use crate::error::{GpError, Result};
use crate::linalg::cholesky_jittered;

/// Generator settings for a synthetic sensor network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sites: usize,
    pub days: usize,
    pub seed: u64,
    pub start: DateTime<Utc>,
    /// Mean level, µg/m³.
    pub base_level: f64,
    /// Variance of the static spatial field.
    pub spatial_variance: f64,
    /// Lengthscale of the spatial field in degrees.
    pub spatial_lengthscale: f64,
    /// Height of the morning and evening rush-hour peaks.
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    /// Additive effect per km/h of wind speed above its mean.
    pub wind_effect: f64,
    pub noise_std: f64,
    /// Expected spikes per site per hour.
    pub spike_rate: f64,
    /// Minimum spike height; an exponential excess with the same mean is added.
    pub spike_scale: f64,
    /// Fraction of (site, hour) cells left unobserved.
    pub missing_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sites: 66,
            days: 30,
            seed: 0,
            start: parse_timestamp("2021-11-01T00:00:00Z").unwrap(),
            base_level: 40.0,
            spatial_variance: 25.0,
            spatial_lengthscale: 0.05,
            daily_amplitude: 20.0,
            weekly_amplitude: 6.0,
            wind_effect: -0.4,
            noise_std: 3.0,
            spike_rate: 0.01,
            spike_scale: 60.0,
            missing_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub readings: Vec<SensorReading>,
    /// Noise- and spike-free value behind each reading.
    pub latent: Vec<f64>,
    pub is_spike: Vec<bool>,
    pub weather: Vec<WeatherRecord>,
    pub config: SynthConfig,
}

const LAT_RANGE: (f64, f64) = (0.25, 0.42);
const LON_RANGE: (f64, f64) = (32.50, 32.68);
const PEAK_HOURS: [f64; 2] = [8.0, 21.0];
const PEAK_CONCENTRATION: f64 = 6.0;

/// Daily shape in [0, 1]: two von Mises bumps at the rush hours.
pub(crate) fn daily_profile(hour: f64) -> f64 {
    PEAK_HOURS
        .iter()
        .map(|c| (PEAK_CONCENTRATION * ((2.0 * PI * (hour - c) / 24.0).cos() - 1.0)).exp())
        .sum::<f64>()
        .min(1.0)
}

fn weekly_profile(hour: f64) -> f64 {
    (2.0 * PI * hour / 168.0).cos()
}

fn synth_weather(rng: &mut ChaCha8Rng, hours: usize, start: DateTime<Utc>) -> Vec<WeatherRecord> {
    let mut speed = 10.0;
    let mut dir: f64 = 120.0;
    (0..hours)
        .map(|t| {
            let h = (t % 24) as f64;
            let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            speed = (0.9 * speed + 0.1 * 10.0 + 1.5 * z[0]).max(0.0);
            dir = (dir + 15.0 * z[1]).rem_euclid(360.0);
            let temp = 22.0 + 5.0 * (2.0 * PI * (h - 14.0) / 24.0).cos() + 0.5 * z[2];
            let humidity = (75.0 - 2.0 * (temp - 22.0) + 3.0 * z[3]).clamp(5.0, 100.0);
            let precip = if rng.random::<f64>() < 0.05 {
                rng.random::<f64>() * 4.0
            } else {
                0.0
            };
            WeatherRecord {
                timestamp: start + TimeDelta::hours(t as i64),
                weather: Weather {
                    wind_speed: speed,
                    wind_direction: dir,
                    wind_gust: speed * 1.5 + rng.random::<f64>() * 3.0,
                    humidity,
                    temperature: temp,
                    precipitation: precip,
                },
            }
        })
        .collect()
}

/// Sample a synthetic network: a static spatial SE field over random sites
/// in a small bounding box, daily and weekly cycles, a wind-speed effect,
/// Gaussian noise and Poisson-timed positive spikes. Deterministic per seed.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    let c = config;
    if c.sites == 0 || c.days == 0 {
        return Err(GpError::input("synthetic data needs at least one site and one day"));
    }
    if !(0.0..1.0).contains(&c.missing_fraction) {
        return Err(GpError::input("missing_fraction must be in [0, 1)"));
    }
    if !(c.spike_rate >= 0.0 && c.noise_std >= 0.0 && c.spatial_lengthscale > 0.0) {
        return Err(GpError::input(
            "spike_rate and noise_std must be non-negative and spatial_lengthscale positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let s = c.sites;
    let hours = c.days * 24;

    let locs: Vec<(f64, f64)> = (0..s)
        .map(|_| {
            (
                rng.random_range(LAT_RANGE.0..LAT_RANGE.1),
                rng.random_range(LON_RANGE.0..LON_RANGE.1),
            )
        })
        .collect();
    let k = DMatrix::from_fn(s, s, |i, j| {
        let d2 = (locs[i].0 - locs[j].0).powi(2) + (locs[i].1 - locs[j].1).powi(2);
        c.spatial_variance * (-0.5 * d2 / c.spatial_lengthscale.powi(2)).exp()
    });
    let z = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
    let field = if c.spatial_variance > 0.0 {
        cholesky_jittered(&k)?.l() * z
    } else {
        DVector::zeros(s)
    };

    let weather = synth_weather(&mut rng, hours, c.start);
    let mean_speed = weather.iter().map(|w| w.weather.wind_speed).sum::<f64>() / hours as f64;

    let noise = Normal::new(0.0, c.noise_std).map_err(|e| GpError::input(e.to_string()))?;
    let excess = Exp::new(1.0 / c.spike_scale.max(1e-12)).map_err(|e| GpError::input(e.to_string()))?;
    let mut spikes = vec![vec![0.0; hours]; s];
    if c.spike_rate > 0.0 {
        let gap = Exp::new(c.spike_rate).map_err(|e| GpError::input(e.to_string()))?;
        for row in spikes.iter_mut() {
            let mut t = gap.sample(&mut rng);
            while t < hours as f64 {
                row[t as usize] += c.spike_scale + excess.sample(&mut rng);
                t += gap.sample(&mut rng);
            }
        }
    }

    let mut data = SynthData {
        readings: Vec::with_capacity(s * hours),
        latent: Vec::with_capacity(s * hours),
        is_spike: Vec::with_capacity(s * hours),
        weather,
        config: c.clone(),
    };
    let width = (s - 1).to_string().len().max(2);
    for site in 0..s {
        for t in 0..hours {
            let eps = noise.sample(&mut rng);
            let missing = rng.random::<f64>() < c.missing_fraction;
            if missing {
                continue;
            }
            let w = &data.weather[t].weather;
            let h = t as f64;
            let latent = c.base_level
                + field[site]
                + c.daily_amplitude * daily_profile(h % 24.0)
                + c.weekly_amplitude * weekly_profile(h)
                + c.wind_effect * (w.wind_speed - mean_speed);
            let spike = spikes[site][t];
            data.readings.push(SensorReading {
                site_id: format!("site{site:0width$}"),
                latitude: locs[site].0,
                longitude: locs[site].1,
                timestamp: c.start + TimeDelta::hours(t as i64),
                pm25: (latent + eps + spike).max(0.0),
                weather: Some(*w),
            });
            data.latent.push(latent);
            data.is_spike.push(spike > 0.0);
        }
    }
    Ok(data)
}

impl SynthData {
    /// Columns: `site_id,latitude,longitude,timestamp,latent,pm2_5,spike`.
    pub fn write_latent_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| GpError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record([
            "site_id",
            "latitude",
            "longitude",
            "timestamp",
            "latent",
            "pm2_5",
            "spike",
        ])?;
        for ((r, l), sp) in self.readings.iter().zip(&self.latent).zip(&self.is_spike) {
            w.write_record([
                r.site_id.clone(),
                r.latitude.to_string(),
                r.longitude.to_string(),
                format_timestamp(&r.timestamp),
                l.to_string(),
                r.pm25.to_string(),
                (*sp as u8).to_string(),
            ])?;
        }
        w.flush().map_err(|e| GpError::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        assert_eq!(d.readings.len(), 66 * 720);
        assert_eq!(crate::data::site_ids(&d.readings).len(), 66);
        assert_eq!(d.weather.len(), 720);
        assert!(d.is_spike.iter().any(|&b| b));
    }

    #[test]
    fn no_spikes_means_gaussian_residuals() {
        let cfg = SynthConfig {
            sites: 10,
            days: 42,
            spike_rate: 0.0,
            seed: 9,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        assert!(d.readings.len() >= 10_000);
        let worst = d
            .readings
            .iter()
            .zip(&d.latent)
            .map(|(r, l)| (r.pm25 - l).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 5.0 * cfg.noise_std, "worst residual {worst}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            sites: 5,
            days: 3,
            missing_fraction: 0.2,
            ..Default::default()
        };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = synth_generate(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(other.readings, synth_generate(&cfg).unwrap().readings);
    }

    #[test]
    fn single_site_has_no_spatial_structure() {
        let cfg = SynthConfig {
            sites: 1,
            days: 2,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        assert_eq!(crate::data::site_ids(&d.readings), vec!["site00".to_string()]);
        let (lat, lon) = (d.readings[0].latitude, d.readings[0].longitude);
        assert!(d.readings.iter().all(|r| r.latitude == lat && r.longitude == lon));
    }

    #[test]
    fn missing_fraction_thins_cells() {
        let cfg = SynthConfig {
            sites: 20,
            days: 10,
            missing_fraction: 0.5,
            ..Default::default()
        };
        let n = synth_generate(&cfg).unwrap().readings.len() as f64;
        assert!((n / 4800.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(synth_generate(&SynthConfig { sites: 0, ..Default::default() }).is_err());
        assert!(synth_generate(&SynthConfig { days: 0, ..Default::default() }).is_err());
        assert!(synth_generate(&SynthConfig {
            missing_fraction: 1.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn profile_peaks_at_rush_hours() {
        let best = |r: std::ops::Range<u32>| {
            r.max_by(|a, b| daily_profile(*a as f64).total_cmp(&daily_profile(*b as f64)))
                .unwrap()
        };
        assert_eq!(best(0..15), 8);
        assert_eq!(best(15..24), 21);
    }
}
