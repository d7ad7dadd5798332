use std::time::Instant;

use chrono::{TimeDelta, TimeZone, Utc};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stgp::data::{build_dataset, SensorReading, Weather};
use stgp::linalg::cholesky_jittered;
use stgp::optim::OptimizerOptions;
use stgp::statespace::{SpatioTemporalGrid, StateSpaceKernel, StateSpaceModel, TemporalFamily};
use stgp::KernelSpec;

/// Exact draw from the separable prior on a full grid, via a dense Cholesky.
fn sample_grid(
    coords: &DMatrix<f64>,
    times: &[f64],
    temporal: &StateSpaceKernel,
    spatial: &KernelSpec,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<f64>> {
    let ns = coords.nrows();
    let n = ns * times.len();
    let ks = spatial.gram_sym(coords).unwrap();
    let k = DMatrix::from_fn(n, n, |a, b| {
        ks[(a % ns, b % ns)] * temporal.covariance(times[a / ns] - times[b / ns])
    });
    let l = cholesky_jittered(&k).unwrap();
    let f = l.l() * DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    f.iter()
        .map(|v| Some(v + noise_std * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

#[test]
fn temporal_lengthscale_is_recovered() {
    let truth = StateSpaceKernel::new(TemporalFamily::Matern32, 1.0, 5.0);
    let spatial = KernelSpec::se_ard(1.0, &[1.0, 1.0]);
    let times: Vec<f64> = (0..200).map(f64::from).collect();
    let mut fitted = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let values = sample_grid(&coords, &times, &truth, &spatial, 0.1, &mut rng);
        let ids = (0..5).map(|i| format!("s{i}")).collect();
        let grid = SpatioTemporalGrid::new(ids, coords, times.clone(), values).unwrap();
        let mut model = StateSpaceModel::new(
            grid,
            StateSpaceKernel::new(TemporalFamily::Matern32, 1.0, 2.0),
            spatial.clone(),
            0.1,
            0.0,
        )
        .unwrap();
        model.fit(&OptimizerOptions::default()).unwrap();
        fitted.push(model.temporal.lengthscale());
    }
    for (seed, ell) in fitted.iter().enumerate() {
        assert!((ell / 5.0 - 1.0).abs() <= 0.3, "seed {seed}: lengthscale {ell}");
    }
}

#[test]
fn likelihood_cost_is_linear_in_time_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let coords = DMatrix::from_fn(66, 2, |_, _| rng.random_range(-1.0..1.0));
    let model_for = |t: usize, rng: &mut ChaCha8Rng| {
        let times: Vec<f64> = (0..t).map(|i| i as f64 * 0.01).collect();
        let values = (0..t * 66)
            .map(|_| (rng.random::<f64>() > 0.1).then(|| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let ids = (0..66).map(|i| format!("s{i}")).collect();
        let grid = SpatioTemporalGrid::new(ids, coords.clone(), times, values).unwrap();
        StateSpaceModel::new(
            grid,
            StateSpaceKernel::new(TemporalFamily::Matern32, 1.0, 0.05),
            KernelSpec::se_ard(1.0, &[0.5, 0.5]),
            0.1,
            0.0,
        )
        .unwrap()
    };
    let time_of = |m: &StateSpaceModel| {
        (0..3)
            .map(|_| {
                let start = Instant::now();
                m.negative_log_likelihood().unwrap();
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let short = model_for(720, &mut rng);
    let long = model_for(1440, &mut rng);
    let ratio = time_of(&long) / time_of(&short);
    assert!((ratio - 2.0).abs() <= 0.5, "doubling T scaled cost by {ratio}");
}

#[test]
fn pivot_averages_duplicates_and_marks_gaps() {
    let t0 = Utc.with_ymd_and_hms(2022, 3, 1, 0, 0, 0).unwrap();
    let reading = |site: &str, lat: f64, h: i64, v: f64| SensorReading {
        site_id: site.into(),
        latitude: lat,
        longitude: 103.8,
        timestamp: t0 + TimeDelta::hours(h),
        pm25: v,
        weather: None,
    };
    let readings = vec![
        reading("a", 1.30, 0, 10.0),
        reading("b", 1.35, 0, 20.0),
        reading("a", 1.30, 1, 12.0),
        reading("a", 1.30, 1, 14.0),
        reading("b", 1.35, 2, 30.0),
    ];
    let data = build_dataset(&readings, false).unwrap();
    let (grid, report) = SpatioTemporalGrid::from_dataset(&data).unwrap();
    assert_eq!((grid.n_sites(), grid.n_times()), (2, 3));
    assert_eq!(report.cells, 6);
    assert_eq!(report.observed, 4);
    assert_eq!(report.duplicates_averaged, 1);
    assert_eq!(grid.site_ids, vec!["a", "b"]);
    let norm = &data.normalizer;
    let raw = |t: usize, s: usize| grid.get(t, s).map(|v| norm.denormalize_target(v));
    assert!((raw(1, 0).unwrap() - 13.0).abs() < 1e-9);
    assert!(raw(1, 1).is_none() && raw(2, 0).is_none());
    assert!((raw(2, 1).unwrap() - 30.0).abs() < 1e-9);

    let with_cov: Vec<SensorReading> = readings
        .into_iter()
        .map(|mut r| {
            r.weather = Some(Weather {
                wind_speed: 5.0,
                wind_direction: 90.0,
                wind_gust: 8.0,
                humidity: 80.0,
                temperature: 28.0,
                precipitation: 0.0,
            });
            r
        })
        .collect();
    let data = build_dataset(&with_cov, true).unwrap();
    assert!(SpatioTemporalGrid::from_dataset(&data).is_err());
}
