//! Benchmark protocols, experiment configuration and trained-model handling.

mod protocol;
mod report;

pub use protocol::{
    forecast_holdout, forecast_split, nowcast_folds, nowcast_loo, rmse, run_matrix, run_protocol,
    Fold, Protocol, ProtocolSettings,
};
pub use report::{
    comparison_table, write_comparison_csv, write_json, write_site_csv, ExperimentReport, SiteRmse,
};

use serde::{Deserialize, Serialize};

use crate::data::{build_dataset, remove_outliers, Column, Normalizer, OutlierOptions, SensorReading};
use crate::error::{GpError, Result};
use crate::exact_gp::{GpModel, GpModelParts};
use crate::kernels::KernelSpec;
use crate::optim::{FitResult, OptimizerOptions};
use crate::prediction::PosteriorPrediction;
use crate::statespace::{SpatioTemporalGrid, StateSpaceKernel, StateSpaceModel, TemporalFamily};
use crate::svgp::{fit_svgp, init_inducing, InducingSet, SvgpModel};

const INIT_NOISE: f64 = 0.1;
const INIT_TEMPORAL_HOURS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Exact GP on a random subsample of the training data.
    #[default]
    Exact,
    /// Sparse variational GP on all training data.
    Svgp,
    /// Kalman-filter GP on the site × hour grid.
    StateSpace,
    /// Constant prediction at the training mean; a reference, not a GP.
    Mean,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Svgp => "svgp",
            Backend::StateSpace => "statespace",
            Backend::Mean => "mean",
        }
    }
}

/// Config-file form of a kernel. Lengthscales are in normalized input units;
/// periods are in the raw units of their column (hours for time) and are
/// rescaled when the kernel is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelExpr {
    Se {
        #[serde(default)]
        dims: Option<Vec<usize>>,
        #[serde(default = "one")]
        variance: f64,
        #[serde(default = "one")]
        lengthscale: f64,
        #[serde(default = "yes")]
        ard: bool,
    },
    Periodic {
        dims: Vec<usize>,
        period: f64,
        #[serde(default = "one")]
        variance: f64,
        #[serde(default = "one")]
        lengthscale: f64,
    },
    Sum(Vec<KernelExpr>),
    Product(Vec<KernelExpr>),
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl KernelExpr {
    pub fn build(&self, norm: &Normalizer) -> Result<KernelSpec> {
        let d = norm.dim();
        let check = |dims: &[usize]| -> Result<()> {
            if dims.is_empty() || dims.iter().any(|&j| j >= d) {
                return Err(GpError::input(format!(
                    "kernel dims {dims:?} invalid for {d} input columns"
                )));
            }
            Ok(())
        };
        Ok(match self {
            KernelExpr::Se {
                dims,
                variance,
                lengthscale,
                ard,
            } => {
                let all: Vec<usize> = (0..d).collect();
                let dims = dims.clone().unwrap_or(all);
                check(&dims)?;
                let n = if *ard { dims.len() } else { 1 };
                let k = KernelSpec::se_ard(*variance, &vec![*lengthscale; n]);
                if dims.len() == d && dims.iter().enumerate().all(|(i, &j)| i == j) {
                    k
                } else {
                    k.on_dims(dims)
                }
            }
            KernelExpr::Periodic {
                dims,
                period,
                variance,
                lengthscale,
            } => {
                check(dims)?;
                if dims.len() != 1 {
                    return Err(GpError::input("a periodic kernel takes exactly one input column"));
                }
                let scale = norm.input_scale[dims[0]];
                KernelSpec::periodic(*variance, *lengthscale, period / scale).on_dims(dims.clone())
            }
            KernelExpr::Sum(c) => KernelSpec::sum(c.iter().map(|k| k.build(norm)).collect::<Result<_>>()?),
            KernelExpr::Product(c) => {
                KernelSpec::product(c.iter().map(|k| k.build(norm)).collect::<Result<_>>()?)
            }
        })
    }
}

/// SE-ARD over every column, or with `periodic` an SE-ARD over the non-time
/// columns plus a daily × weekly periodic product over time.
pub fn default_kernel(norm: &Normalizer, periodic: bool, daily: f64, weekly: f64) -> Result<KernelSpec> {
    let d = norm.dim();
    if !periodic {
        return Ok(KernelSpec::se_ard(1.0, &vec![1.0; d]));
    }
    let t = norm
        .column_index(Column::Time)
        .ok_or_else(|| GpError::input("periodic kernel needs a time column"))?;
    let others: Vec<usize> = (0..d).filter(|&j| j != t).collect();
    let ts = norm.time_scale();
    let seasonal = KernelSpec::product(vec![
        KernelSpec::periodic(1.0, 1.0, daily / ts),
        KernelSpec::periodic(1.0, 1.0, weekly / ts),
    ])
    .on_dims(vec![t]);
    let spatial = KernelSpec::se_ard(1.0, &vec![1.0; others.len()]).on_dims(others);
    Ok(KernelSpec::sum(vec![spatial, seasonal]))
}

/// One row of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: String,
    pub backend: Backend,
    pub periodic: bool,
    pub remove_outliers: bool,
    pub additional_inputs: bool,
    pub outliers: OutlierOptions,
    /// Training points drawn per repetition (exact backend only).
    pub subsample: usize,
    pub repetitions: usize,
    /// One per repetition; empty means `1..=repetitions`.
    pub seeds: Vec<u64>,
    pub inducing_points: usize,
    pub temporal_family: TemporalFamily,
    /// Periods of the seasonal kernel, in hours.
    pub daily_period: f64,
    pub weekly_period: f64,
    /// Replaces the kernel implied by `periodic` (exact and SVGP backends).
    pub kernel: Option<KernelExpr>,
    /// Overrides the backend's default optimizer budget.
    pub optimizer: Option<OptimizerOptions>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            label: "base".into(),
            backend: Backend::Exact,
            periodic: false,
            remove_outliers: false,
            additional_inputs: false,
            outliers: OutlierOptions::default(),
            subsample: 1000,
            repetitions: 4,
            seeds: Vec::new(),
            inducing_points: 100,
            temporal_family: TemporalFamily::Matern32,
            daily_period: 24.0,
            weekly_period: 168.0,
            kernel: None,
            optimizer: None,
        }
    }
}

impl ExperimentConfig {
    pub fn exact(periodic: bool, remove_outliers: bool, additional_inputs: bool) -> Self {
        let mut label = vec!["exact"];
        if periodic {
            label.push("periodic");
        }
        if remove_outliers {
            label.push("outliers");
        }
        if additional_inputs {
            label.push("inputs");
        }
        ExperimentConfig {
            label: label.join("+"),
            periodic,
            remove_outliers,
            additional_inputs,
            ..Default::default()
        }
    }

    pub fn svgp() -> Self {
        ExperimentConfig {
            label: "svgp".into(),
            backend: Backend::Svgp,
            periodic: true,
            remove_outliers: true,
            additional_inputs: true,
            repetitions: 1,
            ..Default::default()
        }
    }

    pub fn state_space() -> Self {
        ExperimentConfig {
            label: "statespace".into(),
            backend: Backend::StateSpace,
            remove_outliers: true,
            repetitions: 1,
            ..Default::default()
        }
    }

    pub fn mean() -> Self {
        ExperimentConfig {
            label: "mean".into(),
            backend: Backend::Mean,
            repetitions: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GpError::input(format!("experiment '{}': {m}", self.label)));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.repetitions {
            return bad(format!(
                "{} seeds given for {} repetitions",
                self.seeds.len(),
                self.repetitions
            ));
        }
        if self.backend == Backend::StateSpace {
            if self.periodic || self.additional_inputs {
                return bad("the state-space backend supports neither periodic kernels nor additional inputs".into());
            }
            if self.kernel.is_some() {
                return bad("the state-space backend does not take a kernel expression".into());
            }
        }
        if self.subsample == 0 || self.inducing_points == 0 {
            return bad("subsample and inducing_points must be positive".into());
        }
        if !(self.daily_period > 0.0 && self.weekly_period > 0.0) {
            return bad("periods must be positive".into());
        }
        if !(self.outliers.factor >= 0.0) {
            return bad("outlier factor must be non-negative".into());
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (1..=self.repetitions as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn optimizer_options(&self) -> OptimizerOptions {
        if let Some(o) = &self.optimizer {
            return o.clone();
        }
        match self.backend {
            Backend::Svgp => OptimizerOptions::svgp(),
            Backend::StateSpace => OptimizerOptions {
                max_iters: 100,
                ..Default::default()
            },
            _ => OptimizerOptions::default(),
        }
    }

    pub fn sparse_label(&self) -> &'static str {
        match self.backend {
            Backend::Svgp => "SVGP",
            Backend::StateSpace => "state-space",
            _ => "no",
        }
    }
}

/// The six comparison rows: base, +periodic, +outliers, +inputs, SVGP and
/// state-space.
pub fn default_matrix() -> Vec<ExperimentConfig> {
    vec![
        ExperimentConfig::exact(false, false, false),
        ExperimentConfig::exact(true, false, false),
        ExperimentConfig::exact(true, true, false),
        ExperimentConfig::exact(true, true, true),
        ExperimentConfig::svgp(),
        ExperimentConfig::state_space(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum ModelKind {
    Exact(GpModelParts),
    Svgp(SvgpModel),
    StateSpace(StateSpaceModel),
    Mean { value: f64, variance: f64 },
}

/// A fitted model together with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub normalizer: Normalizer,
    pub model: ModelKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainInfo {
    pub n_train: usize,
    pub outliers_removed: usize,
    pub duplicates_averaged: usize,
    pub fit: Option<FitResult>,
}

impl TrainedModel {
    /// Clean (per config), normalize and fit on `readings`. `seed` drives
    /// subsampling, inducing-point placement and minibatch order.
    pub fn train(readings: &[SensorReading], config: &ExperimentConfig, seed: u64) -> Result<(Self, TrainInfo)> {
        config.validate()?;
        let mut info = TrainInfo::default();
        let cleaned;
        let readings = if config.remove_outliers {
            let (kept, report) = remove_outliers(readings.to_vec(), &config.outliers);
            info.outliers_removed = report.total_removed;
            cleaned = kept;
            &cleaned[..]
        } else {
            readings
        };
        if readings.is_empty() {
            return Err(GpError::Protocol("training set is empty".into()));
        }
        let data = build_dataset(readings, config.additional_inputs)?;
        info.n_train = data.len();
        let norm = data.normalizer.clone();
        let mut opts = config.optimizer_options();
        opts.seed = seed;
        let kernel = || match &config.kernel {
            Some(k) => k.build(&norm),
            None => default_kernel(&norm, config.periodic, config.daily_period, config.weekly_period),
        };
        let model = match config.backend {
            Backend::Mean => {
                let n = readings.len() as f64;
                let value = readings.iter().map(|r| r.pm25).sum::<f64>() / n;
                let variance = readings.iter().map(|r| (r.pm25 - value).powi(2)).sum::<f64>() / n;
                ModelKind::Mean { value, variance }
            }
            Backend::Exact => {
                let sub = data.subsample(config.subsample.min(data.len()), seed)?;
                let mut gp = GpModel::from_dataset(kernel()?, &sub, INIT_NOISE)?;
                info.fit = Some(gp.fit(&opts)?);
                ModelKind::Exact(gp.to_parts())
            }
            Backend::Svgp => {
                let m = config.inducing_points.min(data.len());
                let z = init_inducing(&data.x, m, seed)?;
                let mut svgp = SvgpModel::new(kernel()?, InducingSet::new(z), INIT_NOISE, 0.0)?;
                info.fit = Some(fit_svgp(&mut svgp, &data.x, &data.y, &opts)?);
                ModelKind::Svgp(svgp)
            }
            Backend::StateSpace => {
                let (grid, pivot) = SpatioTemporalGrid::from_dataset(&data)?;
                info.duplicates_averaged = pivot.duplicates_averaged;
                let c = grid.coords.ncols();
                let temporal = StateSpaceKernel::new(
                    config.temporal_family,
                    1.0,
                    INIT_TEMPORAL_HOURS / norm.time_scale(),
                );
                let mut ss = StateSpaceModel::new(
                    grid,
                    temporal,
                    KernelSpec::se_ard(1.0, &vec![1.0; c]),
                    INIT_NOISE,
                    0.0,
                )?;
                info.fit = Some(ss.fit(&opts)?);
                ModelKind::StateSpace(ss)
            }
        };
        Ok((TrainedModel { normalizer: norm, model }, info))
    }

    pub fn backend(&self) -> Backend {
        match self.model {
            ModelKind::Exact(_) => Backend::Exact,
            ModelKind::Svgp(_) => Backend::Svgp,
            ModelKind::StateSpace(_) => Backend::StateSpace,
            ModelKind::Mean { .. } => Backend::Mean,
        }
    }

    /// Predictions in original units at the queries' location, time and
    /// (if the model uses them) covariates. `pm25` of the queries is ignored.
    pub fn predict(&self, queries: &[SensorReading]) -> Result<PosteriorPrediction> {
        if let ModelKind::Mean { value, variance } = self.model {
            let n = queries.len();
            return Ok(PosteriorPrediction {
                mean: vec![value; n],
                latent_var: vec![0.0; n],
                observed_var: vec![variance; n],
            });
        }
        let xq = self.normalizer.encode(queries)?;
        let p = match &self.model {
            ModelKind::Exact(parts) => GpModel::from_parts(parts.clone())?.predict(&xq)?,
            ModelKind::Svgp(m) => m.predict(&xq)?,
            ModelKind::StateSpace(m) => m.predict(&xq)?,
            ModelKind::Mean { .. } => unreachable!(),
        };
        Ok(p.denormalize(&self.normalizer))
    }
}
