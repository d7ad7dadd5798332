use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stgp::data::SynthConfig;
use stgp::eval::{default_matrix, Backend, ExperimentConfig, Protocol, ProtocolSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolChoice {
    Nowcast,
    Forecast,
    #[default]
    Both,
}

impl ProtocolChoice {
    pub fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolChoice::Nowcast => vec![Protocol::Nowcast],
            ProtocolChoice::Forecast => vec![Protocol::Forecast],
            ProtocolChoice::Both => vec![Protocol::Nowcast, Protocol::Forecast],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendChoice {
    Exact,
    Svgp,
    Statespace,
}

impl BackendChoice {
    pub fn backend(self) -> Backend {
        match self {
            BackendChoice::Exact => Backend::Exact,
            BackendChoice::Svgp => Backend::Svgp,
            BackendChoice::Statespace => Backend::StateSpace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sensor CSV; synthetic data from `[synth]` is used when unset.
    pub sensors: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    /// Sites with fewer readings are dropped before anything else.
    pub min_readings: usize,
    /// Local-time offset for hour-of-day summaries.
    pub utc_offset_hours: i32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sensors: None,
            weather: None,
            min_readings: 100,
            utc_offset_hours: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Overrides the synthetic seed and every experiment's repetition seeds.
    pub seed: Option<u64>,
    pub protocol: ProtocolChoice,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub settings: ProtocolSettings,
    /// Rows of the comparison; the six-row default matrix when empty.
    pub experiments: Vec<ExperimentConfig>,
    /// Model trained by `fit`; chosen from the backend otherwise.
    pub fit: Option<ExperimentConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            seed: None,
            protocol: ProtocolChoice::Both,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            settings: ProtocolSettings::default(),
            experiments: Vec::new(),
            fit: None,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parse a TOML file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.data.sensors);
        resolve(base, &mut cfg.data.weather);
        Ok(cfg)
    }

    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        let mut e = if self.experiments.is_empty() {
            default_matrix()
        } else {
            self.experiments.clone()
        };
        if let Some(s) = self.seed {
            for c in &mut e {
                c.seeds = (1..=c.repetitions as u64).map(|k| s + k).collect();
            }
        }
        e
    }

    pub fn synth(&self) -> SynthConfig {
        let mut s = self.synth.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    pub fn fit_config(&self, backend: Option<BackendChoice>) -> ExperimentConfig {
        let mut c = match (&self.fit, backend) {
            (Some(f), None) => f.clone(),
            (Some(f), Some(b)) if f.backend == b.backend() => f.clone(),
            (_, b) => {
                let want = b.map(|b| b.backend()).unwrap_or(Backend::Exact);
                self.experiments()
                    .into_iter()
                    .filter(|c| c.backend == want)
                    .last()
                    .unwrap_or_else(|| match want {
                        Backend::Svgp => ExperimentConfig::svgp(),
                        Backend::StateSpace => ExperimentConfig::state_space(),
                        _ => ExperimentConfig::exact(true, true, false),
                    })
            }
        };
        if let Some(s) = self.seed {
            c.seeds = (1..=c.repetitions as u64).map(|k| s + k).collect();
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        for e in self.experiments() {
            e.validate()?;
        }
        if let Some(f) = &self.fit {
            f.validate()?;
        }
        if self.settings.forecast_hours <= 0 {
            bail!("settings.forecast_hours must be positive");
        }
        if self.data.sensors.is_none() && (self.synth.sites == 0 || self.synth.days == 0) {
            bail!("synthetic data needs at least one site and one day");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = toml::from_str::<RunConfig>("out_dir = 'x'\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
        let err = toml::from_str::<RunConfig>("[[experiments]]\nperiodc = true\n").unwrap_err();
        assert!(err.to_string().contains("periodc"));
    }

    #[test]
    fn nested_kernel_and_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 10
            [[experiments]]
            label = "custom"
            repetitions = 2
            kernel = { sum = [ { se = { dims = [0, 1] } },
                               { product = [ { periodic = { dims = [2], period = 24.0 } },
                                             { periodic = { dims = [2], period = 168.0 } } ] } ] }
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        let e = cfg.experiments();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].seeds, vec![11, 12]);
        assert_eq!(cfg.synth().seed, 10);
        assert_eq!(RunConfig::default().experiments().len(), 6);
    }

    #[test]
    fn fit_config_follows_backend() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.fit_config(None).backend, Backend::Exact);
        assert_eq!(cfg.fit_config(Some(BackendChoice::Svgp)).backend, Backend::Svgp);
        assert_eq!(
            cfg.fit_config(Some(BackendChoice::Statespace)).backend,
            Backend::StateSpace
        );
    }

    #[test]
    fn invalid_experiment_fails_validation() {
        let cfg: RunConfig =
            toml::from_str("[[experiments]]\nbackend = 'state_space'\nperiodic = true\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
