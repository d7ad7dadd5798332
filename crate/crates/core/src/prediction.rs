use serde::{Deserialize, Serialize};

use crate::data::Normalizer;

/// Marginal posterior at a set of query points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub mean: Vec<f64>,
    /// Variance of the latent function, clamped at zero.
    pub latent_var: Vec<f64>,
    /// `latent_var` plus the observation-noise variance.
    pub observed_var: Vec<f64>,
}

impl PosteriorPrediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn latent_std(&self) -> Vec<f64> {
        self.latent_var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn observed_std(&self) -> Vec<f64> {
        self.observed_var.iter().map(|v| v.sqrt()).collect()
    }

    /// Map standardized-target predictions back to original units.
    pub fn denormalize(&self, norm: &Normalizer) -> PosteriorPrediction {
        let s2 = norm.target_scale * norm.target_scale;
        PosteriorPrediction {
            mean: self.mean.iter().map(|m| norm.denormalize_target(*m)).collect(),
            latent_var: self.latent_var.iter().map(|v| v * s2).collect(),
            observed_var: self.observed_var.iter().map(|v| v * s2).collect(),
        }
    }

    pub(crate) fn from_parts(mean: Vec<f64>, latent_var: Vec<f64>, noise: f64) -> Self {
        let latent_var: Vec<f64> = latent_var.into_iter().map(|v| v.max(0.0)).collect();
        let observed_var = latent_var.iter().map(|v| v + noise).collect();
        PosteriorPrediction {
            mean,
            latent_var,
            observed_var,
        }
    }
}
