use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Protocol};
use crate::error::{GpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRmse {
    pub site_id: String,
    pub n_test: usize,
    /// Mean of `per_repetition`.
    pub rmse: f64,
    pub per_repetition: Vec<f64>,
}

/// Outcome of one config under one protocol, in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: Protocol,
    pub config: ExperimentConfig,
    pub sites: Vec<SiteRmse>,
    pub omitted_sites: Vec<String>,
    pub min_rmse: f64,
    /// Unweighted mean of the per-site RMSEs.
    pub average_rmse: f64,
    pub max_rmse: f64,
    /// RMSE over all test points pooled across sites, averaged over
    /// repetitions.
    pub pooled_rmse: f64,
    pub pooled_per_repetition: Vec<f64>,
    /// Wall-clock seconds per (fold, repetition), fold-major.
    pub fold_seconds: Vec<f64>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub(crate) fn new(
        protocol: Protocol,
        config: ExperimentConfig,
        sites: Vec<SiteRmse>,
        omitted_sites: Vec<String>,
        pooled_per_repetition: Vec<f64>,
        fold_seconds: Vec<f64>,
        notes: Vec<String>,
    ) -> Self {
        let r: Vec<f64> = sites.iter().map(|s| s.rmse).collect();
        let (min, max) = r
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let avg = r.iter().sum::<f64>() / r.len().max(1) as f64;
        let pooled = pooled_per_repetition.iter().sum::<f64>() / pooled_per_repetition.len().max(1) as f64;
        ExperimentReport {
            protocol,
            config,
            sites,
            omitted_sites,
            min_rmse: min,
            average_rmse: avg,
            max_rmse: max,
            pooled_rmse: pooled,
            pooled_per_repetition,
            fold_seconds,
            notes,
        }
    }
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Aligned plain-text comparison table, one row per report.
pub fn comparison_table(reports: &[ExperimentReport]) -> String {
    let header = [
        "Protocol",
        "Model",
        "Periodic",
        "Outliers Removed",
        "Additional Inputs",
        "Sparse",
        "Min RMSE",
        "Average RMSE",
        "Max RMSE",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let c = &r.config;
            vec![
                r.protocol.name().to_string(),
                c.label.clone(),
                mark(c.periodic).into(),
                mark(c.remove_outliers).into(),
                mark(c.additional_inputs).into(),
                c.sparse_label().into(),
                format!("{:.2}", r.min_rmse),
                format!("{:.2}", r.average_rmse),
                format!("{:.2}", r.max_rmse),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j >= 6 {
                    format!("{:>w$}", c, w = widths[j])
                } else {
                    format!("{:<w$}", c, w = widths[j])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let _ = writeln!(out, "{}", "-".repeat(total));
    for r in &rows {
        line(r.iter().map(|s| s.as_str()).collect(), &mut out);
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| GpError::io(path, e))?))
}

/// Summary rows: protocol, label, flags, min/average/max and pooled RMSE.
pub fn write_comparison_csv(path: impl AsRef<Path>, reports: &[ExperimentReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "protocol",
        "label",
        "backend",
        "periodic",
        "outliers_removed",
        "additional_inputs",
        "sparse",
        "sites",
        "min_rmse",
        "average_rmse",
        "max_rmse",
        "pooled_rmse",
    ])?;
    for r in reports {
        let c = &r.config;
        w.write_record([
            r.protocol.name().to_string(),
            c.label.clone(),
            c.backend.name().to_string(),
            c.periodic.to_string(),
            c.remove_outliers.to_string(),
            c.additional_inputs.to_string(),
            c.sparse_label().to_string(),
            r.sites.len().to_string(),
            format!("{:.6}", r.min_rmse),
            format!("{:.6}", r.average_rmse),
            format!("{:.6}", r.max_rmse),
            format!("{:.6}", r.pooled_rmse),
        ])?;
    }
    w.flush().map_err(|e| GpError::io(path, e))
}

/// One row per (report, site, repetition).
pub fn write_site_csv(path: impl AsRef<Path>, reports: &[ExperimentReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["protocol", "label", "site_id", "n_test", "repetition", "seed", "rmse"])?;
    for r in reports {
        let seeds = r.config.seeds();
        for s in &r.sites {
            for (k, v) in s.per_repetition.iter().enumerate() {
                w.write_record([
                    r.protocol.name().to_string(),
                    r.config.label.clone(),
                    s.site_id.clone(),
                    s.n_test.to_string(),
                    (k + 1).to_string(),
                    seeds[k].to_string(),
                    format!("{:.6}", v),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| GpError::io(path, e))
}

/// Full structured dump, including per-fold timings.
pub fn write_json(path: impl AsRef<Path>, reports: &[ExperimentReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, reports)?;
    w.flush().map_err(|e| GpError::io(path, e))
}
