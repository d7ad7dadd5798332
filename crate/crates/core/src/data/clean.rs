use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::SensorReading;

/// Remove every reading from sites with fewer than `min_count` readings.
/// Returns the surviving readings and the dropped site ids (sorted).
pub fn drop_sparse_sites(
    readings: Vec<SensorReading>,
    min_count: usize,
) -> (Vec<SensorReading>, Vec<String>) {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &readings {
        *counts.entry(r.site_id.as_str()).or_default() += 1;
    }
    let mut dropped: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c < min_count)
        .map(|(s, _)| s.to_string())
        .collect();
    dropped.sort();
    if dropped.is_empty() {
        return (readings, dropped);
    }
    let kept = readings
        .into_iter()
        .filter(|r| dropped.binary_search(&r.site_id).is_err())
        .collect();
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// Keep `[Q1 - f·IQR, Q3 + f·IQR]`.
    #[default]
    Tukey,
    /// Keep `[mean - f·IQR, mean + f·IQR]`.
    MeanCentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierScope {
    #[default]
    PerSite,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierOptions {
    pub factor: f64,
    pub mode: OutlierMode,
    pub scope: OutlierScope,
}

impl Default for OutlierOptions {
    fn default() -> Self {
        OutlierOptions {
            factor: 1.5,
            mode: OutlierMode::Tukey,
            scope: OutlierScope::PerSite,
        }
    }
}

const MIN_GROUP: usize = 4;
const GLOBAL_GROUP: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFences {
    pub group: String,
    pub count: usize,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub removed: usize,
}

impl GroupFences {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub options: OutlierOptions,
    pub groups: Vec<GroupFences>,
    /// Groups with fewer than four readings; left untouched.
    pub skipped_groups: Vec<String>,
    pub total: usize,
    pub total_removed: usize,
}

impl OutlierReport {
    pub fn removed_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.total_removed as f64 / self.total as f64
        }
    }
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (position `p·(n-1)`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn group_key(r: &SensorReading, scope: OutlierScope) -> &str {
    match scope {
        OutlierScope::PerSite => &r.site_id,
        OutlierScope::Global => GLOBAL_GROUP,
    }
}

fn fences_for(group: &str, values: &mut [f64], opts: &OutlierOptions) -> GroupFences {
    values.sort_by(|a, b| a.total_cmp(b));
    let q1 = quantile_sorted(values, 0.25);
    let q3 = quantile_sorted(values, 0.75);
    let iqr = q3 - q1;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let (lower, upper) = if opts.factor.is_infinite() {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let w = opts.factor * iqr;
        match opts.mode {
            OutlierMode::Tukey => (q1 - w, q3 + w),
            OutlierMode::MeanCentered => (mean - w, mean + w),
        }
    };
    GroupFences {
        group: group.to_string(),
        count: values.len(),
        q1,
        q3,
        iqr,
        mean,
        lower,
        upper,
        removed: 0,
    }
}

/// Drop readings outside the IQR fences of their group. Groups with fewer
/// than four readings are skipped and listed in the report.
pub fn remove_outliers(
    readings: Vec<SensorReading>,
    opts: &OutlierOptions,
) -> (Vec<SensorReading>, OutlierReport) {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &readings {
        values
            .entry(group_key(r, opts.scope))
            .or_default()
            .push(r.pm25);
    }
    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for (g, v) in values.iter_mut() {
        if v.len() < MIN_GROUP {
            skipped.push(g.to_string());
        } else {
            groups.push(fences_for(g, v, opts));
        }
    }
    let mut report = OutlierReport {
        options: *opts,
        groups,
        skipped_groups: skipped,
        total: readings.len(),
        total_removed: 0,
    };
    let kept = filter_with(readings, &mut report);
    (kept, report)
}

fn filter_with(readings: Vec<SensorReading>, report: &mut OutlierReport) -> Vec<SensorReading> {
    let index: HashMap<String, usize> = report
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.group.clone(), i))
        .collect();
    let scope = report.options.scope;
    let mut removed = vec![0usize; report.groups.len()];
    let kept: Vec<SensorReading> = readings
        .into_iter()
        .filter(|r| match index.get(group_key(r, scope)) {
            Some(&i) if !report.groups[i].contains(r.pm25) => {
                removed[i] += 1;
                false
            }
            _ => true,
        })
        .collect();
    for (g, n) in report.groups.iter_mut().zip(removed) {
        g.removed = n;
    }
    report.total_removed = report.groups.iter().map(|g| g.removed).sum();
    kept
}

/// Re-apply previously computed fences without recomputing quartiles.
pub fn apply_fences(readings: Vec<SensorReading>, fences: &OutlierReport) -> Vec<SensorReading> {
    let mut report = fences.clone();
    report.total = readings.len();
    filter_with(readings, &mut report)
}
