//! Linear-time GP regression on a fixed sensor grid.
//!
//! The covariance is separable, `k((s, t), (s', t')) = k_s(s, s') k_t(t - t')`,
//! with a Matérn temporal part written as a linear SDE. The joint state over
//! all `S` sites (site-major, `s` components per site) is filtered forwards
//! and smoothed backwards in time, so cost grows linearly with the number of
//! time steps. Inputs are the spatial coordinates followed by time as the
//! last column.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset};
use crate::error::{GpError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky_jittered, symmetrize, CholeskyFactor};
use crate::optim::{maximize, FitResult, OptimizerOptions};
use crate::prediction::PosteriorPrediction;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalFamily {
    Matern12,
    #[default]
    Matern32,
}

/// Matérn temporal kernel in state-space form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceKernel {
    pub family: TemporalFamily,
    pub log_variance: f64,
    pub log_lengthscale: f64,
}

impl StateSpaceKernel {
    pub fn new(family: TemporalFamily, variance: f64, lengthscale: f64) -> Self {
        StateSpaceKernel {
            family,
            log_variance: variance.ln(),
            log_lengthscale: lengthscale.ln(),
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn state_dim(&self) -> usize {
        match self.family {
            TemporalFamily::Matern12 => 1,
            TemporalFamily::Matern32 => 2,
        }
    }

    fn lambda(&self) -> f64 {
        match self.family {
            TemporalFamily::Matern12 => 1.0 / self.lengthscale(),
            TemporalFamily::Matern32 => 3f64.sqrt() / self.lengthscale(),
        }
    }

    /// Feedback matrix `F` of `dx = F x dt + L dβ`.
    pub fn feedback(&self) -> DMatrix<f64> {
        let l = self.lambda();
        match self.family {
            TemporalFamily::Matern12 => DMatrix::from_element(1, 1, -l),
            TemporalFamily::Matern32 => DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -l * l, -2.0 * l]),
        }
    }

    /// Noise-effect vector `L`.
    pub fn noise_effect(&self) -> DVector<f64> {
        match self.family {
            TemporalFamily::Matern12 => DVector::from_element(1, 1.0),
            TemporalFamily::Matern32 => DVector::from_column_slice(&[0.0, 1.0]),
        }
    }

    /// Spectral density of the driving white noise.
    pub fn diffusion(&self) -> f64 {
        let (l, v) = (self.lambda(), self.variance());
        match self.family {
            TemporalFamily::Matern12 => 2.0 * v * l,
            TemporalFamily::Matern32 => 4.0 * v * l.powi(3),
        }
    }

    pub fn stationary_cov(&self) -> DMatrix<f64> {
        let (l, v) = (self.lambda(), self.variance());
        match self.family {
            TemporalFamily::Matern12 => DMatrix::from_element(1, 1, v),
            TemporalFamily::Matern32 => DMatrix::from_row_slice(2, 2, &[v, 0.0, 0.0, l * l * v]),
        }
    }

    /// Row `H` picking the function value out of the state.
    pub fn observation(&self) -> DVector<f64> {
        let mut h = DVector::zeros(self.state_dim());
        h[0] = 1.0;
        h
    }

    /// Closed-form covariance at lag `tau`.
    pub fn covariance(&self, tau: f64) -> f64 {
        let r = tau.abs() / self.lengthscale();
        match self.family {
            TemporalFamily::Matern12 => self.variance() * (-r).exp(),
            TemporalFamily::Matern32 => {
                let a = 3f64.sqrt() * r;
                self.variance() * (1.0 + a) * (-a).exp()
            }
        }
    }

    /// `exp(F dt)`.
    pub fn transition(&self, dt: f64) -> DMatrix<f64> {
        let l = self.lambda();
        let e = (-l * dt).exp();
        match self.family {
            TemporalFamily::Matern12 => DMatrix::from_element(1, 1, e),
            TemporalFamily::Matern32 => DMatrix::from_row_slice(
                2,
                2,
                &[e * (1.0 + l * dt), e * dt, -e * l * l * dt, e * (1.0 - l * dt)],
            ),
        }
    }

    /// Transition `A = exp(F dt)` and process noise `Q = P∞ - A P∞ Aᵀ`.
    pub fn discretize(&self, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(GpError::input(format!("time step must be positive, got {dt}")));
        }
        let a = self.transition(dt);
        let pinf = self.stationary_cov();
        let mut q = &pinf - &a * &pinf * a.transpose();
        symmetrize(&mut q);
        Ok((a, q))
    }
}

/// Observations pivoted onto sites × unique times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalGrid {
    pub site_ids: Vec<String>,
    /// One row of spatial coordinates per site.
    pub coords: DMatrix<f64>,
    /// Strictly increasing.
    pub times: Vec<f64>,
    /// Row-major `T × S`; `None` marks a missing cell.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PivotReport {
    pub cells: usize,
    pub observed: usize,
    /// Rows that landed on an already-filled cell and were averaged into it.
    pub duplicates_averaged: usize,
}

impl SpatioTemporalGrid {
    pub fn new(
        site_ids: Vec<String>,
        coords: DMatrix<f64>,
        times: Vec<f64>,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        let g = SpatioTemporalGrid {
            site_ids,
            coords,
            times,
            values,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.coords.nrows();
        if s == 0 || self.site_ids.len() != s {
            return Err(GpError::input("grid needs at least one site and one id per site"));
        }
        if self.values.len() != s * self.times.len() {
            return Err(GpError::input("grid values do not match sites × times"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) || self.times.iter().any(|t| !t.is_finite())
        {
            return Err(GpError::input("grid times must be finite and strictly increasing"));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GpError::input("grid values must be finite"));
        }
        Ok(())
    }

    /// Pivot a dataset whose last column is time and whose other columns are
    /// site coordinates. Rows sharing a (site, time) cell are averaged.
    pub fn from_dataset(data: &Dataset) -> Result<(Self, PivotReport)> {
        let cols = &data.normalizer.columns;
        if cols.last() != Some(&Column::Time) || cols.iter().any(|c| c.is_covariate()) {
            return Err(GpError::input(
                "the state-space backend takes only spatial coordinates and time as inputs",
            ));
        }
        if data.is_empty() {
            return Err(GpError::input("cannot pivot an empty dataset"));
        }
        let d = data.dim();
        let tcol = d - 1;
        let mut times: Vec<f64> = data.x.column(tcol).iter().copied().collect();
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup();
        let t_index: HashMap<u64, usize> =
            times.iter().enumerate().map(|(i, t)| (t.to_bits(), i)).collect();

        let mut site_slot: BTreeMap<usize, usize> = BTreeMap::new();
        for &s in &data.sites {
            let next = site_slot.len();
            site_slot.entry(s).or_insert(next);
        }
        // keep first-appearance order of sites
        let mut order: Vec<(usize, usize)> = site_slot.iter().map(|(&s, &k)| (k, s)).collect();
        order.sort_unstable();
        let slot_of: HashMap<usize, usize> =
            order.iter().enumerate().map(|(k, &(_, s))| (s, k)).collect();
        let ns = order.len();
        let mut coords = DMatrix::zeros(ns, tcol);
        let mut seen = vec![false; ns];
        let mut acc = vec![(0.0, 0usize); ns * times.len()];
        for i in 0..data.len() {
            let k = slot_of[&data.sites[i]];
            if !seen[k] {
                seen[k] = true;
                for c in 0..tcol {
                    coords[(k, c)] = data.x[(i, c)];
                }
            }
            let t = t_index[&data.x[(i, tcol)].to_bits()];
            let cell = &mut acc[t * ns + k];
            cell.0 += data.y[i];
            cell.1 += 1;
        }
        let mut report = PivotReport {
            cells: acc.len(),
            ..Default::default()
        };
        let values = acc
            .into_iter()
            .map(|(sum, n)| {
                if n > 0 {
                    report.observed += 1;
                    report.duplicates_averaged += n - 1;
                    Some(sum / n as f64)
                } else {
                    None
                }
            })
            .collect();
        let site_ids = order
            .iter()
            .map(|&(_, s)| data.site_ids.get(s).cloned().unwrap_or_else(|| s.to_string()))
            .collect();
        Ok((SpatioTemporalGrid::new(site_ids, coords, times, values)?, report))
    }

    pub fn n_sites(&self) -> usize {
        self.coords.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_observed(&self) -> usize {
        self.values.iter().flatten().count()
    }

    pub fn get(&self, t: usize, s: usize) -> Option<f64> {
        self.values[t * self.n_sites() + s]
    }
}

/// Separable spatio-temporal GP on a [`SpatioTemporalGrid`]. Parameters are
/// the temporal log variance and log lengthscale, the spatial kernel's
/// log-hyperparameters, the log noise variance and the prior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    pub temporal: StateSpaceKernel,
    pub spatial: KernelSpec,
    pub log_noise_variance: f64,
    pub mean: f64,
    pub grid: SpatioTemporalGrid,
}

struct Hyper {
    temporal: StateSpaceKernel,
    spatial: KernelSpec,
    noise: f64,
    mean: f64,
}

struct Step {
    t: f64,
    row: Option<usize>,
}

struct Filtered {
    m: DVector<f64>,
    p: DMatrix<f64>,
}

/// `blockdiag(A) m`.
fn block_apply_vec(a: &DMatrix<f64>, m: &DVector<f64>) -> DVector<f64> {
    let s = a.nrows();
    let n = m.len() / s;
    let mut out = DVector::zeros(m.len());
    for i in 0..n {
        for r in 0..s {
            out[i * s + r] = (0..s).map(|c| a[(r, c)] * m[i * s + c]).sum();
        }
    }
    out
}

/// `P blockdiag(A)ᵀ`.
fn block_right_t(p: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let s = a.nrows();
    let n = p.ncols() / s;
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for j in 0..n {
        for r in 0..s {
            let mut col = out.column_mut(j * s + r);
            for c in 0..s {
                col.axpy(a[(r, c)], &p.column(j * s + c), 1.0);
            }
        }
    }
    out
}

/// `blockdiag(A) P blockdiag(A)ᵀ + Ks ⊗ Q`.
fn block_predict_cov(p: &DMatrix<f64>, a: &DMatrix<f64>, q: &DMatrix<f64>, ks: &DMatrix<f64>) -> DMatrix<f64> {
    let s = a.nrows();
    let u = block_right_t(p, a).transpose();
    let mut out = block_right_t(&u, a).transpose();
    let dim = out.nrows();
    for j in 0..dim {
        let (bj, cj) = (j / s, j % s);
        for i in 0..dim {
            out[(i, j)] += ks[(i / s, bj)] * q[(i % s, cj)];
        }
    }
    symmetrize(&mut out);
    out
}

impl StateSpaceModel {
    pub fn new(
        grid: SpatioTemporalGrid,
        temporal: StateSpaceKernel,
        spatial: KernelSpec,
        noise_variance: f64,
        mean: f64,
    ) -> Result<Self> {
        let m = StateSpaceModel {
            temporal,
            spatial,
            log_noise_variance: noise_variance.ln(),
            mean,
            grid,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.spatial.validate(self.grid.coords.ncols())?;
        let h = self.hyper();
        if !(h.noise > 0.0 && h.noise.is_finite() && h.mean.is_finite()) {
            return Err(GpError::input("noise variance and prior mean must be finite"));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn n_params(&self) -> usize {
        self.spatial.n_params() + 4
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = vec![self.temporal.log_variance, self.temporal.log_lengthscale];
        p.extend(self.spatial.params());
        p.push(self.log_noise_variance);
        p.push(self.mean);
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = vec![
            "temporal.log_variance".to_string(),
            "temporal.log_lengthscale".to_string(),
        ];
        n.extend(self.spatial.param_names().into_iter().map(|s| format!("spatial.{s}")));
        n.push("log_noise_variance".into());
        n.push("mean".into());
        n
    }

    fn hyper_from(&self, p: &[f64]) -> Result<Hyper> {
        if p.len() != self.n_params() {
            return Err(GpError::input(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GpError::input("parameters must be finite"));
        }
        let nk = self.spatial.n_params();
        let mut spatial = self.spatial.clone();
        spatial.set_params(&p[2..2 + nk])?;
        Ok(Hyper {
            temporal: StateSpaceKernel {
                family: self.temporal.family,
                log_variance: p[0],
                log_lengthscale: p[1],
            },
            spatial,
            noise: p[2 + nk].exp(),
            mean: p[3 + nk],
        })
    }

    fn hyper(&self) -> Hyper {
        Hyper {
            temporal: self.temporal,
            spatial: self.spatial.clone(),
            noise: self.noise_variance(),
            mean: self.mean,
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let h = self.hyper_from(p)?;
        self.temporal = h.temporal;
        self.spatial = h.spatial;
        self.log_noise_variance = h.noise.ln();
        self.mean = h.mean;
        Ok(())
    }

    /// `-log p(y)` by the prediction-error decomposition; zero when nothing
    /// is observed.
    pub fn negative_log_likelihood(&self) -> Result<f64> {
        let steps: Vec<Step> = (0..self.grid.n_times())
            .map(|r| Step {
                t: self.grid.times[r],
                row: Some(r),
            })
            .collect();
        Ok(-run_filter(&self.grid, &self.hyper(), &steps, false)?.0)
    }

    fn nll_at(&self, p: &[f64]) -> Result<f64> {
        let h = self.hyper_from(p)?;
        let steps: Vec<Step> = (0..self.grid.n_times())
            .map(|r| Step {
                t: self.grid.times[r],
                row: Some(r),
            })
            .collect();
        Ok(-run_filter(&self.grid, &h, &steps, false)?.0)
    }

    /// Maximize the log likelihood with forward finite-difference gradients.
    pub fn fit(&mut self, opts: &OptimizerOptions) -> Result<FitResult> {
        let frozen = opts.frozen.clone();
        let mut res = maximize(
            self.params(),
            |p| {
                let f = -self.nll_at(p)?;
                let mut g = vec![0.0; p.len()];
                let mut q = p.to_vec();
                for i in 0..p.len() {
                    if frozen.contains(&i) {
                        continue;
                    }
                    q[i] = p[i] + FD_STEP;
                    g[i] = (-self.nll_at(&q)? - f) / FD_STEP;
                    q[i] = p[i];
                }
                Ok((f, g))
            },
            opts,
        )?;
        self.set_params(&res.params)?;
        res.param_names = self.param_names();
        Ok(res)
    }

    /// Posterior marginals at query rows (coordinates then time). Queries at
    /// a site's exact coordinates read that site's smoothed state; others
    /// condition the spatial kernel on all sites at the query time.
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<PosteriorPrediction> {
        let c = self.grid.coords.ncols();
        if xq.ncols() != c + 1 {
            return Err(GpError::input(format!(
                "query has {} columns, expected {} coordinates and time",
                xq.ncols(),
                c
            )));
        }
        let h = self.hyper();
        let s = h.temporal.state_dim();
        let ns = self.grid.n_sites();

        // merge grid times and query times into one schedule
        let mut qtimes: Vec<f64> = xq.column(c).iter().copied().collect();
        if qtimes.iter().any(|t| !t.is_finite()) {
            return Err(GpError::input("query times must be finite"));
        }
        qtimes.sort_by(|a, b| a.total_cmp(b));
        qtimes.dedup();
        let mut steps = Vec::new();
        let (mut i, mut j) = (0, 0);
        let gt = &self.grid.times;
        while i < gt.len() || j < qtimes.len() {
            if j == qtimes.len() || (i < gt.len() && gt[i] < qtimes[j]) {
                steps.push(Step { t: gt[i], row: Some(i) });
                i += 1;
            } else if i < gt.len() && gt[i] == qtimes[j] {
                steps.push(Step { t: gt[i], row: Some(i) });
                i += 1;
                j += 1;
            } else {
                steps.push(Step { t: qtimes[j], row: None });
                j += 1;
            }
        }
        let step_of: HashMap<u64, usize> =
            steps.iter().enumerate().map(|(k, st)| (st.t.to_bits(), k)).collect();
        let mut by_step: Vec<Vec<usize>> = vec![Vec::new(); steps.len()];
        for q in 0..xq.nrows() {
            by_step[step_of[&xq[(q, c)].to_bits()]].push(q);
        }

        // spatial weights per query
        let site_of: HashMap<Vec<u64>, usize> = (0..ns)
            .map(|i| (self.grid.coords.row(i).iter().map(|v| v.to_bits()).collect(), i))
            .collect();
        let ks = h.spatial.gram_sym(&self.grid.coords)?;
        let mut ks_chol: Option<CholeskyFactor> = None;
        let mut weights: Vec<Option<(DVector<f64>, f64)>> = vec![None; xq.nrows()];
        let mut on_site: Vec<Option<usize>> = vec![None; xq.nrows()];
        for q in 0..xq.nrows() {
            let key: Vec<u64> = (0..c).map(|k| xq[(q, k)].to_bits()).collect();
            if let Some(&i) = site_of.get(&key) {
                on_site[q] = Some(i);
                continue;
            }
            if ks_chol.is_none() {
                ks_chol = Some(cholesky_jittered(&ks)?);
            }
            let chol = ks_chol.as_ref().unwrap();
            let cq = xq.view((q, 0), (1, c)).into_owned();
            let kq = h.spatial.gram(&self.grid.coords, &cq)?.column(0).into_owned();
            let w = chol.solve_vec(&kq);
            let resid = h.spatial.gram_diag(&cq)?[0] - kq.dot(&w);
            weights[q] = Some((w, resid.max(0.0) * h.temporal.variance()));
        }

        let (_, filtered) = run_filter(&self.grid, &h, &steps, true)?;
        let mut mean = vec![0.0; xq.nrows()];
        let mut var = vec![0.0; xq.nrows()];
        let mut read = |k: usize, m: &DVector<f64>, p: &DMatrix<f64>| {
            for &q in &by_step[k] {
                if let Some(i) = on_site[q] {
                    mean[q] = h.mean + m[i * s];
                    var[q] = p[(i * s, i * s)];
                } else {
                    let (w, resid) = weights[q].as_ref().unwrap();
                    let mut mq = h.mean;
                    let mut vq = *resid;
                    for a in 0..ns {
                        mq += w[a] * m[a * s];
                        for b in 0..ns {
                            vq += w[a] * w[b] * p[(a * s, b * s)];
                        }
                    }
                    mean[q] = mq;
                    var[q] = vq;
                }
            }
        };
        smooth(&h, &steps, &filtered, &ks, &mut read)?;
        Ok(PosteriorPrediction::from_parts(mean, var, h.noise))
    }
}

/// Forward pass. Returns the log likelihood and, when `store` is set, the
/// filtered moments at every step.
fn run_filter(
    grid: &SpatioTemporalGrid,
    h: &Hyper,
    steps: &[Step],
    store: bool,
) -> Result<(f64, Vec<Filtered>)> {
    let ns = grid.n_sites();
    let s = h.temporal.state_dim();
    let dim = ns * s;
    let ks = h.spatial.gram_sym(&grid.coords)?;
    let pinf = h.temporal.stationary_cov();
    let mut cache: HashMap<u64, (DMatrix<f64>, DMatrix<f64>)> = HashMap::new();
    let mut m = DVector::zeros(dim);
    let mut p = DMatrix::from_fn(dim, dim, |i, j| ks[(i / s, j / s)] * pinf[(i % s, j % s)]);
    let mut loglik = 0.0;
    let mut out = Vec::with_capacity(if store { steps.len() } else { 0 });
    for (k, st) in steps.iter().enumerate() {
        if k > 0 {
            let dt = st.t - steps[k - 1].t;
            if !cache.contains_key(&dt.to_bits()) {
                cache.insert(dt.to_bits(), h.temporal.discretize(dt)?);
            }
            let (a, q) = &cache[&dt.to_bits()];
            m = block_apply_vec(a, &m);
            p = block_predict_cov(&p, a, q, &ks);
        }
        if let Some(r) = st.row {
            let obs: Vec<(usize, f64)> = (0..ns)
                .filter_map(|i| grid.get(r, i).map(|y| (i * s, y - h.mean)))
                .collect();
            if !obs.is_empty() {
                loglik += update(&mut m, &mut p, &obs, h.noise)?;
            }
        }
        if store {
            out.push(Filtered {
                m: m.clone(),
                p: p.clone(),
            });
        }
    }
    if !loglik.is_finite() {
        return Err(GpError::Numerical(format!("log likelihood is {loglik}")));
    }
    Ok((loglik, out))
}

/// Kalman update on the observed state components; returns the innovation
/// log density.
fn update(m: &mut DVector<f64>, p: &mut DMatrix<f64>, obs: &[(usize, f64)], noise: f64) -> Result<f64> {
    let idx: Vec<usize> = obs.iter().map(|o| o.0).collect();
    let k = idx.len();
    let rows = p.select_rows(&idx);
    let mut sm = rows.select_columns(&idx);
    for d in 0..k {
        sm[(d, d)] += noise;
    }
    let chol = cholesky_jittered(&sm)?;
    let innov = DVector::from_fn(k, |d, _| obs[d].1 - m[idx[d]]);
    let v = chol.solve_lower_vec(&innov);
    let w = chol.solve_lower_mat(&rows);
    let wt = w.transpose();
    m.gemv(1.0, &wt, &v, 1.0);
    p.gemm(-1.0, &wt, &w, 1.0);
    symmetrize(p);
    Ok(-0.5 * (v.norm_squared() + chol.log_det() + k as f64 * LN_2PI))
}

/// Backward RTS pass, handing the smoothed moments of each step to `read`.
fn smooth<F>(
    h: &Hyper,
    steps: &[Step],
    filtered: &[Filtered],
    ks: &DMatrix<f64>,
    read: &mut F,
) -> Result<()>
where
    F: FnMut(usize, &DVector<f64>, &DMatrix<f64>),
{
    let Some(last) = filtered.last() else {
        return Ok(());
    };
    let mut ms = last.m.clone();
    let mut ps = last.p.clone();
    read(steps.len() - 1, &ms, &ps);
    for k in (0..steps.len() - 1).rev() {
        let f = &filtered[k];
        let (a, q) = h.temporal.discretize(steps[k + 1].t - steps[k].t)?;
        let m_pred = block_apply_vec(&a, &f.m);
        let p_pred = block_predict_cov(&f.p, &a, &q, ks);
        let c = block_right_t(&f.p, &a);
        let gain = cholesky_jittered(&p_pred)?.solve_mat(&c.transpose()).transpose();
        ms = &f.m + &gain * (&ms - m_pred);
        let dp = &ps - p_pred;
        ps = &f.p + &gain * dp * gain.transpose();
        symmetrize(&mut ps);
        read(k, &ms, &ps);
    }
    Ok(())
}

#[cfg(test)]
pub(crate) fn filtered_and_smoothed_variances(model: &StateSpaceModel) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = model.hyper();
    let steps: Vec<Step> = (0..model.grid.n_times())
        .map(|r| Step {
            t: model.grid.times[r],
            row: Some(r),
        })
        .collect();
    let (_, filt) = run_filter(&model.grid, &h, &steps, true)?;
    let fv: Vec<f64> = filt.iter().flat_map(|f| f.p.diagonal().iter().copied().collect::<Vec<_>>()).collect();
    let ks = h.spatial.gram_sym(&model.grid.coords)?;
    let mut sv = vec![Vec::new(); steps.len()];
    smooth(&h, &steps, &filt, &ks, &mut |k, _, p| {
        sv[k] = p.diagonal().iter().copied().collect();
    })?;
    Ok((fv, sv.into_iter().flatten().collect()))
}
