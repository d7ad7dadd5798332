//! Sparse variational GP with a whitened, uncollapsed bound.
//!
//! The variational distribution is over `u' = L⁻¹u` where `L Lᵀ = K_ZZ`, with
//! `q(u') = N(m, S)` and `S = L_S L_Sᵀ`. Parameters are laid out as the
//! kernel's log-hyperparameters, the log noise variance, the prior mean, `Z`
//! row by row, `m`, and the lower triangle of `L_S` row by row.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky_jittered, CholeskyFactor};
use crate::optim::{mask_frozen, Adam, FitResult, OptimizerOptions};
use crate::prediction::PosteriorPrediction;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    /// M×d inducing inputs.
    pub z: DMatrix<f64>,
    /// Whitened variational mean.
    pub q_mu: DVector<f64>,
    /// Lower-triangular factor of the whitened variational covariance.
    pub q_sqrt: DMatrix<f64>,
}

impl InducingSet {
    /// Inducing inputs with `q(u')` equal to the prior.
    pub fn new(z: DMatrix<f64>) -> Self {
        let m = z.nrows();
        InducingSet {
            z,
            q_mu: DVector::zeros(m),
            q_sqrt: DMatrix::identity(m, m),
        }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn q_cov(&self) -> DMatrix<f64> {
        &self.q_sqrt * self.q_sqrt.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgpModel {
    pub kernel: KernelSpec,
    pub log_noise_variance: f64,
    pub mean: f64,
    pub inducing: InducingSet,
}

struct DataTerms {
    a: DMatrix<f64>,
    mu: DVector<f64>,
    v: DVector<f64>,
}

fn lower_part(a: &mut DMatrix<f64>) {
    for j in 0..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            a[(i, j)] = 0.0;
        }
    }
}

impl SvgpModel {
    pub fn new(
        kernel: KernelSpec,
        inducing: InducingSet,
        noise_variance: f64,
        mean: f64,
    ) -> Result<Self> {
        let m = SvgpModel {
            kernel,
            log_noise_variance: noise_variance.ln(),
            mean,
            inducing,
        };
        m.validate()?;
        Ok(m)
    }

    /// Check shapes and finiteness, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        let ind = &self.inducing;
        let m = ind.len();
        if m == 0 {
            return Err(GpError::input("at least one inducing point is required"));
        }
        if ind.q_mu.len() != m || ind.q_sqrt.nrows() != m || ind.q_sqrt.ncols() != m {
            return Err(GpError::input(format!(
                "variational parameters do not match {m} inducing points"
            )));
        }
        self.kernel.validate(ind.z.ncols())?;
        let noise = self.noise_variance();
        if !(noise.is_finite() && noise > 0.0 && self.mean.is_finite()) {
            return Err(GpError::input("noise variance and prior mean must be finite"));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn dim(&self) -> usize {
        self.inducing.z.ncols()
    }

    pub fn n_params(&self) -> usize {
        let m = self.num_inducing();
        self.kernel.n_params() + 2 + m * self.dim() + m + m * (m + 1) / 2
    }

    pub fn params(&self) -> Vec<f64> {
        let ind = &self.inducing;
        let m = ind.len();
        let mut p = self.kernel.params();
        p.push(self.log_noise_variance);
        p.push(self.mean);
        for i in 0..m {
            p.extend(ind.z.row(i).iter());
        }
        p.extend(ind.q_mu.iter());
        for i in 0..m {
            for j in 0..=i {
                p.push(ind.q_sqrt[(i, j)]);
            }
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let m = self.num_inducing();
        let mut n = self.kernel.param_names();
        n.push("log_noise_variance".into());
        n.push("mean".into());
        for i in 0..m {
            for k in 0..self.dim() {
                n.push(format!("z[{i}][{k}]"));
            }
        }
        for i in 0..m {
            n.push(format!("q_mu[{i}]"));
        }
        for i in 0..m {
            for j in 0..=i {
                n.push(format!("q_sqrt[{i}][{j}]"));
            }
        }
        n
    }

    /// Set every parameter at once. On error the model is left unchanged.
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
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
        let (m, d) = (self.num_inducing(), self.dim());
        let nk = self.kernel.n_params();
        let mut kernel = self.kernel.clone();
        kernel.set_params(&p[..nk])?;
        let mut at = nk + 2;
        let z = DMatrix::from_row_slice(m, d, &p[at..at + m * d]);
        at += m * d;
        let q_mu = DVector::from_column_slice(&p[at..at + m]);
        at += m;
        let mut q_sqrt = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                q_sqrt[(i, j)] = p[at];
                at += 1;
            }
        }
        self.kernel = kernel;
        self.log_noise_variance = p[nk];
        self.mean = p[nk + 1];
        self.inducing = InducingSet { z, q_mu, q_sqrt };
        Ok(())
    }

    fn kzz_chol(&self) -> Result<CholeskyFactor> {
        cholesky_jittered(&self.kernel.gram_sym(&self.inducing.z)?)
    }

    /// `KL[q(u) ‖ p(u)]`.
    pub fn kl_divergence(&self) -> f64 {
        let ls = &self.inducing.q_sqrt;
        let m = self.inducing.q_mu.as_slice();
        let mut fro = 0.0;
        let mut logdet = 0.0;
        for j in 0..ls.ncols() {
            logdet += ls[(j, j)].abs().ln();
            for i in j..ls.nrows() {
                fro += ls[(i, j)] * ls[(i, j)];
            }
        }
        0.5 * (fro + m.iter().map(|v| v * v).sum::<f64>() - m.len() as f64 - 2.0 * logdet)
    }

    fn check_data(&self, x: &DMatrix<f64>, y: Option<&DVector<f64>>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(GpError::input(format!(
                "inputs have {} columns, model expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        if let Some(y) = y {
            if y.len() != x.nrows() {
                return Err(GpError::input("input and target lengths differ"));
            }
            if y.is_empty() {
                return Err(GpError::input("batch is empty"));
            }
        }
        Ok(())
    }

    fn data_terms(&self, chol: &CholeskyFactor, x: &DMatrix<f64>) -> Result<DataTerms> {
        let kzx = self.kernel.gram(&self.inducing.z, x)?;
        let a = chol.solve_lower_mat(&kzx);
        let mu = a.tr_mul(&self.inducing.q_mu).add_scalar(self.mean);
        let b = self.inducing.q_sqrt.tr_mul(&a);
        let kdiag = self.kernel.gram_diag(x)?;
        let v = DVector::from_fn(x.nrows(), |i, _| {
            kdiag[i] - a.column(i).norm_squared() + b.column(i).norm_squared()
        });
        Ok(DataTerms { a, mu, v })
    }

    fn expected_loglik(&self, y: &DVector<f64>, t: &DataTerms) -> f64 {
        let s2 = self.noise_variance();
        let c0 = -0.5 * (LN_2PI + s2.ln());
        (0..y.len())
            .map(|i| c0 - ((y[i] - t.mu[i]).powi(2) + t.v[i]) / (2.0 * s2))
            .sum()
    }

    /// Evidence lower bound on a batch, with the data term rescaled by
    /// `full_n / batch_n`.
    pub fn elbo(&self, x: &DMatrix<f64>, y: &DVector<f64>, full_n: usize) -> Result<f64> {
        self.check_data(x, Some(y))?;
        let chol = self.kzz_chol()?;
        let n = y.len();
        let mut fit = 0.0;
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let xb = x.rows(start, len).into_owned();
            let yb = y.rows(start, len).into_owned();
            fit += self.expected_loglik(&yb, &self.data_terms(&chol, &xb)?);
        }
        Ok(full_n as f64 / n as f64 * fit - self.kl_divergence())
    }

    /// ELBO and its gradient with respect to [`SvgpModel::params`].
    pub fn elbo_and_grad(
        &self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        full_n: usize,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_data(x, Some(y))?;
        let ind = &self.inducing;
        let m = ind.len();
        let chol = self.kzz_chol()?;
        let t = self.data_terms(&chol, x)?;
        let s2 = self.noise_variance();
        let c = full_n as f64 / y.len() as f64;
        let elbo = c * self.expected_loglik(y, &t) - self.kl_divergence();

        let r = y - &t.mu;
        let g_mu = &r * (c / s2);
        let g_v = -c / (2.0 * s2);
        let a = &t.a;
        let ls = &ind.q_sqrt;

        let dm = a * &g_mu - &ind.q_mu;
        let aat = a * a.transpose();
        let mut dls = (&aat * ls) * (2.0 * g_v) - ls;
        for i in 0..m {
            dls[(i, i)] += 1.0 / ls[(i, i)];
        }
        lower_part(&mut dls);

        let mut sw = ls * ls.transpose();
        for i in 0..m {
            sw[(i, i)] -= 1.0;
        }
        let a_bar = &ind.q_mu * g_mu.transpose() + (sw * a) * (2.0 * g_v);
        let b_bar = chol.solve_upper_mat(&a_bar);
        let mut l_bar = -(&b_bar * a.transpose());
        lower_part(&mut l_bar);
        let mut phi = chol.l().tr_mul(&l_bar);
        lower_part(&mut phi);
        for i in 0..m {
            phi[(i, i)] *= 0.5;
        }
        let half = chol.solve_upper_mat(&phi).transpose();
        let g_bar = chol.solve_upper_mat(&half).transpose();

        let z = &ind.z;
        let mut g = self.kernel.contract_param_grad_sym(z, &g_bar)?;
        let gk2 = self.kernel.contract_param_grad(z, x, &b_bar)?;
        let gk3 = self
            .kernel
            .contract_param_grad_diag(x, &DVector::from_element(y.len(), g_v))?;
        for (k, v) in g.iter_mut().enumerate() {
            *v += gk2[k] + gk3[k];
        }
        g.push(
            c * (0..y.len())
                .map(|i| -0.5 + (r[i] * r[i] + t.v[i]) / (2.0 * s2))
                .sum::<f64>(),
        );
        g.push(g_mu.sum());
        let gz = self.kernel.contract_input_grad(z, z, &(&g_bar + g_bar.transpose()))?
            + self.kernel.contract_input_grad(z, x, &b_bar)?;
        for i in 0..m {
            g.extend(gz.row(i).iter());
        }
        g.extend(dm.iter());
        for i in 0..m {
            for j in 0..=i {
                g.push(dls[(i, j)]);
            }
        }
        Ok((elbo, g))
    }

    /// Replace `q(u')` by its optimum for the current hyperparameters and
    /// inducing inputs: `S = Λ⁻¹`, `m = σ⁻² Λ⁻¹ A (y - μ₀)` with
    /// `Λ = I + σ⁻² A Aᵀ`.
    pub fn set_optimal_q(&mut self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
        self.check_data(x, Some(y))?;
        let (lam, ar) = self.lambda_terms(x, y)?;
        let lc = cholesky_jittered(&lam)?;
        let s = lc.inverse();
        let q_sqrt = cholesky_jittered(&s)?.l().clone();
        self.inducing.q_mu = lc.solve_vec(&ar) / self.noise_variance();
        self.inducing.q_sqrt = q_sqrt;
        Ok(())
    }

    /// `(Λ, A (y - μ₀))` accumulated over chunks.
    fn lambda_terms(
        &self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let m = self.num_inducing();
        let chol = self.kzz_chol()?;
        let mut aat = DMatrix::zeros(m, m);
        let mut ar = DVector::zeros(m);
        let n = y.len();
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let kzx = self.kernel.gram(&self.inducing.z, &x.rows(start, len).into_owned())?;
            let a = chol.solve_lower_mat(&kzx);
            aat.gemm(1.0, &a, &a.transpose(), 1.0);
            ar += &a * y.rows(start, len).add_scalar(-self.mean);
        }
        let s2 = self.noise_variance();
        let mut lam = aat / s2;
        for i in 0..m {
            lam[(i, i)] += 1.0;
        }
        Ok((lam, ar))
    }

    /// Collapsed bound `log N(y | μ₀, Q + σ²I) - tr(K - Q) / (2σ²)`, the
    /// maximum of the uncollapsed bound over `q(u)`.
    pub fn collapsed_bound(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
        self.check_data(x, Some(y))?;
        let (lam, ar) = self.lambda_terms(x, y)?;
        let lc = cholesky_jittered(&lam)?;
        let s2 = self.noise_variance();
        let n = y.len() as f64;
        let r = y.add_scalar(-self.mean);
        let w = lc.solve_lower_vec(&ar);
        let quad = (r.norm_squared() - w.norm_squared() / s2) / s2;
        let chol = self.kzz_chol()?;
        let kdiag = self.kernel.gram_diag(x)?;
        let mut trace = kdiag.sum();
        for start in (0..y.len()).step_by(CHUNK) {
            let len = CHUNK.min(y.len() - start);
            let kzx = self.kernel.gram(&self.inducing.z, &x.rows(start, len).into_owned())?;
            trace -= chol.solve_lower_mat(&kzx).norm_squared();
        }
        Ok(-0.5 * (n * LN_2PI + n * s2.ln() + lc.log_det() + quad) - trace / (2.0 * s2))
    }

    /// Predictive marginals at each row of `xq`.
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<PosteriorPrediction> {
        self.check_data(xq, None)?;
        let chol = self.kzz_chol()?;
        let mut mean = Vec::with_capacity(xq.nrows());
        let mut var = Vec::with_capacity(xq.nrows());
        for start in (0..xq.nrows()).step_by(CHUNK) {
            let len = CHUNK.min(xq.nrows() - start);
            let t = self.data_terms(&chol, &xq.rows(start, len).into_owned())?;
            mean.extend(t.mu.iter());
            var.extend(t.v.iter());
        }
        Ok(PosteriorPrediction::from_parts(mean, var, self.noise_variance()))
    }
}

/// k-means++ seeding over the rows of `x`: the first centre uniformly, each
/// next one with probability proportional to its squared distance from the
/// nearest chosen centre. Falls back to a uniform subsample when `x` has
/// fewer than `m` distinct rows.
pub fn init_inducing(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if m == 0 {
        return Err(GpError::input("number of inducing points must be positive"));
    }
    if m > n {
        return Err(GpError::input(format!(
            "{m} inducing points requested from {n} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &rows[chosen[0]])).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            return Ok(x.select_rows(&idx));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 {
                pick = i;
                if u < *w {
                    break;
                }
                u -= w;
            }
        }
        chosen.push(pick);
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(dist2(r, &rows[pick]));
        }
    }
    Ok(x.select_rows(&chosen))
}

/// Stochastic maximization of the ELBO with Adam on shuffled minibatches.
///
/// `q(u)` is first set to its optimum for the initial hyperparameters. The
/// full-batch ELBO is evaluated every `eval_every` steps and at the end; the
/// model is left at the best evaluated iterate, and `trace` records the
/// best-so-far value at each evaluation. Stops early when `patience`
/// consecutive evaluations improve the best value by less than `rel_tol`.
pub fn fit_svgp(
    model: &mut SvgpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &OptimizerOptions,
) -> Result<FitResult> {
    model.check_data(x, Some(y))?;
    let n = y.len();
    if model.num_inducing() > n {
        return Err(GpError::input("more inducing points than training rows"));
    }
    model.set_optimal_q(x, y)?;
    let initial = model.elbo(x, y, n)?;
    if !initial.is_finite() {
        return Err(GpError::input(format!("ELBO is not finite at the initial parameters ({initial})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch = opts.batch_size.clamp(1, n);
    let eval_every = opts.eval_every.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut params = model.params();
    let mut best = (initial, params.clone());
    let mut trace = vec![initial];
    let mut adam = Adam::new(params.len());
    let mut lr = opts.learning_rate;
    let mut stale = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut work = model.clone();

    for it in 0..opts.max_iters {
        iterations = it + 1;
        let (xb, yb) = if batch == n {
            (None, None)
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            (
                Some(x.select_rows(idx)),
                Some(DVector::from_fn(batch, |i, _| y[idx[i]])),
            )
        };
        let step = work.set_params(&params).and_then(|_| {
            work.elbo_and_grad(xb.as_ref().unwrap_or(x), yb.as_ref().unwrap_or(y), n)
        });
        match step {
            Ok((_, mut g)) if g.iter().all(|v| v.is_finite()) => {
                mask_frozen(&mut g, &opts.frozen);
                let delta = adam.step(&g, lr);
                for (p, d) in params.iter_mut().zip(&delta) {
                    *p += d;
                }
            }
            _ => {
                params = best.1.clone();
                lr *= 0.5;
                adam.reset();
                if lr < opts.learning_rate * 1e-8 {
                    break;
                }
                continue;
            }
        }
        if iterations % eval_every == 0 || iterations == opts.max_iters {
            let value = work
                .set_params(&params)
                .and_then(|_| work.elbo(x, y, n))
                .unwrap_or(f64::NEG_INFINITY);
            if value.is_finite() && value > best.0 {
                let rel = (value - best.0) / best.0.abs().max(1.0);
                best = (value, params.clone());
                stale = if rel < opts.rel_tol { stale + 1 } else { 0 };
            } else {
                stale += 1;
            }
            trace.push(best.0);
            if stale >= opts.patience {
                converged = true;
                break;
            }
        }
    }
    model.set_params(&best.1)?;
    Ok(FitResult {
        params: best.1,
        param_names: model.param_names(),
        objective: best.0,
        initial_objective: initial,
        iterations,
        converged,
        trace,
    })
}
