//! Exact Gaussian-process regression with a constant prior mean.
//!
//! Parameters are laid out as the kernel's log-hyperparameters, then the log
//! noise variance, then the prior mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GpError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky_jittered, CholeskyFactor};
use crate::optim::{maximize, FitResult, OptimizerOptions};
use crate::prediction::PosteriorPrediction;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
struct Posterior {
    chol: CholeskyFactor,
    alpha: DVector<f64>,
    lml: f64,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelSpec,
    log_noise: f64,
    mean: f64,
    x: DMatrix<f64>,
    y: DVector<f64>,
    post: Posterior,
}

/// Plain-data form of a [`GpModel`], used for saving and loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModelParts {
    pub kernel: KernelSpec,
    pub log_noise_variance: f64,
    pub mean: f64,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

fn posterior(
    kernel: &KernelSpec,
    log_noise: f64,
    mean: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<Posterior> {
    let noise = log_noise.exp();
    if !(noise.is_finite() && noise > 0.0 && mean.is_finite()) {
        return Err(GpError::input(format!(
            "invalid noise variance {noise} or prior mean {mean}"
        )));
    }
    let mut k = kernel.gram_sym(x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    let chol = cholesky_jittered(&k)?;
    let r = y.add_scalar(-mean);
    let alpha = chol.solve_vec(&r);
    let n = y.len() as f64;
    let lml = -0.5 * r.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n * LN_2PI;
    if !lml.is_finite() {
        return Err(GpError::Numerical(format!("log marginal likelihood is {lml}")));
    }
    Ok(Posterior { chol, alpha, lml })
}

impl GpModel {
    /// Model over `(x, y)` with the prior mean set to the sample mean of `y`.
    pub fn new(
        kernel: KernelSpec,
        x: DMatrix<f64>,
        y: DVector<f64>,
        noise_variance: f64,
    ) -> Result<Self> {
        let mean = if y.is_empty() { 0.0 } else { y.mean() };
        Self::from_parts(GpModelParts {
            kernel,
            log_noise_variance: noise_variance.ln(),
            mean,
            x,
            y,
        })
    }

    pub fn from_dataset(kernel: KernelSpec, data: &Dataset, noise_variance: f64) -> Result<Self> {
        Self::new(kernel, data.x.clone(), data.y.clone(), noise_variance)
    }

    pub fn from_parts(p: GpModelParts) -> Result<Self> {
        if p.y.is_empty() {
            return Err(GpError::input("training set is empty"));
        }
        if p.x.nrows() != p.y.len() {
            return Err(GpError::input(format!(
                "{} input rows but {} targets",
                p.x.nrows(),
                p.y.len()
            )));
        }
        p.kernel.validate(p.x.ncols())?;
        let post = posterior(&p.kernel, p.log_noise_variance, p.mean, &p.x, &p.y)?;
        Ok(GpModel {
            kernel: p.kernel,
            log_noise: p.log_noise_variance,
            mean: p.mean,
            x: p.x,
            y: p.y,
            post,
        })
    }

    pub fn to_parts(&self) -> GpModelParts {
        GpModelParts {
            kernel: self.kernel.clone(),
            log_noise_variance: self.log_noise,
            mean: self.mean,
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn prior_mean(&self) -> f64 {
        self.mean
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Jitter that was needed to factor `K + σ²I` (zero if none).
    pub fn jitter(&self) -> f64 {
        self.post.chol.jitter()
    }

    pub fn n_params(&self) -> usize {
        self.kernel.n_params() + 2
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.kernel.params();
        p.push(self.log_noise);
        p.push(self.mean);
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.kernel.param_names();
        n.push("log_noise_variance".into());
        n.push("mean".into());
        n
    }

    /// Set every parameter at once. On error the model is left unchanged.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(GpError::input(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let nk = self.kernel.n_params();
        let mut kernel = self.kernel.clone();
        kernel.set_params(&params[..nk])?;
        let post = posterior(&kernel, params[nk], params[nk + 1], &self.x, &self.y)?;
        self.kernel = kernel;
        self.log_noise = params[nk];
        self.mean = params[nk + 1];
        self.post = post;
        Ok(())
    }

    /// `log N(y | μ₀, K + σ²I)`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.post.lml
    }

    /// Gradient of the log marginal likelihood with respect to
    /// [`GpModel::params`].
    pub fn grad_log_marginal_likelihood(&self) -> Result<Vec<f64>> {
        let alpha = &self.post.alpha;
        let kinv = self.post.chol.inverse();
        let w = alpha * alpha.transpose() - &kinv;
        let mut g: Vec<f64> = self
            .kernel
            .contract_param_grad_sym(&self.x, &w)?
            .into_iter()
            .map(|v| 0.5 * v)
            .collect();
        g.push(0.5 * self.noise_variance() * (alpha.norm_squared() - kinv.trace()));
        g.push(alpha.sum());
        Ok(g)
    }

    /// Maximize the log marginal likelihood; the model ends at the best
    /// accepted iterate.
    pub fn fit(&mut self, opts: &OptimizerOptions) -> Result<FitResult> {
        let base = self.clone();
        let mut res = maximize(
            self.params(),
            |p| {
                let mut m = base.clone();
                m.set_params(p)?;
                Ok((m.log_marginal_likelihood(), m.grad_log_marginal_likelihood()?))
            },
            opts,
        )?;
        self.set_params(&res.params)?;
        res.param_names = self.param_names();
        Ok(res)
    }

    fn check_query(&self, xq: &DMatrix<f64>) -> Result<()> {
        if xq.ncols() != self.x.ncols() {
            return Err(GpError::input(format!(
                "query has {} columns, model was trained on {}",
                xq.ncols(),
                self.x.ncols()
            )));
        }
        Ok(())
    }

    /// Posterior mean and marginal variances at each row of `xq`.
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<PosteriorPrediction> {
        self.check_query(xq)?;
        let ks = self.kernel.gram(&self.x, xq)?;
        let mean = ks.tr_mul(&self.post.alpha).add_scalar(self.mean);
        let v = self.post.chol.solve_lower_mat(&ks);
        let prior = self.kernel.gram_diag(xq)?;
        let var = (0..xq.nrows())
            .map(|j| prior[j] - v.column(j).norm_squared())
            .collect();
        Ok(PosteriorPrediction::from_parts(
            mean.iter().copied().collect(),
            var,
            self.noise_variance(),
        ))
    }

    /// Posterior mean and full latent covariance at the rows of `xq`.
    pub fn predict_full_cov(&self, xq: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_query(xq)?;
        let ks = self.kernel.gram(&self.x, xq)?;
        let mean = ks.tr_mul(&self.post.alpha).add_scalar(self.mean);
        let v = self.post.chol.solve_lower_mat(&ks);
        let mut cov = self.kernel.gram_sym(xq)? - v.tr_mul(&v);
        crate::linalg::symmetrize(&mut cov);
        Ok((mean, cov))
    }
}

/// Uniform random subset of `n` rows, deterministic per seed.
pub fn subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    data.subsample(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_x(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    fn random_y(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn composite() -> KernelSpec {
        KernelSpec::sum(vec![
            KernelSpec::se_ard(1.3, &[0.7, 1.4]).on_dims(vec![0, 1]),
            KernelSpec::product(vec![
                KernelSpec::se(0.8, 2.0),
                KernelSpec::periodic(1.0, 0.9, 1.7),
            ])
            .on_dims(vec![2]),
        ])
    }

    fn dense_cov(m: &GpModel) -> DMatrix<f64> {
        let n = m.len();
        DMatrix::from_fn(n, n, |i, j| {
            let xi: Vec<f64> = m.x.row(i).iter().copied().collect();
            let xj: Vec<f64> = m.x.row(j).iter().copied().collect();
            m.kernel.eval(&xi, &xj).unwrap() + if i == j { m.noise_variance() } else { 0.0 }
        })
    }

    fn dense_lml(m: &GpModel) -> f64 {
        let k = dense_cov(m);
        let kinv = k.clone().try_inverse().unwrap();
        let r = m.y.add_scalar(-m.mean);
        let n = m.len() as f64;
        -0.5 * (r.transpose() * kinv * &r)[0]
            - 0.5 * k.determinant().ln()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn one_point_closed_forms() {
        let x = DMatrix::from_element(1, 1, 0.3);
        let m = GpModel::new(KernelSpec::se(1.0, 1.0), x.clone(), DVector::from_element(1, 2.0), 1.0)
            .unwrap();
        assert_relative_eq!(
            m.log_marginal_likelihood(),
            -0.5 * (4.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
        let mut m = GpModel::new(KernelSpec::se(1.0, 1.0), x, DVector::from_element(1, 2.5), 0.1)
            .unwrap();
        let mut p = m.params();
        p[3] = 2.0;
        m.set_params(&p).unwrap();
        let want = -0.5 * (2.0 * std::f64::consts::PI * 1.1).ln() - 0.25 / 2.2;
        assert_relative_eq!(m.log_marginal_likelihood(), want, epsilon = 1e-14);
    }

    #[test]
    fn lml_matches_dense_density() {
        let m = GpModel::new(composite(), random_x(5, 3, 1), random_y(5, 1), 0.3).unwrap();
        assert!((m.log_marginal_likelihood() - dense_lml(&m)).abs() <= 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = GpModel::new(composite(), random_x(30, 3, 2), random_y(30, 2), 0.2).unwrap();
        let mut p = m.params();
        *p.last_mut().unwrap() = 0.3;
        m.set_params(&p).unwrap();
        let g = m.grad_log_marginal_likelihood().unwrap();
        let fd = crate::optim::finite_difference_gradient(&p, 1e-5, |q| {
            let mut mm = m.clone();
            mm.set_params(q)?;
            Ok(mm.log_marginal_likelihood())
        })
        .unwrap();
        for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!(
                (a - b).abs() <= 1e-4 * b.abs().max(1.0),
                "param {i} ({}): analytic {a} vs fd {b}",
                m.param_names()[i]
            );
        }
    }

    #[test]
    fn mean_gradient_vanishes_on_constant_targets() {
        let m = GpModel::new(
            KernelSpec::se(1.0, 1.0),
            random_x(10, 1, 3),
            DVector::from_element(10, 4.0),
            0.1,
        )
        .unwrap();
        assert_eq!(m.prior_mean(), 4.0);
        assert!(m.grad_log_marginal_likelihood().unwrap()[3].abs() < 1e-12);
    }

    #[test]
    fn stationary_at_one_parameter_optimum() {
        let mut m = GpModel::new(KernelSpec::se(1.0, 1.0), random_x(40, 1, 4), random_y(40, 4), 0.2)
            .unwrap();
        let opts = OptimizerOptions {
            max_iters: 5000,
            rel_tol: 0.0,
            grad_tol: 1e-6,
            frozen: vec![0, 1, 2],
            ..Default::default()
        };
        m.fit(&opts).unwrap();
        let g = m.grad_log_marginal_likelihood().unwrap()[3];
        assert!(g.abs() <= 1e-5, "gradient {g}");
    }

    #[test]
    fn recovers_lengthscale_from_se_samples() {
        let mut ells = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..30.0));
            let truth = KernelSpec::se(1.0, 2.0);
            let mut k = truth.gram_sym(&x).unwrap();
            for i in 0..n {
                k[(i, i)] += 0.1;
            }
            let l = cholesky_jittered(&k).unwrap();
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = l.l() * z;
            let mut m = GpModel::new(KernelSpec::se(1.0, 1.0), x, y, 0.5).unwrap();
            let before = m.log_marginal_likelihood();
            let fit = m.fit(&OptimizerOptions::default()).unwrap();
            assert!(fit.objective >= before);
            assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
            let ell = m.kernel().params()[1].exp();
            // single draws scatter around the truth (seed 8's maximum is at 1.40)
            assert!((ell / 2.0 - 1.0).abs() <= 0.5, "seed {seed}: lengthscale {ell}");
            ells.push(ell);
        }
        let mean = ells.iter().sum::<f64>() / ells.len() as f64;
        assert!((mean / 2.0 - 1.0).abs() <= 0.3, "mean lengthscale {mean}");
    }

    #[test]
    fn constant_targets_give_constant_predictions() {
        let x = random_x(30, 2, 5);
        let mut m = GpModel::new(KernelSpec::se(1.0, 1.0), x, DVector::from_element(30, 7.5), 0.1)
            .unwrap();
        m.fit(&OptimizerOptions::default()).unwrap();
        assert!((m.prior_mean() - 7.5).abs() < 1e-3);
        let p = m.predict(&random_x(20, 2, 6)).unwrap();
        assert!(p.mean.iter().all(|v| (v - 7.5).abs() < 1e-3));
    }

    #[test]
    fn interpolates_without_noise() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.5, 4.0]);
        let y = DVector::from_column_slice(&[0.3, -1.0, 2.0, 0.5]);
        let m = GpModel::new(KernelSpec::se(1.0, 1.0), x.clone(), y.clone(), 1e-10).unwrap();
        let p = m.predict(&x).unwrap();
        for i in 0..4 {
            assert!((p.mean[i] - y[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let m = GpModel::new(KernelSpec::se(1.7, 0.5), random_x(20, 1, 7), random_y(20, 7), 0.1)
            .unwrap();
        let p = m.predict(&DMatrix::from_element(1, 1, 50.0)).unwrap();
        assert!((p.mean[0] - m.prior_mean()).abs() < 1e-3);
        assert!((p.latent_var[0] - 1.7).abs() < 1e-3);
    }

    #[test]
    fn prediction_matches_dense_oracle() {
        let m = GpModel::new(composite(), random_x(8, 3, 8), random_y(8, 8), 0.25).unwrap();
        let xq = random_x(5, 3, 9);
        let p = m.predict(&xq).unwrap();
        let kinv = dense_cov(&m).try_inverse().unwrap();
        let r = m.y.add_scalar(-m.prior_mean());
        for q in 0..5 {
            let xqv: Vec<f64> = xq.row(q).iter().copied().collect();
            let ks = DVector::from_fn(8, |i, _| {
                let xi: Vec<f64> = m.x.row(i).iter().copied().collect();
                m.kernel.eval(&xi, &xqv).unwrap()
            });
            let mean = m.prior_mean() + (ks.transpose() * &kinv * &r)[0];
            let var = m.kernel.eval(&xqv, &xqv).unwrap() - (ks.transpose() * &kinv * &ks)[0];
            assert!((p.mean[q] - mean).abs() <= 1e-8);
            assert!((p.latent_var[q] - var).abs() <= 1e-8);
            assert_eq!(p.observed_var[q], p.latent_var[q] + m.noise_variance());
        }
        let (mean, cov) = m.predict_full_cov(&xq).unwrap();
        for q in 0..5 {
            assert!((mean[q] - p.mean[q]).abs() <= 1e-12);
            assert!((cov[(q, q)] - p.latent_var[q]).abs() <= 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = GpModel::new(KernelSpec::se(1.0, 1.0), random_x(5, 2, 10), random_y(5, 10), 0.1)
            .unwrap();
        assert!(m.predict(&random_x(3, 3, 0)).is_err());
        assert!(GpModel::new(KernelSpec::se(1.0, 1.0), random_x(5, 2, 0), random_y(4, 0), 0.1)
            .is_err());
        assert!(GpModel::new(
            KernelSpec::se(1.0, 1.0),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            0.1
        )
        .is_err());
        let mut m2 = m.clone();
        let mut p = m.params();
        p[2] = f64::NAN;
        assert!(m2.set_params(&p).is_err());
        assert_eq!(m2.params(), m.params());
    }

    #[test]
    fn subsample_rows_come_from_parent() {
        let n = 47_520;
        let ds = Dataset {
            x: DMatrix::from_fn(n, 1, |i, _| i as f64),
            y: DVector::from_fn(n, |i, _| i as f64),
            normalizer: crate::data::Normalizer {
                columns: vec![crate::data::Column::Time],
                input_mean: vec![0.0],
                input_scale: vec![1.0],
                target_mean: 0.0,
                target_scale: 1.0,
                time_origin: chrono::DateTime::UNIX_EPOCH,
            },
            sites: vec![0; n],
            site_ids: vec!["a".into()],
        };
        let s = subsample(&ds, 1000, 11).unwrap();
        let mut ids: Vec<usize> = s.y.iter().map(|v| *v as usize).collect();
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(s.x[(i, 0)], *id as f64);
        }
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
        assert!(ids.iter().all(|&i| i < n));
        assert!(subsample(&ds, n + 1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn posterior_variance_bounded_by_prior(seed in 0u64..1000, n in 1usize..10) {
            let k = KernelSpec::se_ard(1.2, &[0.8, 1.5]);
            let m = GpModel::new(k.clone(), random_x(n, 2, seed), random_y(n, seed), 0.05).unwrap();
            let xq = random_x(6, 2, seed + 1);
            let p = m.predict(&xq).unwrap();
            let prior = k.gram_diag(&xq).unwrap();
            for q in 0..6 {
                prop_assert!(p.latent_var[q] >= 0.0);
                prop_assert!(p.latent_var[q] <= prior[q] + 1e-8);
            }
        }

        #[test]
        fn extra_point_never_adds_variance(seed in 0u64..1000, n in 1usize..9) {
            let k = KernelSpec::se(1.0, 0.9);
            let x = random_x(n + 1, 2, seed);
            let y = random_y(n + 1, seed);
            let small = GpModel::new(k.clone(), x.rows(0, n).into(), y.rows(0, n).into(), 0.1).unwrap();
            let big = GpModel::new(k, x, y, 0.1).unwrap();
            let xq = random_x(5, 2, seed + 7);
            let a = small.predict(&xq).unwrap();
            let b = big.predict(&xq).unwrap();
            for q in 0..5 {
                prop_assert!(b.latent_var[q] <= a.latent_var[q] + 1e-10);
            }
        }

        #[test]
        fn lml_is_permutation_invariant(seed in 0u64..1000, n in 2usize..12) {
            let m = GpModel::new(composite(), random_x(n, 3, seed), random_y(n, seed), 0.2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let xp = m.x().select_rows(&perm);
            let yp = DVector::from_fn(n, |i, _| m.y()[perm[i]]);
            let mp = GpModel::new(composite(), xp, yp, 0.2).unwrap();
            prop_assert!((m.log_marginal_likelihood() - mp.log_marginal_likelihood()).abs() <= 1e-10);
        }
    }
}
