use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stgp::linalg::cholesky_jittered;
use stgp::optim::OptimizerOptions;
use stgp::svgp::{fit_svgp, init_inducing, InducingSet, SvgpModel};
use stgp::{GpModel, KernelSpec};

/// Draw `n` noisy samples of a 1-D SE process on `[0, span]`.
fn se_sample(n: usize, span: f64, noise_std: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // latent function on a fine grid, linearly interpolated
    let grid = 400;
    let g = DMatrix::from_fn(grid, 1, |i, _| span * i as f64 / (grid - 1) as f64);
    let k = KernelSpec::se(1.0, 1.0).gram_sym(&g).unwrap();
    let l = cholesky_jittered(&k).unwrap();
    let f = l.l() * DVector::from_fn(grid, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..span));
    let y = DVector::from_fn(n, |i, _| {
        let t = x[(i, 0)] / span * (grid - 1) as f64;
        let lo = (t.floor() as usize).min(grid - 2);
        let w = t - lo as f64;
        (1.0 - w) * f[lo] + w * f[lo + 1] + noise_std * rng.sample::<f64, _>(StandardNormal)
    });
    (x, y)
}

// Evidence per point grows with n (the complexity penalty is shared by more
// points), so the comparison uses unit noise where that drift is small.
#[test]
fn svgp_bound_per_point_close_to_exact_evidence() {
    let (x, y) = se_sample(5000, 10.0, 1.0, 1);
    let z = init_inducing(&x, 50, 0).unwrap();
    let mut svgp = SvgpModel::new(KernelSpec::se(1.0, 2.0), InducingSet::new(z), 0.5, y.mean()).unwrap();
    let opts = OptimizerOptions {
        max_iters: 3000,
        ..OptimizerOptions::svgp()
    };
    let fit = fit_svgp(&mut svgp, &x, &y, &opts).unwrap();

    let idx: Vec<usize> = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(2), 5000, 1000).into_vec();
    let xs = x.select_rows(&idx);
    let ys = DVector::from_fn(1000, |i, _| y[idx[i]]);
    let mut exact = GpModel::new(KernelSpec::se(1.0, 2.0), xs, ys, 0.5).unwrap();
    exact.fit(&OptimizerOptions::default()).unwrap();

    let per_point_svgp = fit.objective / 5000.0;
    let per_point_exact = exact.log_marginal_likelihood() / 1000.0;
    let rel = (per_point_svgp - per_point_exact).abs() / per_point_exact.abs();
    assert!(
        rel <= 0.05,
        "ELBO/n {per_point_svgp} vs exact LML/n {per_point_exact} ({:.1}%)",
        100.0 * rel
    );
}

#[test]
fn full_inducing_set_matches_exact_rmse() {
    let (x, y) = se_sample(140, 10.0, 0.3, 3);
    let (xtr, ytr) = (x.rows(0, 100).into_owned(), y.rows(0, 100).into_owned());
    let (xte, yte) = (x.rows(100, 40).into_owned(), y.rows(100, 40).into_owned());
    let rmse = |pred: &[f64]| {
        (pred.iter().zip(yte.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 40.0).sqrt()
    };

    let mut exact = GpModel::new(KernelSpec::se(1.0, 1.0), xtr.clone(), ytr.clone(), 0.2).unwrap();
    exact.fit(&OptimizerOptions::default()).unwrap();
    let exact_rmse = rmse(&exact.predict(&xte).unwrap().mean);

    let mut svgp = SvgpModel::new(
        KernelSpec::se(1.0, 1.0),
        InducingSet::new(xtr.clone()),
        0.2,
        ytr.mean(),
    )
    .unwrap();
    let opts = OptimizerOptions {
        max_iters: 3000,
        ..OptimizerOptions::svgp()
    };
    fit_svgp(&mut svgp, &xtr, &ytr, &opts).unwrap();
    let svgp_rmse = rmse(&svgp.predict(&xte).unwrap().mean);
    assert!(
        (svgp_rmse - exact_rmse).abs() <= 1e-2,
        "svgp {svgp_rmse} vs exact {exact_rmse}"
    );
}
