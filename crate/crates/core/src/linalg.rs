//! Dense symmetric positive-definite helpers.
//!
//! nalgebra's built-in Cholesky and triangular solvers are unblocked; the
//! routines here block them so the bulk of the work lands in `gemm`, which is
//! an order of magnitude faster for the n ~ 1000 systems exact GPs solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};

const BLOCK: usize = 64;

/// Smallest and largest jitter, as multiples of the mean diagonal.
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Lower Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Absolute jitter that was added to the diagonal (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L^{-1} b`
    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `L^{-T} b`
    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `A^{-1} b`
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_lower_vec(b);
        self.l.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `L^{-1} B`
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_lower_in_place(&self.l, &mut x);
        x
    }

    /// `L^{-T} B`
    pub fn solve_upper_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_upper_in_place(&self.l, &mut x);
        x
    }

    /// `A^{-1} B`
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_lower_in_place(&self.l, &mut x);
        solve_upper_in_place(&self.l, &mut x);
        x
    }

    /// `L^{-1}`
    pub fn lower_inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.solve_lower_mat(&DMatrix::identity(n, n))
    }

    /// `A^{-1}`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let linv = self.lower_inverse();
        let linv_t = linv.transpose();
        let mut out = DMatrix::zeros(n, n);
        out.gemm(1.0, &linv_t, &linv, 0.0);
        symmetrize(&mut out);
        out
    }
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Plain Cholesky; `None` if `a` is not numerically positive definite.
pub fn cholesky(a: &DMatrix<f64>) -> Option<CholeskyFactor> {
    let mut l = a.clone();
    if cholesky_in_place(&mut l) {
        Some(CholeskyFactor { l, jitter: 0.0 })
    } else {
        None
    }
}

/// Cholesky with jitter escalation: first without jitter, then from
/// `1e-8 * mean(diag)` up to `1e-2 * mean(diag)` in factors of ten.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    if a.nrows() != a.ncols() {
        return Err(GpError::input(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GpError::Numerical("matrix has non-finite entries".into()));
    }
    if let Some(f) = cholesky(a) {
        return Ok(f);
    }
    let n = a.nrows();
    let mean_diag = (a.diagonal().sum() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut tried = Vec::new();
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        tried.push(jitter);
        let mut l = a.clone();
        for i in 0..n {
            l[(i, i)] += jitter;
        }
        if cholesky_in_place(&mut l) {
            log::debug!("cholesky succeeded with jitter {jitter:e}");
            return Ok(CholeskyFactor { l, jitter });
        }
        rel *= 10.0;
    }
    Err(GpError::NotPositiveDefinite { jitters: tried })
}

fn cholesky_unblocked(a: &mut nalgebra::DMatrixViewMut<'_, f64>) -> bool {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / d;
        }
    }
    true
}

/// Right-looking blocked Cholesky. Reads the lower triangle, leaves `L` with
/// a zeroed upper triangle.
fn cholesky_in_place(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let nb = BLOCK.min(n - k);
        if !cholesky_unblocked(&mut a.view_mut((k, k), (nb, nb))) {
            return false;
        }
        let r = n - k - nb;
        if r > 0 {
            let l11 = a.view((k, k), (nb, nb)).lower_triangle();
            // A21 <- A21 L11^{-T}, computed as (L11^{-1} A21^T)^T.
            let mut a21t = a.view((k + nb, k), (r, nb)).transpose();
            l11.solve_lower_triangular_unchecked_mut(&mut a21t);
            let a21 = a21t.transpose();
            a.view_mut((k + nb, k), (r, nb)).copy_from(&a21);
            a.view_mut((k + nb, k + nb), (r, r))
                .gemm(-1.0, &a21, &a21t, 1.0);
        }
        k += nb;
    }
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    true
}

fn solve_lower_in_place(l: &DMatrix<f64>, x: &mut DMatrix<f64>) {
    let n = l.nrows();
    let m = x.ncols();
    let mut k = 0;
    while k < n {
        let nb = BLOCK.min(n - k);
        if k > 0 {
            let lblk = l.view((k, 0), (nb, k));
            let (top, mut cur) = x.rows_range_pair_mut(0..k, k..k + nb);
            cur.gemm(-1.0, &lblk, &top, 1.0);
        }
        let lii = l.view((k, k), (nb, nb)).clone_owned();
        let mut cur = x.view_mut((k, 0), (nb, m));
        lii.solve_lower_triangular_unchecked_mut(&mut cur);
        k += nb;
    }
}

fn solve_upper_in_place(l: &DMatrix<f64>, x: &mut DMatrix<f64>) {
    let n = l.nrows();
    let m = x.ncols();
    let nblocks = n.div_ceil(BLOCK);
    for b in (0..nblocks).rev() {
        let k = b * BLOCK;
        let nb = BLOCK.min(n - k);
        let r = n - k - nb;
        if r > 0 {
            let lblk_t = l.view((k + nb, k), (r, nb)).transpose();
            let (mut cur, below) = x.rows_range_pair_mut(k..k + nb, k + nb..n);
            cur.gemm(-1.0, &lblk_t, &below, 1.0);
        }
        let lii = l.view((k, k), (nb, nb)).clone_owned();
        let mut cur = x.view_mut((k, 0), (nb, m));
        lii.tr_solve_lower_triangular_unchecked_mut(&mut cur);
    }
}
