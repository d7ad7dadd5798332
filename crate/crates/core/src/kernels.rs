//! Covariance functions as expression trees.
//!
//! Leaves are the squared exponential and the periodic kernel; `Sum` and
//! `Product` combine children, and `ActiveDims` restricts a subtree to a
//! subset of input columns. All positive hyperparameters are stored as
//! natural logarithms.
//!
//! Hyperparameters are laid out depth-first over the tree. A squared
//! exponential leaf contributes `[log_variance, log_lengthscale...]` (one
//! lengthscale, or one per active dimension when ARD is enabled); a periodic
//! leaf contributes `[log_variance, log_lengthscale]`. Periods are fixed and
//! never part of the parameter vector.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    /// `σ² exp(-Σ_k (x_k - y_k)² / (2 ℓ_k²))`. A single lengthscale is shared
    /// over all active dimensions; more than one means ARD.
    SquaredExponential {
        log_variance: f64,
        log_lengthscales: Vec<f64>,
    },
    /// `σ² exp(-2 Σ_k sin²(π (x_k - y_k) / p) / ℓ²)`.
    Periodic {
        log_variance: f64,
        log_lengthscale: f64,
        log_period: f64,
    },
    Sum(Vec<KernelSpec>),
    Product(Vec<KernelSpec>),
    ActiveDims {
        dims: Vec<usize>,
        kernel: Box<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn se(variance: f64, lengthscale: f64) -> Self {
        KernelSpec::SquaredExponential {
            log_variance: variance.ln(),
            log_lengthscales: vec![lengthscale.ln()],
        }
    }

    pub fn se_ard(variance: f64, lengthscales: &[f64]) -> Self {
        KernelSpec::SquaredExponential {
            log_variance: variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Self {
        KernelSpec::Periodic {
            log_variance: variance.ln(),
            log_lengthscale: lengthscale.ln(),
            log_period: period.ln(),
        }
    }

    pub fn sum(children: Vec<KernelSpec>) -> Self {
        KernelSpec::Sum(children)
    }

    pub fn product(children: Vec<KernelSpec>) -> Self {
        KernelSpec::Product(children)
    }

    /// Restrict this kernel to the given input columns.
    pub fn on_dims(self, dims: Vec<usize>) -> Self {
        KernelSpec::ActiveDims {
            dims,
            kernel: Box::new(self),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            KernelSpec::SquaredExponential {
                log_lengthscales, ..
            } => 1 + log_lengthscales.len(),
            KernelSpec::Periodic { .. } => 2,
            KernelSpec::Sum(c) | KernelSpec::Product(c) => c.iter().map(|k| k.n_params()).sum(),
            KernelSpec::ActiveDims { kernel, .. } => kernel.n_params(),
        }
    }

    /// Log-hyperparameters in depth-first order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut Vec<f64>) {
        match self {
            KernelSpec::SquaredExponential {
                log_variance,
                log_lengthscales,
            } => {
                out.push(*log_variance);
                out.extend_from_slice(log_lengthscales);
            }
            KernelSpec::Periodic {
                log_variance,
                log_lengthscale,
                ..
            } => {
                out.push(*log_variance);
                out.push(*log_lengthscale);
            }
            KernelSpec::Sum(c) | KernelSpec::Product(c) => {
                c.iter().for_each(|k| k.collect_params(out))
            }
            KernelSpec::ActiveDims { kernel, .. } => kernel.collect_params(out),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(GpError::input(format!(
                "kernel expects {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        self.assign_params(&mut it);
        Ok(())
    }

    fn assign_params(&mut self, it: &mut impl Iterator<Item = f64>) {
        match self {
            KernelSpec::SquaredExponential {
                log_variance,
                log_lengthscales,
            } => {
                *log_variance = it.next().unwrap();
                for l in log_lengthscales.iter_mut() {
                    *l = it.next().unwrap();
                }
            }
            KernelSpec::Periodic {
                log_variance,
                log_lengthscale,
                ..
            } => {
                *log_variance = it.next().unwrap();
                *log_lengthscale = it.next().unwrap();
            }
            KernelSpec::Sum(c) | KernelSpec::Product(c) => {
                c.iter_mut().for_each(|k| k.assign_params(it))
            }
            KernelSpec::ActiveDims { kernel, .. } => kernel.assign_params(it),
        }
    }

    /// Human-readable names matching [`KernelSpec::params`], e.g.
    /// `sum.0.se.log_variance`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_names("", &mut out);
        out
    }

    fn collect_names(&self, prefix: &str, out: &mut Vec<String>) {
        match self {
            KernelSpec::SquaredExponential {
                log_lengthscales, ..
            } => {
                out.push(format!("{prefix}se.log_variance"));
                if log_lengthscales.len() == 1 {
                    out.push(format!("{prefix}se.log_lengthscale"));
                } else {
                    for i in 0..log_lengthscales.len() {
                        out.push(format!("{prefix}se.log_lengthscale[{i}]"));
                    }
                }
            }
            KernelSpec::Periodic { .. } => {
                out.push(format!("{prefix}periodic.log_variance"));
                out.push(format!("{prefix}periodic.log_lengthscale"));
            }
            KernelSpec::Sum(c) => {
                for (i, k) in c.iter().enumerate() {
                    k.collect_names(&format!("{prefix}sum.{i}."), out);
                }
            }
            KernelSpec::Product(c) => {
                for (i, k) in c.iter().enumerate() {
                    k.collect_names(&format!("{prefix}product.{i}."), out);
                }
            }
            KernelSpec::ActiveDims { kernel, .. } => kernel.collect_names(prefix, out),
        }
    }

    /// Check the tree against an input dimensionality `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        self.compile(d).map(|_| ())
    }

    /// Covariance between two input vectors.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(GpError::input(format!(
                "input dimensionality mismatch: {} vs {}",
                x.len(),
                x2.len()
            )));
        }
        Ok(self.compile(x.len())?.value(x, x2))
    }

    /// `K[i, j] = k(X_i, X2_j)`.
    pub fn gram(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_cols(x, x2)?;
        let c = self.compile(x.ncols())?;
        let a = RowMajor::new(x);
        let b = RowMajor::new(x2);
        Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
            c.value(a.row(i), b.row(j))
        }))
    }

    /// `K(X, X)`, computed on the lower triangle and mirrored so it is
    /// exactly symmetric.
    pub fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let c = self.compile(x.ncols())?;
        let a = RowMajor::new(x);
        let n = x.nrows();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = c.value(a.row(i), a.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// `k(X_i, X_i)` for every row.
    pub fn gram_diag(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let c = self.compile(x.ncols())?;
        let a = RowMajor::new(x);
        Ok(DVector::from_fn(x.nrows(), |i, _| c.value(a.row(i), a.row(i))))
    }

    /// `∂K(X, X)/∂θ_t` for every log-hyperparameter `θ_t`.
    pub fn grad_gram(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let c = self.compile(x.ncols())?;
        let a = RowMajor::new(x);
        let n = x.nrows();
        let p = self.n_params();
        let mut out = vec![DMatrix::zeros(n, n); p];
        let mut g = vec![0.0; p];
        for j in 0..n {
            for i in j..n {
                g.iter_mut().for_each(|v| *v = 0.0);
                c.add_param_grad(a.row(i), a.row(j), 1.0, &mut g);
                for (t, m) in out.iter_mut().enumerate() {
                    m[(i, j)] = g[t];
                    m[(j, i)] = g[t];
                }
            }
        }
        Ok(out)
    }

    /// `Σ_ij W_ij ∂k(X_i, X2_j)/∂θ` for every log-hyperparameter.
    pub fn contract_param_grad(
        &self,
        x: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        w: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        check_cols(x, x2)?;
        check_weights(w, x.nrows(), x2.nrows())?;
        let c = self.compile(x.ncols())?;
        let a = RowMajor::new(x);
        let b = RowMajor::new(x2);
        let mut g = vec![0.0; self.n_params()];
        for j in 0..x2.nrows() {
            for i in 0..x.nrows() {
                let wij = w[(i, j)];
                if wij != 0.0 {
                    c.add_param_grad(a.row(i), b.row(j), wij, &mut g);
                }
            }
        }
        Ok(g)
    }

    /// Symmetric counterpart of [`KernelSpec::contract_param_grad`] for
    /// `K(X, X)`; visits each unordered pair once.
    pub fn contract_param_grad_sym(&self, x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Vec<f64>> {
        let n = x.nrows();
        check_weights(w, n, n)?;
        let c = self.compile(x.ncols())?;
        let a = RowMajor::new(x);
        let mut g = vec![0.0; self.n_params()];
        for j in 0..n {
            c.add_param_grad(a.row(j), a.row(j), w[(j, j)], &mut g);
            for i in (j + 1)..n {
                let wij = w[(i, j)] + w[(j, i)];
                if wij != 0.0 {
                    c.add_param_grad(a.row(i), a.row(j), wij, &mut g);
                }
            }
        }
        Ok(g)
    }

    /// `Σ_i w_i ∂k(X_i, X_i)/∂θ`.
    pub fn contract_param_grad_diag(&self, x: &DMatrix<f64>, w: &DVector<f64>) -> Result<Vec<f64>> {
        if w.len() != x.nrows() {
            return Err(GpError::input("diagonal weight length mismatch"));
        }
        let c = self.compile(x.ncols())?;
        let a = RowMajor::new(x);
        let mut g = vec![0.0; self.n_params()];
        for i in 0..x.nrows() {
            c.add_param_grad(a.row(i), a.row(i), w[i], &mut g);
        }
        Ok(g)
    }

    /// Row `i` of the result is `Σ_j W_ij ∂k(X_i, X2_j)/∂X_i`.
    pub fn contract_input_grad(
        &self,
        x: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        w: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        check_cols(x, x2)?;
        check_weights(w, x.nrows(), x2.nrows())?;
        let d = x.ncols();
        let c = self.compile(d)?;
        let a = RowMajor::new(x);
        let b = RowMajor::new(x2);
        let mut out = DMatrix::zeros(x.nrows(), d);
        let mut buf = vec![0.0; d];
        for i in 0..x.nrows() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..x2.nrows() {
                let wij = w[(i, j)];
                if wij != 0.0 {
                    c.add_input_grad(a.row(i), b.row(j), wij, &mut buf);
                }
            }
            for k in 0..d {
                out[(i, k)] = buf[k];
            }
        }
        Ok(out)
    }

    pub(crate) fn compile(&self, d: usize) -> Result<Node> {
        let mut offset = 0;
        let all: Vec<usize> = (0..d).collect();
        self.compile_into(&all, d, &mut offset)
    }

    fn compile_into(&self, dims: &[usize], d: usize, offset: &mut usize) -> Result<Node> {
        let node = match self {
            KernelSpec::SquaredExponential {
                log_variance,
                log_lengthscales,
            } => {
                if log_lengthscales.len() != 1 && log_lengthscales.len() != dims.len() {
                    return Err(GpError::input(format!(
                        "ARD squared exponential has {} lengthscales for {} active dims",
                        log_lengthscales.len(),
                        dims.len()
                    )));
                }
                let node = Node::Se {
                    variance: log_variance.exp(),
                    inv_ls2: log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect(),
                    dims: dims.to_vec(),
                    offset: *offset,
                };
                *offset += 1 + log_lengthscales.len();
                node
            }
            KernelSpec::Periodic {
                log_variance,
                log_lengthscale,
                log_period,
            } => {
                let node = Node::Periodic {
                    variance: log_variance.exp(),
                    inv_ls2: (-2.0 * log_lengthscale).exp(),
                    period: log_period.exp(),
                    dims: dims.to_vec(),
                    offset: *offset,
                };
                *offset += 2;
                node
            }
            KernelSpec::Sum(children) | KernelSpec::Product(children) => {
                if children.is_empty() {
                    return Err(GpError::input("sum/product kernel without children"));
                }
                let compiled = children
                    .iter()
                    .map(|k| k.compile_into(dims, d, offset))
                    .collect::<Result<Vec<_>>>()?;
                if matches!(self, KernelSpec::Sum(_)) {
                    Node::Sum(compiled)
                } else {
                    Node::Product(compiled)
                }
            }
            KernelSpec::ActiveDims { dims: sub, kernel } => {
                if sub.is_empty() {
                    return Err(GpError::input("active dims list is empty"));
                }
                let mut mapped = Vec::with_capacity(sub.len());
                for (i, &s) in sub.iter().enumerate() {
                    if sub[..i].contains(&s) {
                        return Err(GpError::input(format!("active dim {s} listed twice")));
                    }
                    let abs = *dims.get(s).ok_or_else(|| {
                        GpError::input(format!(
                            "active dim {s} out of range for {} input columns",
                            dims.len()
                        ))
                    })?;
                    mapped.push(abs);
                }
                kernel.compile_into(&mapped, d, offset)?
            }
        };
        Ok(node)
    }
}

fn check_cols(x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != x2.ncols() {
        return Err(GpError::input(format!(
            "input dimensionality mismatch: {} vs {} columns",
            x.ncols(),
            x2.ncols()
        )));
    }
    Ok(())
}

fn check_weights(w: &DMatrix<f64>, n: usize, m: usize) -> Result<()> {
    if w.nrows() != n || w.ncols() != m {
        return Err(GpError::input(format!(
            "weight matrix is {}x{}, expected {n}x{m}",
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(())
}

/// Row-major copy so kernel evaluation sees contiguous input vectors.
pub(crate) struct RowMajor {
    data: Vec<f64>,
    d: usize,
}

impl RowMajor {
    pub(crate) fn new(x: &DMatrix<f64>) -> Self {
        let d = x.ncols();
        let mut data = Vec::with_capacity(x.len());
        for i in 0..x.nrows() {
            data.extend(x.row(i).iter());
        }
        RowMajor { data, d }
    }

    #[inline]
    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Kernel tree with resolved absolute dimensions and parameter offsets.
#[derive(Debug, Clone)]
pub(crate) enum Node {
    Se {
        variance: f64,
        inv_ls2: Vec<f64>,
        dims: Vec<usize>,
        offset: usize,
    },
    Periodic {
        variance: f64,
        inv_ls2: f64,
        period: f64,
        dims: Vec<usize>,
        offset: usize,
    },
    Sum(Vec<Node>),
    Product(Vec<Node>),
}

const PRODUCT_STACK: usize = 8;

impl Node {
    #[inline]
    fn se_scaled_dist(inv_ls2: &[f64], dims: &[usize], x: &[f64], y: &[f64]) -> f64 {
        if inv_ls2.len() == 1 {
            dims.iter().map(|&k| (x[k] - y[k]).powi(2)).sum::<f64>() * inv_ls2[0]
        } else {
            dims.iter()
                .zip(inv_ls2)
                .map(|(&k, il)| (x[k] - y[k]).powi(2) * il)
                .sum()
        }
    }

    #[inline]
    fn periodic_sin2(period: f64, dims: &[usize], x: &[f64], y: &[f64]) -> f64 {
        dims.iter()
            .map(|&k| (PI * (x[k] - y[k]) / period).sin().powi(2))
            .sum()
    }

    pub(crate) fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Node::Se {
                variance,
                inv_ls2,
                dims,
                ..
            } => variance * (-0.5 * Self::se_scaled_dist(inv_ls2, dims, x, y)).exp(),
            Node::Periodic {
                variance,
                inv_ls2,
                period,
                dims,
                ..
            } => variance * (-2.0 * inv_ls2 * Self::periodic_sin2(*period, dims, x, y)).exp(),
            Node::Sum(c) => c.iter().map(|k| k.value(x, y)).sum(),
            Node::Product(c) => c.iter().map(|k| k.value(x, y)).product(),
        }
    }

    /// Adds `scale * ∂k(x, y)/∂θ` into `grad` at this node's offsets.
    pub(crate) fn add_param_grad(&self, x: &[f64], y: &[f64], scale: f64, grad: &mut [f64]) {
        match self {
            Node::Se {
                variance,
                inv_ls2,
                dims,
                offset,
            } => {
                let v = variance * (-0.5 * Self::se_scaled_dist(inv_ls2, dims, x, y)).exp();
                let sv = scale * v;
                grad[*offset] += sv;
                if inv_ls2.len() == 1 {
                    let r2: f64 = dims.iter().map(|&k| (x[k] - y[k]).powi(2)).sum();
                    grad[offset + 1] += sv * r2 * inv_ls2[0];
                } else {
                    for (i, (&k, il)) in dims.iter().zip(inv_ls2).enumerate() {
                        grad[offset + 1 + i] += sv * (x[k] - y[k]).powi(2) * il;
                    }
                }
            }
            Node::Periodic {
                variance,
                inv_ls2,
                period,
                dims,
                offset,
            } => {
                let s = Self::periodic_sin2(*period, dims, x, y);
                let v = variance * (-2.0 * inv_ls2 * s).exp();
                let sv = scale * v;
                grad[*offset] += sv;
                grad[offset + 1] += sv * 4.0 * inv_ls2 * s;
            }
            Node::Sum(c) => c.iter().for_each(|k| k.add_param_grad(x, y, scale, grad)),
            Node::Product(c) => {
                self.for_each_product_factor(c, x, y, |child, others| {
                    child.add_param_grad(x, y, scale * others, grad)
                });
            }
        }
    }

    /// Adds `scale * ∂k(x, y)/∂x` into `out` (length d).
    pub(crate) fn add_input_grad(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Node::Se {
                variance,
                inv_ls2,
                dims,
                ..
            } => {
                let v = variance * (-0.5 * Self::se_scaled_dist(inv_ls2, dims, x, y)).exp();
                for (i, &k) in dims.iter().enumerate() {
                    let il = if inv_ls2.len() == 1 { inv_ls2[0] } else { inv_ls2[i] };
                    out[k] -= scale * v * (x[k] - y[k]) * il;
                }
            }
            Node::Periodic {
                variance,
                inv_ls2,
                period,
                dims,
                ..
            } => {
                let s = Self::periodic_sin2(*period, dims, x, y);
                let v = variance * (-2.0 * inv_ls2 * s).exp();
                for &k in dims {
                    let arg = 2.0 * PI * (x[k] - y[k]) / period;
                    out[k] -= scale * v * 2.0 * PI * inv_ls2 / period * arg.sin();
                }
            }
            Node::Sum(c) => c.iter().for_each(|k| k.add_input_grad(x, y, scale, out)),
            Node::Product(c) => {
                self.for_each_product_factor(c, x, y, |child, others| {
                    child.add_input_grad(x, y, scale * others, out)
                });
            }
        }
    }

    /// Calls `f(child, Π_{other children} value)` for each child of a product.
    fn for_each_product_factor(
        &self,
        children: &[Node],
        x: &[f64],
        y: &[f64],
        mut f: impl FnMut(&Node, f64),
    ) {
        let n = children.len();
        let mut stack = [0.0; PRODUCT_STACK];
        let mut heap;
        let vals: &mut [f64] = if n <= PRODUCT_STACK {
            &mut stack[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        for (v, c) in vals.iter_mut().zip(children) {
            *v = c.value(x, y);
        }
        for (i, c) in children.iter().enumerate() {
            let others: f64 = vals
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| v)
                .product();
            f(c, others);
        }
    }
}
