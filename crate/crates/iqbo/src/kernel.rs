//! Squared-exponential kernels, Gram matrices with jitter-escalating Cholesky
//! factorization, and exact GP regression.
//!
//! The deconditional covariances assembled in [`crate::cmp`] are rank
//! deficient by construction, so every symmetric solve in the crate goes
//! through [`GramMatrix::factorize`], which escalates a diagonal jitter from
//! `1e-10 * mean(diag)` by factors of 10 up to `1e-4 * mean(diag)` before
//! giving up.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, VARIANCE_FLOOR};

/// A squared-exponential (Gaussian) kernel with per-dimension lengthscales.
///
/// `k(x, x') = variance * exp(-0.5 * sum_i ((x_i - x'_i) / l_i)^2)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl KernelSpec {
    pub fn squared_exponential(lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lengthscales must be positive and finite"));
        }
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::invalid("variance must be positive and finite"));
        }
        Ok(KernelSpec {
            lengthscales,
            variance,
        })
    }

    /// Isotropic kernel in `dim` dimensions.
    pub fn isotropic(dim: usize, lengthscale: f64, variance: f64) -> Result<Self> {
        Self::squared_exponential(vec![lengthscale; dim], variance)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Kernel evaluation; inputs are assumed dimension-checked.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.lengthscales.len() {
            let d = (x[i] - y[i]) / self.lengthscales[i];
            s += d * d;
        }
        self.variance * (-0.5 * s).exp()
    }

    /// Symmetric Gram matrix on `points` with zero initial jitter.
    pub fn gram(&self, points: &[Vec<f64>]) -> Result<GramMatrix> {
        for p in points {
            self.check_point(p)?;
        }
        let n = points.len();
        let mut values = DMatrix::zeros(n, n);
        for i in 0..n {
            values[(i, i)] = self.variance;
            for j in 0..i {
                let v = self.eval(&points[i], &points[j]);
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        Ok(GramMatrix {
            points: points.to_vec(),
            values,
            jitter: 0.0,
        })
    }

    /// Rectangular kernel matrix `[k(x_i, y_j)]`.
    pub fn cross(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), ys.len(), |i, j| self.eval(&xs[i], &ys[j]))
    }

    /// Kernel section `k(X, y)` as a column vector.
    pub fn section(&self, xs: &[Vec<f64>], y: &[f64]) -> DVector<f64> {
        DVector::from_fn(xs.len(), |i, _| self.eval(&xs[i], y))
    }
}

/// Number of tenfold jitter escalations from `1e-10` to `1e-4` (inclusive).
const MAX_JITTER_STEPS: u32 = 6;

/// A kernel Gram matrix together with the jitter added to its diagonal
/// before factorization.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub points: Vec<Vec<f64>>,
    pub values: DMatrix<f64>,
    pub jitter: f64,
}

impl GramMatrix {
    /// Wrap an already-symmetric matrix (used for aggregate covariances).
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        GramMatrix {
            points: Vec::new(),
            values,
            jitter: 0.0,
        }
    }

    fn mean_diag(&self) -> f64 {
        let n = self.values.nrows();
        if n == 0 {
            return 1.0;
        }
        let tr: f64 = self.values.diagonal().iter().sum();
        (tr / n as f64).abs().max(f64::MIN_POSITIVE)
    }

    /// Cholesky factorization of `values + jitter * I`, escalating the jitter
    /// when the factorization fails.
    pub fn factorize(&self) -> Result<CholFactor> {
        let n = self.values.nrows();
        if n == 0 {
            return Err(Error::invalid("cannot factorize an empty matrix"));
        }
        let base = 1e-10 * self.mean_diag();
        let mut attempts = vec![self.jitter];
        for step in 0..=MAX_JITTER_STEPS {
            let j = base * 10f64.powi(step as i32);
            if j > self.jitter {
                attempts.push(j);
            }
        }
        let mut last = self.jitter;
        for jitter in attempts {
            last = jitter;
            let mut m = self.values.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    m[(i, i)] += jitter;
                }
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(CholFactor {
                    chol,
                    jitter_used: jitter,
                });
            }
        }
        Err(Error::FactorizationFailed { last_jitter: last })
    }
}

/// A successful symmetric factorization, remembering the jitter it needed.
#[derive(Debug, Clone)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

impl CholFactor {
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Solve `L y = b` with the lower-triangular factor only. The squared
    /// norm of the result is the quadratic form `b^T (G + jI)^{-1} b`.
    pub fn half_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut y);
        y
    }

    pub fn half_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut y);
        y
    }

    /// Lower-triangular factor `L`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `log det(G + jI)`.
    pub fn ln_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

/// `(G + jitter I)^{-1} B` via the jitter-escalating factorization.
pub fn chol_solve(g: &GramMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(g.factorize()?.solve_mat(b))
}

/// Per-observation noise; `Homoscedastic` matches the textbook `sigma^2 I`.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Homoscedastic(f64),
    Heteroscedastic(Vec<f64>),
}

impl NoiseModel {
    fn at(&self, i: usize) -> f64 {
        match self {
            NoiseModel::Homoscedastic(v) => *v,
            NoiseModel::Heteroscedastic(vs) => vs[i],
        }
    }
}

/// Exact GP posterior from conditioning a squared-exponential prior on
/// observations.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: KernelSpec,
    prior_mean: f64,
    x_train: Vec<Vec<f64>>,
    /// `(K + D)^{-1} (y - m)`; empty when there is no data.
    alpha: DVector<f64>,
    chol: Option<CholFactor>,
    noise_var: NoiseModel,
}

/// Exact GP regression with homoscedastic noise and zero prior mean.
///
/// With empty data the prior is returned unchanged. `noise_var = 0` is
/// allowed; the factorization then relies on the jitter escalation.
pub fn gp_regress(
    kernel: &KernelSpec,
    x: &[Vec<f64>],
    y: &[f64],
    noise_var: f64,
) -> Result<GpPosterior> {
    GpPosterior::fit(
        kernel.clone(),
        x.to_vec(),
        y,
        NoiseModel::Homoscedastic(noise_var),
        0.0,
    )
}

/// GP regression with a per-observation noise vector.
pub fn gp_regress_hetero(
    kernel: &KernelSpec,
    x: &[Vec<f64>],
    y: &[f64],
    noise_vars: &[f64],
) -> Result<GpPosterior> {
    if noise_vars.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: noise_vars.len(),
        });
    }
    GpPosterior::fit(
        kernel.clone(),
        x.to_vec(),
        y,
        NoiseModel::Heteroscedastic(noise_vars.to_vec()),
        0.0,
    )
}

impl GpPosterior {
    pub fn fit(
        kernel: KernelSpec,
        x_train: Vec<Vec<f64>>,
        y: &[f64],
        noise_var: NoiseModel,
        prior_mean: f64,
    ) -> Result<Self> {
        if x_train.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x_train.len(),
                got: y.len(),
            });
        }
        if let NoiseModel::Heteroscedastic(vs) = &noise_var {
            if vs.iter().any(|v| *v < 0.0) {
                return Err(Error::invalid("noise variances must be nonnegative"));
            }
        }
        if x_train.is_empty() {
            return Ok(GpPosterior {
                kernel,
                prior_mean,
                x_train,
                alpha: DVector::zeros(0),
                chol: None,
                noise_var,
            });
        }
        let mut gram = kernel.gram(&x_train)?;
        let n = x_train.len();
        for i in 0..n {
            gram.values[(i, i)] += noise_var.at(i);
        }
        let chol = gram.factorize()?;
        let resid = DVector::from_fn(n, |i, _| y[i] - prior_mean);
        let alpha = chol.solve_vec(&resid);
        Ok(GpPosterior {
            kernel,
            prior_mean,
            x_train,
            alpha,
            chol: Some(chol),
            noise_var,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn len(&self) -> usize {
        self.x_train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_train.is_empty()
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise_var
    }

    pub fn mean_at(&self, x: &[f64]) -> f64 {
        if self.x_train.is_empty() {
            return self.prior_mean;
        }
        let kx = self.kernel.section(&self.x_train, x);
        self.prior_mean + kx.dot(&self.alpha)
    }

    pub fn cov_at(&self, x: &[f64], y: &[f64]) -> f64 {
        let prior = self.kernel.eval(x, y);
        match &self.chol {
            None => prior,
            Some(chol) => {
                let kx = chol.half_solve(&self.kernel.section(&self.x_train, x));
                let ky = chol.half_solve(&self.kernel.section(&self.x_train, y));
                prior - kx.dot(&ky)
            }
        }
    }

    /// Pointwise posterior variance, clamped at [`VARIANCE_FLOOR`].
    pub fn var_at(&self, x: &[f64]) -> f64 {
        self.cov_at(x, x).max(VARIANCE_FLOOR)
    }

    pub fn sd_at(&self, x: &[f64]) -> f64 {
        self.var_at(x).sqrt()
    }

    /// Batched posterior mean and variance over a grid.
    pub fn mean_var_on(&self, grid: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        match &self.chol {
            None => (
                vec![self.prior_mean; grid.len()],
                vec![self.kernel.variance; grid.len()],
            ),
            Some(chol) => {
                let kx = self.kernel.cross(&self.x_train, grid);
                let means: Vec<f64> = (0..grid.len())
                    .map(|j| self.prior_mean + kx.column(j).dot(&self.alpha))
                    .collect();
                let half = chol.half_solve_mat(&kx);
                let vars: Vec<f64> = (0..grid.len())
                    .map(|j| {
                        (self.kernel.variance - half.column(j).norm_squared()).max(VARIANCE_FLOOR)
                    })
                    .collect();
                (means, vars)
            }
        }
    }

    /// Joint posterior covariance matrix over a grid (no floor applied).
    pub fn joint_cov_on(&self, grid: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let prior = self.kernel.gram(grid)?.values;
        match &self.chol {
            None => Ok(prior),
            Some(chol) => {
                let kx = self.kernel.cross(&self.x_train, grid);
                let half = chol.half_solve_mat(&kx);
                Ok(prior - half.transpose() * half)
            }
        }
    }
}
