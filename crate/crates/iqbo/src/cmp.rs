//! Conditional mean process machinery.
//!
//! From a matched dataset `D1 = {(x_j, a_j)}` the conditional mean operator is
//! estimated by kernel ridge regression; its weight columns
//! `w(a) = (L_aa + N lambda I)^{-1} l(a_vec, a)` turn aggregate observations
//! `D2 = {(a_t, z_t)}` into
//!
//! * the deconditional posterior of `f` over the input space, and
//! * the induced posterior of the conditional expectation `g` over the query
//!   space.
//!
//! Posteriors are immutable snapshots; fitting is a full refit per iteration.
//! All covariances route through the jitter-escalating factorization in
//! [`crate::kernel`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::kernel::{CholFactor, GramMatrix, KernelSpec};
use crate::{Error, Result, VARIANCE_FLOOR};

/// Paired samples `(x_j, a_j)` defining the unknown conditional `p(x|a)`,
/// plus the ridge regularizer `lambda` of the conditional mean operator.
#[derive(Debug, Clone)]
pub struct MatchedDataset {
    x_points: Vec<Vec<f64>>,
    a_points: Vec<Vec<f64>>,
    ridge_lambda: f64,
}

impl MatchedDataset {
    pub fn new(x_points: Vec<Vec<f64>>, a_points: Vec<Vec<f64>>, ridge_lambda: f64) -> Result<Self> {
        if x_points.is_empty() || x_points.len() != a_points.len() {
            return Err(Error::invalid(
                "matched dataset needs equal, nonzero numbers of x and a points",
            ));
        }
        if !(ridge_lambda > 0.0) {
            return Err(Error::invalid("ridge_lambda must be positive"));
        }
        Ok(MatchedDataset {
            x_points,
            a_points,
            ridge_lambda,
        })
    }

    pub fn len(&self) -> usize {
        self.x_points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x_points(&self) -> &[Vec<f64>] {
        &self.x_points
    }

    pub fn a_points(&self) -> &[Vec<f64>] {
        &self.a_points
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }
}

/// Sequential indirect queries and aggregate feedback, with per-observation
/// noise variances (heteroscedastic to support multi-resolution levels; equal
/// entries recover the homoscedastic `sigma^2 I` case).
#[derive(Debug, Clone, Default)]
pub struct QueryLog {
    a_queries: Vec<Vec<f64>>,
    z_obs: Vec<f64>,
    noise_vars: Vec<f64>,
}

impl QueryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: Vec<f64>, z: f64, noise_var: f64) -> Result<()> {
        if !(noise_var > 0.0) {
            return Err(Error::invalid("observation noise variance must be positive"));
        }
        self.a_queries.push(a);
        self.z_obs.push(z);
        self.noise_vars.push(noise_var);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.a_queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_queries.is_empty()
    }

    pub fn a_queries(&self) -> &[Vec<f64>] {
        &self.a_queries
    }

    pub fn z_obs(&self) -> &[f64] {
        &self.z_obs
    }

    pub fn noise_vars(&self) -> &[f64] {
        &self.noise_vars
    }

    /// Max observed feedback so far (EI incumbent); `-inf` when empty.
    pub fn best_z(&self) -> f64 {
        self.z_obs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Cached conditional-mean-operator factorization shared by every posterior
/// derived from one matched dataset.
#[derive(Debug)]
pub struct CmoCache {
    data: MatchedDataset,
    kernel_x: KernelSpec,
    kernel_a: KernelSpec,
    /// Factorization of `L_aa + N lambda I`.
    l_chol: CholFactor,
    k_xx: DMatrix<f64>,
}

/// Estimate the conditional mean operator from the matched dataset.
pub fn fit_cmo(d1: &MatchedDataset, kernel_x: &KernelSpec, kernel_a: &KernelSpec) -> Result<Arc<CmoCache>> {
    let n = d1.len();
    if kernel_x.dim() != d1.x_points()[0].len() {
        return Err(Error::DimensionMismatch {
            expected: kernel_x.dim(),
            got: d1.x_points()[0].len(),
        });
    }
    if kernel_a.dim() != d1.a_points()[0].len() {
        return Err(Error::DimensionMismatch {
            expected: kernel_a.dim(),
            got: d1.a_points()[0].len(),
        });
    }
    let mut l_aa = kernel_a.gram(d1.a_points())?;
    let ridge = n as f64 * d1.ridge_lambda();
    for i in 0..n {
        l_aa.values[(i, i)] += ridge;
    }
    let l_chol = l_aa.factorize()?;
    let k_xx = kernel_x.gram(d1.x_points())?.values;
    Ok(Arc::new(CmoCache {
        data: d1.clone(),
        kernel_x: kernel_x.clone(),
        kernel_a: kernel_a.clone(),
        l_chol,
        k_xx,
    }))
}

impl CmoCache {
    pub fn data(&self) -> &MatchedDataset {
        &self.data
    }

    pub fn kernel_x(&self) -> &KernelSpec {
        &self.kernel_x
    }

    pub fn kernel_a(&self) -> &KernelSpec {
        &self.kernel_a
    }

    /// CMO weight column `w(a) = (L_aa + N lambda I)^{-1} l(a_vec, a)`.
    pub fn weights(&self, a: &[f64]) -> DVector<f64> {
        self.l_chol
            .solve_vec(&self.kernel_a.section(self.data.a_points(), a))
    }

    /// Weight matrix `W` with one column per point (`N x m`).
    pub fn weight_matrix(&self, pts: &[Vec<f64>]) -> DMatrix<f64> {
        self.l_chol
            .solve_mat(&self.kernel_a.cross(self.data.a_points(), pts))
    }

    /// Prior mean evaluated at the x-side anchor points.
    fn prior_mean_vec(&self, prior_mean: f64) -> DVector<f64> {
        DVector::from_element(self.data.len(), prior_mean)
    }

    /// Precompute the per-grid factors reused across refits.
    pub fn grid_cache(self: &Arc<Self>, grid: &[Vec<f64>], prior_mean: f64) -> AGridCache {
        let wg = self.weight_matrix(grid);
        let kwg = &self.k_xx * &wg;
        let m_vec = self.prior_mean_vec(prior_mean);
        let prior_mean_g: Vec<f64> = (0..grid.len()).map(|j| wg.column(j).dot(&m_vec)).collect();
        let prior_var: Vec<f64> = (0..grid.len())
            .map(|j| wg.column(j).dot(&kwg.column(j)))
            .collect();
        AGridCache {
            grid: grid.to_vec(),
            wg,
            kwg,
            prior_mean: prior_mean_g,
            prior_var,
        }
    }

    /// Precompute the x-side kernel sections for a fixed recommendation grid.
    pub fn x_grid_cache(self: &Arc<Self>, grid: &[Vec<f64>]) -> XGridCache {
        XGridCache {
            grid: grid.to_vec(),
            kxg: self.kernel_x.cross(self.data.x_points(), grid),
        }
    }
}

/// Shared conditioning state for the posteriors of `f` and `g` given a query
/// log: `W_t`, the factorization of `Q_tt + diag(noise)`, and the info vector
/// `beta = (Q_tt + diag)^{-1} (z - nu(a_t))`.
#[derive(Debug)]
struct Conditioning {
    w_t: DMatrix<f64>,
    m_chol: CholFactor,
    beta: DVector<f64>,
    /// `W_t beta`, the x-side representer coefficients.
    alpha_x: DVector<f64>,
}

fn build_conditioning(cache: &CmoCache, log: &QueryLog, prior_mean: f64) -> Result<Option<Conditioning>> {
    if log.is_empty() {
        return Ok(None);
    }
    let t = log.len();
    let w_t = cache.weight_matrix(log.a_queries());
    let kw = &cache.k_xx * &w_t;
    let mut q_tt = w_t.transpose() * &kw;
    // symmetrize against roundoff before factorization
    for i in 0..t {
        for j in 0..i {
            let v = 0.5 * (q_tt[(i, j)] + q_tt[(j, i)]);
            q_tt[(i, j)] = v;
            q_tt[(j, i)] = v;
        }
    }
    for (i, nv) in log.noise_vars().iter().enumerate() {
        q_tt[(i, i)] += nv;
    }
    let m_chol = GramMatrix::from_matrix(q_tt).factorize()?;
    let m_vec = cache.prior_mean_vec(prior_mean);
    let resid = DVector::from_fn(t, |i, _| log.z_obs()[i] - w_t.column(i).dot(&m_vec));
    let beta = m_chol.solve_vec(&resid);
    let alpha_x = &w_t * &beta;
    Ok(Some(Conditioning {
        w_t,
        m_chol,
        beta,
        alpha_x,
    }))
}

/// Posterior of the latent function `f` over the input space given the
/// matched dataset and the aggregate observations.
#[derive(Debug)]
pub struct DeconditionalPosterior {
    cache: Arc<CmoCache>,
    prior_mean: f64,
    cond: Option<Conditioning>,
}

/// Deconditional posterior of `f`; with an empty log this is exactly the
/// prior `GP(prior_mean, k)`.
pub fn decondition(cache: &Arc<CmoCache>, log: &QueryLog, prior_mean: f64) -> Result<DeconditionalPosterior> {
    Ok(DeconditionalPosterior {
        cache: Arc::clone(cache),
        prior_mean,
        cond: build_conditioning(cache, log, prior_mean)?,
    })
}

impl DeconditionalPosterior {
    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn cache(&self) -> &Arc<CmoCache> {
        &self.cache
    }

    pub fn mean_at(&self, x: &[f64]) -> f64 {
        match &self.cond {
            None => self.prior_mean,
            Some(c) => {
                let kx = self.cache.kernel_x.section(self.cache.data.x_points(), x);
                self.prior_mean + kx.dot(&c.alpha_x)
            }
        }
    }

    pub fn cov_at(&self, x: &[f64], y: &[f64]) -> f64 {
        let prior = self.cache.kernel_x.eval(x, y);
        match &self.cond {
            None => prior,
            Some(c) => {
                let kx = self.cache.kernel_x.section(self.cache.data.x_points(), x);
                let ky = self.cache.kernel_x.section(self.cache.data.x_points(), y);
                let vx = c.m_chol.half_solve(&(c.w_t.transpose() * kx));
                let vy = c.m_chol.half_solve(&(c.w_t.transpose() * ky));
                prior - vx.dot(&vy)
            }
        }
    }

    pub fn var_at(&self, x: &[f64]) -> f64 {
        self.cov_at(x, x).max(VARIANCE_FLOOR)
    }

    pub fn sd_at(&self, x: &[f64]) -> f64 {
        self.var_at(x).sqrt()
    }

    /// Batched mean and variance over an arbitrary grid.
    pub fn mean_var_on(&self, grid: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let xc = self.cache.x_grid_cache(grid);
        self.mean_var_on_cache(&xc)
    }

    /// Batched mean and variance using a precomputed [`XGridCache`].
    pub fn mean_var_on_cache(&self, xc: &XGridCache) -> (Vec<f64>, Vec<f64>) {
        let g = xc.grid.len();
        let prior_var = self.cache.kernel_x.variance;
        match &self.cond {
            None => (vec![self.prior_mean; g], vec![prior_var; g]),
            Some(c) => {
                let means: Vec<f64> = (0..g)
                    .map(|j| self.prior_mean + xc.kxg.column(j).dot(&c.alpha_x))
                    .collect();
                let v = c.m_chol.half_solve_mat(&(c.w_t.transpose() * &xc.kxg));
                let vars: Vec<f64> = (0..g)
                    .map(|j| (prior_var - v.column(j).norm_squared()).max(VARIANCE_FLOOR))
                    .collect();
                (means, vars)
            }
        }
    }

    /// Joint posterior covariance over a grid (for Thompson draws of the
    /// optimum value). No variance floor is applied.
    pub fn joint_cov_on(&self, grid: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let prior = self.cache.kernel_x.gram(grid)?.values;
        match &self.cond {
            None => Ok(prior),
            Some(c) => {
                let kxg = self.cache.kernel_x.cross(self.cache.data.x_points(), grid);
                let v = c.m_chol.half_solve_mat(&(c.w_t.transpose() * kxg));
                Ok(prior - v.transpose() * v)
            }
        }
    }
}

/// Posterior of the conditional expectation `g` over the query space.
#[derive(Debug)]
pub struct AggregatePosterior {
    cache: Arc<CmoCache>,
    prior_mean: f64,
    cond: Option<Conditioning>,
}

/// Prior of `g` induced by the conditional mean operator:
/// `nu(a) = w(a)^T m(x_vec)` and `q(a, a') = w(a)^T K_xx w(a')`.
pub fn aggregate_prior(cache: &Arc<CmoCache>, prior_mean: f64) -> AggregatePosterior {
    AggregatePosterior {
        cache: Arc::clone(cache),
        prior_mean,
        cond: None,
    }
}

/// Posterior of `g` after standard Gaussian conditioning of the aggregate
/// prior on the query log.
pub fn aggregate_posterior(cache: &Arc<CmoCache>, log: &QueryLog, prior_mean: f64) -> Result<AggregatePosterior> {
    Ok(AggregatePosterior {
        cache: Arc::clone(cache),
        prior_mean,
        cond: build_conditioning(cache, log, prior_mean)?,
    })
}

impl AggregatePosterior {
    pub fn cache(&self) -> &Arc<CmoCache> {
        &self.cache
    }

    /// Prior mean `nu(a)`.
    pub fn prior_mean_at(&self, a: &[f64]) -> f64 {
        let w = self.cache.weights(a);
        w.dot(&self.cache.prior_mean_vec(self.prior_mean))
    }

    /// Prior covariance `q(a, a')`.
    pub fn prior_cov_at(&self, a: &[f64], b: &[f64]) -> f64 {
        let wa = self.cache.weights(a);
        let wb = self.cache.weights(b);
        wa.dot(&(&self.cache.k_xx * wb))
    }

    pub fn mean_at(&self, a: &[f64]) -> f64 {
        match &self.cond {
            None => self.prior_mean_at(a),
            Some(c) => {
                let kw = &self.cache.k_xx * self.cache.weights(a);
                let cross = c.w_t.transpose() * &kw;
                self.prior_mean_at(a) + cross.dot(&c.beta)
            }
        }
    }

    pub fn cov_at(&self, a: &[f64], b: &[f64]) -> f64 {
        let prior = self.prior_cov_at(a, b);
        match &self.cond {
            None => prior,
            Some(c) => {
                let ca = c.m_chol.half_solve(&(c.w_t.transpose() * (&self.cache.k_xx * self.cache.weights(a))));
                let cb = c.m_chol.half_solve(&(c.w_t.transpose() * (&self.cache.k_xx * self.cache.weights(b))));
                prior - ca.dot(&cb)
            }
        }
    }

    /// Pointwise variance clamped at the floor.
    pub fn var_at(&self, a: &[f64]) -> f64 {
        self.cov_at(a, a).max(VARIANCE_FLOOR)
    }

    pub fn sd_at(&self, a: &[f64]) -> f64 {
        self.var_at(a).sqrt()
    }

    pub fn mean_var_on(&self, grid: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let gc = self.cache.grid_cache(grid, self.prior_mean);
        self.mean_var_on_cache(&gc)
    }

    /// Batched posterior mean and variance using a precomputed grid cache.
    pub fn mean_var_on_cache(&self, gc: &AGridCache) -> (Vec<f64>, Vec<f64>) {
        match &self.cond {
            None => (
                gc.prior_mean.clone(),
                gc.prior_var.iter().map(|v| v.max(VARIANCE_FLOOR)).collect(),
            ),
            Some(c) => {
                let cross = c.w_t.transpose() * &gc.kwg; // t x G
                let g = gc.grid.len();
                let means: Vec<f64> = (0..g)
                    .map(|j| gc.prior_mean[j] + cross.column(j).dot(&c.beta))
                    .collect();
                let half = c.m_chol.half_solve_mat(&cross);
                let vars: Vec<f64> = (0..g)
                    .map(|j| (gc.prior_var[j] - half.column(j).norm_squared()).max(VARIANCE_FLOOR))
                    .collect();
                (means, vars)
            }
        }
    }
}

/// Precomputed aggregate-prior factors for a fixed candidate grid over the
/// query space. Depends only on the matched dataset, not on the query log.
#[derive(Debug)]
pub struct AGridCache {
    grid: Vec<Vec<f64>>,
    wg: DMatrix<f64>,
    kwg: DMatrix<f64>,
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
}

impl AGridCache {
    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }

    pub fn prior_var(&self) -> &[f64] {
        &self.prior_var
    }

    pub fn weight_matrix(&self) -> &DMatrix<f64> {
        &self.wg
    }
}

/// Precomputed x-side kernel sections for a fixed recommendation grid.
#[derive(Debug)]
pub struct XGridCache {
    grid: Vec<Vec<f64>>,
    kxg: DMatrix<f64>,
}

impl XGridCache {
    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }
}
