//! Synthetic ground-truth environments with indirect, integrated feedback.
//!
//! Each environment exposes a latent objective `f` over an input space and a
//! query space whose points induce a conditional distribution over inputs.
//! Observations are noisy realizations of the conditional expectation
//! `g(a) = E[f(X) | A = a]`; policies never see `f` directly. Deterministic
//! quadrature evaluation of `g` is provided for regret bookkeeping only.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::PosteriorOverA;
use crate::cmp::MatchedDataset;
use crate::stats::{gauss_legendre_box_mean, gaussian_clamped_expect};
use crate::tree::{AxisBox, CostSchedule};
use crate::{Error, Result, VARIANCE_FLOOR};

/// Environment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    /// Negated Branin; queries map linearly onto the input box.
    BraninLt,
    /// Negated Branin; queries map through a cosine warp.
    BraninNlt,
    /// Input space equals query space; feedback integrates `f` over a
    /// depth-dependent cell around the query.
    MultiresTree,
    /// Finite arms; a query selects a mixing distribution over arm rewards.
    Bandit,
    /// One-dimensional test bed with a configurable smooth objective and an
    /// iteration-indexed resolution schedule.
    Custom1d,
}

fn default_tau2() -> f64 {
    0.5
}
fn default_obs_noise_sd() -> f64 {
    0.1
}
fn default_quad_order() -> usize {
    32
}
fn default_max_depth() -> usize {
    6
}
fn default_schedule_c() -> f64 {
    0.005
}
fn default_dim() -> usize {
    2
}

/// Serializable environment parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Variance of the Gaussian conditional over inputs.
    #[serde(default = "default_tau2")]
    pub tau2: f64,
    /// Observation noise standard deviation (fixed-resolution modes).
    #[serde(default = "default_obs_noise_sd")]
    pub obs_noise_sd: f64,
    /// Quadrature nodes per axis for exact conditional expectations.
    #[serde(default = "default_quad_order")]
    pub quad_order: usize,
    /// Tree depth limit for the multi-resolution environment.
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    /// Multi-resolution conditional: Gaussian of the cell scale instead of
    /// uniform over the cell.
    #[serde(default)]
    pub multires_gaussian: bool,
    /// Constant in the decreasing resolution schedule of the 1-D test bed.
    #[serde(default = "default_schedule_c")]
    pub schedule_c: f64,
    /// Dimension of the multi-resolution environment (1 or 2).
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        EnvSpec {
            kind,
            tau2: default_tau2(),
            obs_noise_sd: default_obs_noise_sd(),
            quad_order: default_quad_order(),
            max_depth: default_max_depth(),
            multires_gaussian: false,
            schedule_c: default_schedule_c(),
            dim: default_dim(),
        }
    }
}

/// Finite-arm environment parameters: arm rewards and the map from a query
/// to a mixing distribution over arms.
#[derive(Clone)]
pub struct BanditSpec {
    pub rewards: Vec<f64>,
    pub noise_sd: f64,
    policy: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl std::fmt::Debug for BanditSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BanditSpec")
            .field("rewards", &self.rewards)
            .field("noise_sd", &self.noise_sd)
            .finish_non_exhaustive()
    }
}

impl BanditSpec {
    pub fn new(
        rewards: Vec<f64>,
        noise_sd: f64,
        policy: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    ) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::invalid("bandit needs at least one arm"));
        }
        if !(noise_sd >= 0.0) {
            return Err(Error::invalid("bandit noise sd must be nonnegative"));
        }
        Ok(BanditSpec {
            rewards,
            noise_sd,
            policy,
        })
    }

    /// Default policy map on a scalar query in [0, 1]: squared-exponential
    /// bumps centered at evenly spaced points, normalized to the simplex.
    pub fn with_rbf_policies(rewards: Vec<f64>, noise_sd: f64, width: f64) -> Result<Self> {
        let k = rewards.len();
        let policy = Arc::new(move |a: &[f64]| -> Vec<f64> {
            let mut p: Vec<f64> = (0..k)
                .map(|i| {
                    let c = (i as f64 + 0.5) / k as f64;
                    (-(a[0] - c).powi(2) / (2.0 * width * width)).exp()
                })
                .collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            p
        });
        BanditSpec::new(rewards, noise_sd, policy)
    }

    /// The mixing-policy map itself, e.g. for building exact posteriors.
    pub fn policy(&self) -> Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync> {
        Arc::clone(&self.policy)
    }

    /// Mixing distribution at a query, validated to lie on the simplex.
    pub fn policy_at(&self, a: &[f64]) -> Result<Vec<f64>> {
        let p = (self.policy)(a);
        if p.len() != self.rewards.len() {
            return Err(Error::DimensionMismatch {
                expected: self.rewards.len(),
                got: p.len(),
            });
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || p.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("policy vector must lie on the simplex"));
        }
        Ok(p)
    }
}

/// A fully specified environment instance.
pub struct Environment {
    pub spec: EnvSpec,
    bandit: Option<BanditSpec>,
    custom_f: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    schedule: CostSchedule,
    optimum: OnceLock<(Vec<f64>, f64)>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment").field("spec", &self.spec).finish_non_exhaustive()
    }
}

const BRANIN_LO: [f64; 2] = [-5.0, 0.0];
const BRANIN_HI: [f64; 2] = [10.0, 15.0];

/// Negated standard Branin (maximization framing). Errors outside the box
/// [-5, 10] x [0, 15].
pub fn branin(x: &[f64]) -> Result<f64> {
    if x.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: x.len() });
    }
    for (v, (lo, hi)) in x.iter().zip(BRANIN_LO.iter().zip(&BRANIN_HI)) {
        if !(*v >= *lo && *v <= *hi) {
            return Err(Error::invalid(format!("input {v} outside [{lo}, {hi}]")));
        }
    }
    Ok(-branin_raw(x[0], x[1]))
}

fn branin_raw(x1: f64, x2: f64) -> f64 {
    use std::f64::consts::PI;
    let a = 1.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * PI);
    a * (x2 - b * x1 * x1 + c * x1 - r).powi(2) + s * (1.0 - t) * x1.cos() + s
}

/// Linear query transform onto the Branin box, clamped.
pub fn transform_lt(a: &[f64], eps: &[f64]) -> Vec<f64> {
    clamp_branin(&[15.0 * a[0] - 5.0 + eps[0], 15.0 * a[1] + eps[1]])
}

/// Cosine-warped query transform onto the Branin box, clamped.
pub fn transform_nlt(a: &[f64], eps: &[f64]) -> Vec<f64> {
    use std::f64::consts::PI;
    clamp_branin(&[
        15.0 * (PI * a[0] / 2.0).cos() - 5.0 + eps[0],
        15.0 * (PI * a[1] / 2.0).cos() + eps[1],
    ])
}

fn clamp_branin(x: &[f64]) -> Vec<f64> {
    vec![
        x[0].clamp(BRANIN_LO[0], BRANIN_HI[0]),
        x[1].clamp(BRANIN_LO[1], BRANIN_HI[1]),
    ]
}

/// Decreasing variance schedule `c * t^{-1/2} (ln t)^{d/2}` for iteration t,
/// constant at t = 1.
pub fn resolution_schedule(c: f64, t: usize, d: usize) -> f64 {
    if t <= 1 {
        c
    } else {
        let tf = t as f64;
        c * tf.powf(-0.5) * tf.ln().powf(0.5 * d as f64)
    }
}

impl Environment {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        if !(spec.tau2 >= 0.0) || !(spec.obs_noise_sd >= 0.0) {
            return Err(Error::invalid("variances must be nonnegative"));
        }
        if spec.quad_order < 2 {
            return Err(Error::invalid("quadrature order must be >= 2"));
        }
        let bandit = match spec.kind {
            EnvKind::Bandit => Some(BanditSpec::with_rbf_policies(
                vec![1.0, 0.2, -0.5],
                spec.obs_noise_sd,
                0.15,
            )?),
            _ => None,
        };
        let schedule = CostSchedule::defaults(spec.max_depth);
        Ok(Environment {
            spec,
            bandit,
            custom_f: None,
            schedule,
            optimum: OnceLock::new(),
        })
    }

    /// Replace the depth-indexed cost and noise schedule. The environment
    /// and the learner must agree on it; construct one schedule and share it.
    pub fn with_schedule(mut self, schedule: CostSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Bandit environment with an explicit arm specification.
    pub fn bandit(spec: EnvSpec, bandit: BanditSpec) -> Result<Self> {
        if spec.kind != EnvKind::Bandit {
            return Err(Error::invalid("bandit spec requires the bandit kind"));
        }
        let mut env = Environment::new(spec)?;
        env.bandit = Some(bandit);
        Ok(env)
    }

    /// One-dimensional environment with a custom smooth objective.
    pub fn custom_1d_with(spec: EnvSpec, f: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Result<Self> {
        if spec.kind != EnvKind::Custom1d {
            return Err(Error::invalid("custom objective requires the 1-d kind"));
        }
        let mut env = Environment::new(spec)?;
        env.custom_f = Some(f);
        Ok(env)
    }

    pub fn bandit_spec(&self) -> Option<&BanditSpec> {
        self.bandit.as_ref()
    }

    pub fn schedule(&self) -> &CostSchedule {
        &self.schedule
    }

    pub fn x_domain(&self) -> AxisBox {
        match self.spec.kind {
            EnvKind::BraninLt | EnvKind::BraninNlt => {
                AxisBox::new(BRANIN_LO.to_vec(), BRANIN_HI.to_vec()).unwrap()
            }
            EnvKind::MultiresTree => AxisBox::unit(self.spec.dim),
            EnvKind::Custom1d => AxisBox::unit(1),
            EnvKind::Bandit => {
                let k = self.bandit.as_ref().map_or(1, |b| b.rewards.len());
                AxisBox::new(vec![-0.5], vec![k as f64 - 0.5]).unwrap()
            }
        }
    }

    pub fn a_domain(&self) -> AxisBox {
        match self.spec.kind {
            EnvKind::BraninLt | EnvKind::BraninNlt => AxisBox::unit(2),
            EnvKind::MultiresTree => AxisBox::unit(self.spec.dim),
            EnvKind::Custom1d | EnvKind::Bandit => AxisBox::unit(1),
        }
    }

    /// The latent objective.
    pub fn f(&self, x: &[f64]) -> Result<f64> {
        match self.spec.kind {
            EnvKind::BraninLt | EnvKind::BraninNlt => branin(x),
            EnvKind::MultiresTree => {
                if !AxisBox::unit(self.spec.dim).contains(x) {
                    return Err(Error::invalid("input outside the unit box"));
                }
                match self.spec.dim {
                    2 => branin(&[15.0 * x[0] - 5.0, 15.0 * x[1]]),
                    1 => Ok(match &self.custom_f {
                        Some(f) => f(x[0]),
                        None => -(x[0] - 0.7).powi(2),
                    }),
                    d => Err(Error::invalid(format!("unsupported dimension {d}"))),
                }
            }
            EnvKind::Custom1d => {
                if x.len() != 1 {
                    return Err(Error::DimensionMismatch { expected: 1, got: x.len() });
                }
                Ok(match &self.custom_f {
                    Some(f) => f(x[0]),
                    None => -(x[0] - 0.7).powi(2),
                })
            }
            EnvKind::Bandit => {
                let b = self.bandit.as_ref().expect("bandit spec present");
                let i = x[0].round() as usize;
                b.rewards
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid("arm index out of range"))
            }
        }
    }

    /// Deterministic center of the conditional over inputs at a query.
    pub fn conditional_mean(&self, a: &[f64]) -> Vec<f64> {
        match self.spec.kind {
            EnvKind::BraninLt => transform_lt(a, &[0.0, 0.0]),
            EnvKind::BraninNlt => transform_nlt(a, &[0.0, 0.0]),
            _ => a.to_vec(),
        }
    }

    fn conditional_sd(&self, level: Option<usize>) -> f64 {
        match self.spec.kind {
            EnvKind::MultiresTree => self.schedule.resolution(level.unwrap_or(self.spec.max_depth)),
            EnvKind::Custom1d => match level {
                Some(t) => resolution_schedule(self.spec.schedule_c, t, 1).sqrt(),
                None => self.spec.tau2.sqrt(),
            },
            _ => self.spec.tau2.sqrt(),
        }
    }

    fn obs_noise_sd(&self, level: Option<usize>) -> f64 {
        match self.spec.kind {
            EnvKind::MultiresTree => self.schedule.noise_sd(level.unwrap_or(self.spec.max_depth)),
            EnvKind::Bandit => self.bandit.as_ref().map_or(0.0, |b| b.noise_sd),
            _ => self.spec.obs_noise_sd,
        }
    }

    /// Observation noise variance the learner should assume at a query.
    pub fn noise_var(&self, level: Option<usize>) -> f64 {
        let sd = self.obs_noise_sd(level);
        (sd * sd).max(VARIANCE_FLOOR)
    }

    /// One noisy indirect observation: an input is drawn from the
    /// conditional at the query (or the exact conditional expectation is
    /// used for the multi-resolution kind), then observation noise is added.
    pub fn observe<R: Rng>(&self, a: &[f64], level: Option<usize>, rng: &mut R) -> Result<f64> {
        if !self.a_domain().contains(a) {
            return Err(Error::invalid("query outside the query domain"));
        }
        let noise: f64 = if self.obs_noise_sd(level) > 0.0 {
            self.obs_noise_sd(level) * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let value = match self.spec.kind {
            EnvKind::Bandit => self.bandit_mean(a)?,
            EnvKind::MultiresTree => self.true_g(a, level)?,
            EnvKind::BraninLt | EnvKind::BraninNlt => {
                let sd = self.conditional_sd(level);
                let eps = [
                    sd * rng.sample::<f64, _>(StandardNormal),
                    sd * rng.sample::<f64, _>(StandardNormal),
                ];
                let x = match self.spec.kind {
                    EnvKind::BraninLt => transform_lt(a, &eps),
                    _ => transform_nlt(a, &eps),
                };
                self.f(&x)?
            }
            EnvKind::Custom1d => {
                let sd = self.conditional_sd(level);
                let x = (a[0] + sd * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
                self.f(&[x])?
            }
        };
        Ok(value + noise)
    }

    fn bandit_mean(&self, a: &[f64]) -> Result<f64> {
        let b = self.bandit.as_ref().expect("bandit spec present");
        let p = b.policy_at(a)?;
        Ok(p.iter().zip(&b.rewards).map(|(pi, fi)| pi * fi).sum())
    }

    /// Exact conditional expectation of `f` at a query, by quadrature. Used
    /// for regret bookkeeping only. Errors if doubling the quadrature order
    /// moves the value by more than 1e-5.
    pub fn true_g(&self, a: &[f64], level: Option<usize>) -> Result<f64> {
        if !self.a_domain().contains(a) {
            return Err(Error::invalid("query outside the query domain"));
        }
        if self.spec.kind == EnvKind::Bandit {
            return self.bandit_mean(a);
        }
        let coarse = self.quad_g(a, level, self.spec.quad_order)?;
        let fine = self.quad_g(a, level, self.spec.quad_order * 2)?;
        if (coarse - fine).abs() > 1e-5 {
            return Err(Error::invalid(format!(
                "quadrature order {} too low: {coarse} vs {fine}",
                self.spec.quad_order
            )));
        }
        Ok(fine)
    }

    fn quad_g(&self, a: &[f64], level: Option<usize>, order: usize) -> Result<f64> {
        let sd = self.conditional_sd(level);
        match self.spec.kind {
            EnvKind::MultiresTree if !self.spec.multires_gaussian => {
                // uniform conditional over the cell, clipped to the domain
                let d = sd;
                let lo: Vec<f64> = a.iter().map(|v| (v - d).max(0.0)).collect();
                let hi: Vec<f64> = a.iter().map(|v| (v + d).min(1.0)).collect();
                let mut err = None;
                let g = gauss_legendre_box_mean(&lo, &hi, order, |x| match self.f(x) {
                    Ok(v) => v,
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                });
                err.map_or(Ok(g), Err)
            }
            _ => {
                if sd * sd <= VARIANCE_FLOOR {
                    return self.f(&self.clamped(&self.conditional_mean(a)));
                }
                let mean = self.conditional_mean(a);
                let dom = self.x_domain();
                let mut err = None;
                let g = gaussian_clamped_expect(&mean, sd * sd, &dom.lo, &dom.hi, order, |x| {
                    match self.f(x) {
                        Ok(v) => v,
                        Err(e) => {
                            err = Some(e);
                            0.0
                        }
                    }
                });
                err.map_or(Ok(g), Err)
            }
        }
    }

    fn clamped(&self, x: &[f64]) -> Vec<f64> {
        self.x_domain().clamp(x)
    }

    /// Draw a matched dataset: queries uniform on the query domain, inputs
    /// from the conditional at each query. Reproducible per seed.
    pub fn generate_d1(&self, n: usize, ridge_lambda: f64, seed: u64) -> Result<MatchedDataset> {
        use rand::SeedableRng;
        if self.spec.kind == EnvKind::Bandit {
            return Err(Error::invalid(
                "the bandit kind has an exact finite-dimensional prior; no matched dataset",
            ));
        }
        if n < 1 {
            return Err(Error::invalid("dataset size must be >= 1"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a_dom = self.a_domain();
        let sd = self.spec.tau2.sqrt();
        let mut a_pts = Vec::with_capacity(n);
        let mut x_pts = Vec::with_capacity(n);
        for _ in 0..n {
            let a: Vec<f64> = a_dom
                .lo
                .iter()
                .zip(&a_dom.hi)
                .map(|(l, h)| rng.gen_range(*l..*h))
                .collect();
            let mean = self.conditional_mean(&a);
            let x: Vec<f64> = mean
                .iter()
                .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            x_pts.push(self.clamped(&x));
            a_pts.push(a);
        }
        MatchedDataset::new(x_pts, a_pts, ridge_lambda)
    }

    /// Oracle optimum of `f`: dense grid plus local refinement, cached.
    pub fn optimum(&self) -> (Vec<f64>, f64) {
        self.optimum
            .get_or_init(|| {
                if self.spec.kind == EnvKind::Bandit {
                    let b = self.bandit.as_ref().expect("bandit spec present");
                    let (i, v) = b
                        .rewards
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .unwrap();
                    return (vec![i as f64], *v);
                }
                let dom = self.x_domain();
                let dim = dom.dim();
                let per_axis = if dim == 1 { 4001 } else { 400 };
                let mut lo = dom.lo.clone();
                let mut hi = dom.hi.clone();
                let mut best_x = dom.center();
                let mut best_v = f64::NEG_INFINITY;
                for _round in 0..4 {
                    let (bx, bv) = self.grid_max(&lo, &hi, per_axis);
                    if bv > best_v {
                        best_v = bv;
                        best_x = bx;
                    }
                    // shrink around the incumbent by two grid cells per axis
                    for k in 0..dim {
                        let cell = (hi[k] - lo[k]) / (per_axis as f64 - 1.0);
                        lo[k] = (best_x[k] - 2.0 * cell).max(dom.lo[k]);
                        hi[k] = (best_x[k] + 2.0 * cell).min(dom.hi[k]);
                    }
                }
                (best_x, best_v)
            })
            .clone()
    }

    fn grid_max(&self, lo: &[f64], hi: &[f64], per_axis: usize) -> (Vec<f64>, f64) {
        let dim = lo.len();
        let mut best_x = lo.to_vec();
        let mut best_v = f64::NEG_INFINITY;
        let mut idx = vec![0usize; dim];
        let mut x = vec![0.0; dim];
        loop {
            for k in 0..dim {
                x[k] = lo[k] + (hi[k] - lo[k]) * idx[k] as f64 / (per_axis as f64 - 1.0);
            }
            if let Ok(v) = self.f(&x) {
                if v > best_v {
                    best_v = v;
                    best_x = x.clone();
                }
            }
            let mut k = 0;
            loop {
                if k == dim {
                    return (best_x, best_v);
                }
                idx[k] += 1;
                if idx[k] < per_axis {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

/// Exact aggregate posterior for the finite-arm environment: with arm values
/// `f ~ N(mu, Sigma)` and mixing vectors `p(a)`, the aggregate has
/// `nu(a) = p(a)' mu` and `q(a, a') = p(a)' Sigma p(a')`.
pub struct BanditPosterior {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    policy: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    /// Conditioning data: mixing vectors, centered observations, noise.
    obs_p: DMatrix<f64>,
    gain: Option<ObsGain>,
}

struct ObsGain {
    /// (P' Sigma P + diag noise)^{-1} applied to the centered observations.
    beta: DVector<f64>,
    c_inv: DMatrix<f64>,
}

impl BanditPosterior {
    fn policy_vec(&self, a: &[f64]) -> DVector<f64> {
        DVector::from_vec((self.policy)(a))
    }

    pub fn prior_mean_at(&self, a: &[f64]) -> f64 {
        self.policy_vec(a).dot(&self.mu)
    }

    pub fn prior_cov_at(&self, a: &[f64], a2: &[f64]) -> f64 {
        (self.policy_vec(a).transpose() * &self.sigma * self.policy_vec(a2))[(0, 0)]
    }

    /// Condition on aggregate observations `z_i = p(a_i)' f + noise`.
    pub fn condition(&self, queries: &[Vec<f64>], z: &[f64], noise_vars: &[f64]) -> Result<Self> {
        if queries.len() != z.len() || z.len() != noise_vars.len() {
            return Err(Error::invalid("observation arrays must have equal length"));
        }
        let k = self.mu.len();
        let t = queries.len();
        let mut p = DMatrix::zeros(k, t);
        for (j, a) in queries.iter().enumerate() {
            p.set_column(j, &self.policy_vec(a));
        }
        let mut c = p.transpose() * &self.sigma * &p;
        for (j, nv) in noise_vars.iter().enumerate() {
            if !(*nv > 0.0) {
                return Err(Error::invalid("noise variances must be positive"));
            }
            c[(j, j)] += nv;
        }
        let chol = nalgebra::Cholesky::new(c.clone())
            .ok_or(Error::FactorizationFailed { last_jitter: 0.0 })?;
        let resid = DVector::from_iterator(t, z.iter().zip(queries).map(|(zi, a)| zi - self.prior_mean_at(a)));
        let beta = chol.solve(&resid);
        let c_inv = chol.inverse();
        Ok(BanditPosterior {
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            policy: Arc::clone(&self.policy),
            obs_p: p,
            gain: Some(ObsGain { beta, c_inv }),
        })
    }

    pub fn mean_at(&self, a: &[f64]) -> f64 {
        let prior = self.prior_mean_at(a);
        match &self.gain {
            None => prior,
            Some(g) => {
                let cross = self.obs_p.transpose() * (&self.sigma * self.policy_vec(a));
                prior + cross.dot(&g.beta)
            }
        }
    }

    pub fn cov_at(&self, a: &[f64], a2: &[f64]) -> f64 {
        let prior = self.prior_cov_at(a, a2);
        match &self.gain {
            None => prior,
            Some(g) => {
                let ca = self.obs_p.transpose() * (&self.sigma * self.policy_vec(a));
                let cb = self.obs_p.transpose() * (&self.sigma * self.policy_vec(a2));
                prior - (ca.transpose() * &g.c_inv * cb)[(0, 0)]
            }
        }
    }

    pub fn var_at(&self, a: &[f64]) -> f64 {
        self.cov_at(a, a).max(VARIANCE_FLOOR)
    }
}

impl PosteriorOverA for BanditPosterior {
    fn mean(&self, a: &[f64]) -> f64 {
        self.mean_at(a)
    }
    fn var(&self, a: &[f64]) -> f64 {
        self.var_at(a)
    }
}

/// Exact finite-dimensional aggregate prior for a bandit: requires a
/// symmetric positive semidefinite arm covariance.
pub fn bandit_posterior(
    mu: &[f64],
    sigma: &DMatrix<f64>,
    policy: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
) -> Result<BanditPosterior> {
    let k = mu.len();
    if sigma.nrows() != k || sigma.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, got: sigma.nrows() });
    }
    for i in 0..k {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 {
                return Err(Error::invalid("arm covariance must be symmetric"));
            }
        }
    }
    let eig = sigma.clone().symmetric_eigenvalues();
    if eig.iter().any(|l| *l < -1e-10) {
        return Err(Error::invalid("arm covariance must be positive semidefinite"));
    }
    Ok(BanditPosterior {
        mu: DVector::from_column_slice(mu),
        sigma: sigma.clone(),
        policy,
        obs_p: DMatrix::zeros(k, 0),
        gain: None,
    })
}

/// One row of a regret trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretRecord {
    pub iteration: usize,
    pub cumulative_cost: f64,
    pub a: Vec<f64>,
    pub z: f64,
    pub x_recommend: Vec<f64>,
    pub simple_regret: f64,
    pub instant_regret: f64,
}

/// Running regret bookkeeping against a precomputed oracle optimum. Both
/// regrets use running maxima, so they are non-increasing by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretTrace {
    pub f_star: f64,
    pub records: Vec<RegretRecord>,
    best_f: f64,
    best_g: f64,
}

impl RegretTrace {
    pub fn new(f_star: f64) -> Self {
        RegretTrace {
            f_star,
            records: Vec::new(),
            best_f: f64::NEG_INFINITY,
            best_g: f64::NEG_INFINITY,
        }
    }

    /// Append one iteration: simple regret tracks the best recommended
    /// input so far, instant regret the best queried aggregate value.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        env: &Environment,
        iteration: usize,
        cumulative_cost: f64,
        a: &[f64],
        z: f64,
        level: Option<usize>,
        x_recommend: &[f64],
    ) -> Result<&RegretRecord> {
        self.best_f = self.best_f.max(env.f(x_recommend)?);
        self.best_g = self.best_g.max(env.true_g(a, level)?);
        self.records.push(RegretRecord {
            iteration,
            cumulative_cost,
            a: a.to_vec(),
            z,
            x_recommend: x_recommend.to_vec(),
            simple_regret: self.f_star - self.best_f,
            instant_regret: self.f_star - self.best_g,
        });
        Ok(self.records.last().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn env(kind: EnvKind) -> Environment {
        Environment::new(EnvSpec::new(kind)).unwrap()
    }

    #[test]
    fn branin_known_optima() {
        let v1 = branin(&[-PI, 12.275]).unwrap();
        let v2 = branin(&[PI, 2.275]).unwrap();
        assert_abs_diff_eq!(v1, -0.397887, epsilon = 1e-5);
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-6);
        assert!(branin(&[11.0, 0.0]).is_err());
    }

    #[test]
    fn oracle_optimum_dominates_grid() {
        let e = env(EnvKind::BraninLt);
        let (x_star, f_star) = e.optimum();
        assert_abs_diff_eq!(f_star, -0.397887, epsilon = 1e-4);
        // reference 200x200 grid never beats the refined optimum
        let (_, grid_best) = e.grid_max(&[-5.0, 0.0], &[10.0, 15.0], 200);
        assert!(f_star >= grid_best);
        assert!(f_star - grid_best <= 1e-3);
        assert!(e.x_domain().contains(&x_star));
    }

    #[test]
    fn transform_corners() {
        assert_eq!(transform_lt(&[0.0, 0.0], &[0.0, 0.0]), vec![-5.0, 0.0]);
        assert_eq!(transform_lt(&[1.0, 1.0], &[0.0, 0.0]), vec![10.0, 15.0]);
        assert_eq!(transform_nlt(&[0.0, 0.0], &[0.0, 0.0]), vec![10.0, 15.0]);
        // clamping keeps big disturbances inside the box
        let x = transform_lt(&[0.5, 0.5], &[100.0, -100.0]);
        assert_eq!(x, vec![10.0, 0.0]);
    }

    #[test]
    fn degenerate_conditional_is_exact() {
        let mut spec = EnvSpec::new(EnvKind::BraninLt);
        spec.tau2 = 0.0;
        spec.obs_noise_sd = 0.0;
        let e = Environment::new(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = [0.3, 0.6];
        let z = e.observe(&a, None, &mut rng).unwrap();
        let expect = branin(&transform_lt(&a, &[0.0, 0.0])).unwrap();
        assert_eq!(z, expect);
        assert_abs_diff_eq!(e.true_g(&a, None).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn bandit_point_mass() {
        let spec = BanditSpec::new(
            vec![1.0, 0.0],
            0.0,
            Arc::new(|_a: &[f64]| vec![1.0, 0.0]),
        )
        .unwrap();
        let e = Environment::bandit(EnvSpec::new(EnvKind::Bandit), spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(e.observe(&[0.5], None, &mut rng).unwrap(), 1.0);
        assert_eq!(e.true_g(&[0.5], None).unwrap(), 1.0);
    }

    #[test]
    fn true_g_moment_identities() {
        let spec = EnvSpec::new(EnvKind::Custom1d);
        // constant objective
        let e = Environment::custom_1d_with(spec.clone(), Arc::new(|_| 3.25)).unwrap();
        assert_abs_diff_eq!(e.true_g(&[0.4], None).unwrap(), 3.25, epsilon = 1e-10);
        // linear objective: the clamp bites unless the spread is small
        let mut narrow = spec.clone();
        narrow.tau2 = 1e-4;
        let e = Environment::custom_1d_with(narrow.clone(), Arc::new(|x| x)).unwrap();
        assert_abs_diff_eq!(e.true_g(&[0.4], None).unwrap(), 0.4, epsilon = 1e-10);
        // quadratic objective: second moment
        let e = Environment::custom_1d_with(narrow, Arc::new(|x| x * x)).unwrap();
        assert_abs_diff_eq!(e.true_g(&[0.4], None).unwrap(), 0.4 * 0.4 + 1e-4, epsilon = 1e-8);
    }

    #[test]
    fn observe_unbiased_for_linear_objective() {
        let mut spec = EnvSpec::new(EnvKind::Custom1d);
        spec.tau2 = 0.01;
        spec.obs_noise_sd = 0.05;
        let e = Environment::custom_1d_with(spec, Arc::new(|x| 3.0 * x)).unwrap();
        let a = [0.5];
        let g = e.true_g(&a, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = e.observe(&a, None, &mut rng).unwrap();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - g).abs() <= 4.0 * se, "mean {mean} vs g {g} se {se}");
    }

    #[test]
    fn observe_unbiased_branin_lt() {
        let e = env(EnvKind::BraninLt);
        let a = [0.4, 0.7];
        let g = e.true_g(&a, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = e.observe(&a, None, &mut rng).unwrap();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - g).abs() <= 4.0 * se, "mean {mean} vs g {g} se {se}");
    }

    #[test]
    fn multires_quadrature_observation() {
        let mut spec = EnvSpec::new(EnvKind::MultiresTree);
        spec.obs_noise_sd = 0.0;
        let e = Environment::new(spec).unwrap();
        let a = [0.5, 0.5];
        // shallow levels integrate over wider cells
        let g0 = e.true_g(&a, Some(0)).unwrap();
        let g6 = e.true_g(&a, Some(6)).unwrap();
        let f = e.f(&a).unwrap();
        assert!((g6 - f).abs() < (g0 - f).abs());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = e.observe(&a, Some(3), &mut rng).unwrap();
        let sd = e.schedule().noise_sd(3);
        assert!((z - e.true_g(&a, Some(3)).unwrap()).abs() < 6.0 * sd + 1e-12);
    }

    #[test]
    fn d1_degenerate_transform_exact() {
        let mut spec = EnvSpec::new(EnvKind::BraninLt);
        spec.tau2 = 0.0;
        let e = Environment::new(spec).unwrap();
        let d1 = e.generate_d1(20, 1e-3, 9).unwrap();
        for (x, a) in d1.x_points().iter().zip(d1.a_points()) {
            assert_eq!(*x, transform_lt(a, &[0.0, 0.0]));
        }
    }

    #[test]
    fn d1_singleton_fits() {
        let e = env(EnvKind::BraninLt);
        let d1 = e.generate_d1(1, 1e-3, 1).unwrap();
        let kx = crate::kernel::KernelSpec::isotropic(2, 3.0, 1.0).unwrap();
        let ka = crate::kernel::KernelSpec::isotropic(2, 0.3, 1.0).unwrap();
        assert!(crate::cmp::fit_cmo(&d1, &kx, &ka).is_ok());
    }

    #[test]
    fn d1_regression_recovers_linear_map() {
        let e = env(EnvKind::BraninLt);
        let d1 = e.generate_d1(10_000, 1e-3, 13).unwrap();
        // least squares of x0 on a0: slope 15, intercept -5
        let n = 10_000f64;
        let (mut sa, mut sx, mut saa, mut sax) = (0.0, 0.0, 0.0, 0.0);
        for (x, a) in d1.x_points().iter().zip(d1.a_points()) {
            sa += a[0];
            sx += x[0];
            saa += a[0] * a[0];
            sax += a[0] * x[0];
        }
        let slope = (sax - sa * sx / n) / (saa - sa * sa / n);
        let intercept = sx / n - slope * sa / n;
        assert!((slope - 15.0).abs() / 15.0 < 0.02, "slope {slope}");
        assert!((intercept + 5.0).abs() / 5.0 < 0.02, "intercept {intercept}");
    }

    #[test]
    fn resolution_schedule_decreases() {
        let mut prev = f64::INFINITY;
        // (ln t)^{1/2} / sqrt(t) peaks at t = e, so monotone decay starts at 3
        for t in 3..=100 {
            let v = resolution_schedule(0.005, t, 1);
            assert!(v > 0.0 && v < prev, "t={t}");
            prev = v;
        }
        assert!(resolution_schedule(0.005, 2, 1) > 0.0);
    }

    fn simple_policy() -> Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync> {
        Arc::new(|a: &[f64]| {
            let w = a[0].clamp(0.0, 1.0);
            vec![1.0 - w, w * 0.5, w * 0.5]
        })
    }

    #[test]
    fn bandit_prior_point_mass_and_orthogonal() {
        let mu = [1.0, 2.0, 3.0];
        let sigma = DMatrix::identity(3, 3);
        let post = bandit_posterior(
            &mu,
            &sigma,
            Arc::new(|a: &[f64]| {
                let i = a[0] as usize;
                let mut p = vec![0.0; 3];
                p[i] = 1.0;
                p
            }),
        )
        .unwrap();
        for i in 0..3 {
            assert_eq!(post.prior_mean_at(&[i as f64]), mu[i]);
            assert_eq!(post.prior_cov_at(&[i as f64], &[i as f64]), 1.0);
        }
        assert_eq!(post.prior_cov_at(&[0.0], &[1.0]), 0.0);
    }

    #[test]
    fn bandit_rejects_bad_covariance() {
        let mut sigma = DMatrix::identity(2, 2);
        sigma[(0, 1)] = 0.5;
        assert!(bandit_posterior(&[0.0, 0.0], &sigma, simple_policy()).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(bandit_posterior(&[0.0, 0.0], &indefinite, simple_policy()).is_err());
    }

    #[test]
    fn bandit_conditioning_matches_joint_gaussian_oracle() {
        // oracle: assemble the full joint covariance of (g(a_eval), z_1..z_t)
        // and condition with an explicit inverse
        let mu = [0.5, -0.2, 1.1];
        let sigma = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.3, 0.1, 0.3, 0.8, 0.2, 0.1, 0.2, 1.2],
        );
        let prior = bandit_posterior(&mu, &sigma, simple_policy()).unwrap();
        let queries = vec![vec![0.1], vec![0.5], vec![0.9]];
        let z = vec![0.4, 0.2, 0.9];
        let noise = vec![0.04, 0.09, 0.01];
        let post = prior.condition(&queries, &z, &noise).unwrap();

        let eval = vec![0.33];
        let p_of = |a: &Vec<f64>| DVector::from_vec((simple_policy())(a));
        let pe = p_of(&eval);
        let mu_v = DVector::from_column_slice(&mu);
        let t = queries.len();
        let mut c = DMatrix::zeros(t, t);
        let mut cross = DVector::zeros(t);
        let mut prior_obs = DVector::zeros(t);
        for i in 0..t {
            let pi = p_of(&queries[i]);
            prior_obs[i] = pi.dot(&mu_v);
            cross[i] = (pe.transpose() * &sigma * &pi)[(0, 0)];
            for j in 0..t {
                let pj = p_of(&queries[j]);
                c[(i, j)] = (pi.transpose() * &sigma * &pj)[(0, 0)];
            }
            c[(i, i)] += noise[i];
        }
        let c_inv = c.try_inverse().unwrap();
        let resid = DVector::from_vec(z.clone()) - prior_obs;
        let oracle_mean = pe.dot(&mu_v) + (cross.transpose() * &c_inv * &resid)[(0, 0)];
        let oracle_var =
            (pe.transpose() * &sigma * &pe)[(0, 0)] - (cross.transpose() * &c_inv * &cross)[(0, 0)];
        assert_abs_diff_eq!(post.mean_at(&eval), oracle_mean, epsilon = 1e-10);
        assert_abs_diff_eq!(post.var_at(&eval), oracle_var, epsilon = 1e-10);
    }

    #[test]
    fn regret_trace_laws() {
        let e = env(EnvKind::BraninLt);
        let (x_star, f_star) = e.optimum();
        let mut trace = RegretTrace::new(f_star);
        let first = trace
            .push(&e, 1, 1.0, &[0.2, 0.2], -3.0, None, &[0.0, 5.0])
            .unwrap()
            .clone();
        assert_abs_diff_eq!(
            first.simple_regret,
            f_star - e.f(&[0.0, 5.0]).unwrap(),
            epsilon = 1e-12
        );
        trace.push(&e, 2, 2.0, &[0.5, 0.5], -1.0, None, &x_star).unwrap();
        trace.push(&e, 3, 3.0, &[0.9, 0.1], -2.0, None, &[1.0, 1.0]).unwrap();
        let regs: Vec<f64> = trace.records.iter().map(|r| r.simple_regret).collect();
        assert!(regs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let iregs: Vec<f64> = trace.records.iter().map(|r| r.instant_regret).collect();
        assert!(iregs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(regs.iter().chain(&iregs).all(|r| *r >= -1e-9));
        // optimum recommended: simple regret pinned at zero afterwards
        assert!(trace.records[1].simple_regret.abs() < 1e-6);
        assert!(trace.records[2].simple_regret.abs() < 1e-6);
    }
}
