//! Scalar normal-distribution helpers and quadrature rules.
//!
//! The acquisition formulas evaluate `log Phi` and the hazard `phi/Phi` at
//! arguments as low as -50, where naive evaluation underflows. Below
//! [`ASYMPTOTIC_CUTOFF`] both switch to the Mills-ratio asymptotic series.

use statrs::function::erf::erfc;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Arguments below this use the asymptotic expansions.
pub const ASYMPTOTIC_CUTOFF: f64 = -8.0;

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF via the complementary error function.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `1 - 1/z^2 + 3/z^4 - 15/z^6`, the leading terms of the Mills-ratio series
/// `Phi(z) ~ phi(z)/(-z) * series(z)` for z << 0.
fn mills_series(z: f64) -> f64 {
    let z2 = z * z;
    1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
}

/// `ln Phi(z)`, finite for all finite `z`.
pub fn ln_norm_cdf(z: f64) -> f64 {
    if z < ASYMPTOTIC_CUTOFF {
        -0.5 * z * z - (-z).ln() - 0.5 * LN_2PI + mills_series(z).ln()
    } else {
        norm_cdf(z).ln()
    }
}

/// Hazard function `phi(z)/Phi(z)`, finite for all finite `z`.
pub fn norm_hazard(z: f64) -> f64 {
    if z < ASYMPTOTIC_CUTOFF {
        -z / mills_series(z)
    } else {
        norm_pdf(z) / norm_cdf(z)
    }
}

/// Tensor-product Gauss-Hermite expectation of `f` under `N(mean, tau2 I)`.
///
/// `order` nodes per axis; exact for polynomials of degree `2*order - 1`.
pub fn gauss_hermite_expect<F: FnMut(&[f64]) -> f64>(
    mean: &[f64],
    tau2: f64,
    order: usize,
    mut f: F,
) -> f64 {
    let rule = gauss_quad::GaussHermite::new(order).expect("order >= 2");
    let nodes: Vec<f64> = rule.nodes().copied().collect();
    let weights: Vec<f64> = rule.weights().copied().collect();
    let d = mean.len();
    let tau = tau2.sqrt();
    let mut x = vec![0.0; d];
    let mut idx = vec![0usize; d];
    let norm = std::f64::consts::PI.powf(-0.5 * d as f64);
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            x[k] = mean[k] + SQRT_2 * tau * nodes[i];
            w *= weights[i];
        }
        total += w * f(&x);
        // odometer over the d-fold tensor grid
        let mut k = 0;
        loop {
            if k == d {
                return norm * total;
            }
            idx[k] += 1;
            if idx[k] < order {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Tensor-product Gauss-Legendre average of `f` over the box `[lo, hi]`
/// (i.e. the expectation under the uniform distribution on the box).
pub fn gauss_legendre_box_mean<F: FnMut(&[f64]) -> f64>(
    lo: &[f64],
    hi: &[f64],
    order: usize,
    mut f: F,
) -> f64 {
    let rule = gauss_quad::GaussLegendre::new(order).expect("order >= 2");
    let nodes: Vec<f64> = rule.nodes().copied().collect();
    let weights: Vec<f64> = rule.weights().copied().collect();
    let d = lo.len();
    let mut x = vec![0.0; d];
    let mut idx = vec![0usize; d];
    // weights sum to 2 per axis, so the uniform average divides by 2^d
    let norm = 0.5f64.powi(d as i32);
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            x[k] = 0.5 * ((hi[k] - lo[k]) * nodes[i] + hi[k] + lo[k]);
            w *= weights[i];
        }
        total += w * f(&x);
        let mut k = 0;
        loop {
            if k == d {
                return norm * total;
            }
            idx[k] += 1;
            if idx[k] < order {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Expectation of `f(clamp(x, lo, hi))` under `x ~ N(mean, tau2 I)`.
///
/// Clamping makes the integrand kinked at the box faces, which defeats
/// plain Gauss-Hermite. Instead each axis is split into three segments
/// (below, inside, above the box); below/above collapse to point masses at
/// the face with the Gaussian tail weight, and the inside segments are
/// integrated with Gauss-Legendre against the Gaussian density, where the
/// integrand is smooth.
pub fn gaussian_clamped_expect<F: FnMut(&[f64]) -> f64>(
    mean: &[f64],
    tau2: f64,
    lo: &[f64],
    hi: &[f64],
    order: usize,
    mut f: F,
) -> f64 {
    let d = mean.len();
    let tau = tau2.sqrt();
    let rule = gauss_quad::GaussLegendre::new(order).expect("order >= 2");
    let nodes: Vec<f64> = rule.nodes().copied().collect();
    let weights: Vec<f64> = rule.weights().copied().collect();
    let mut seg = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    loop {
        // segment weight and, for inside axes, the quadrature loop below
        let mut w = 1.0;
        let mut free: Vec<usize> = Vec::new();
        for (k, &s) in seg.iter().enumerate() {
            match s {
                0 => {
                    w *= norm_cdf((lo[k] - mean[k]) / tau);
                    x[k] = lo[k];
                }
                2 => {
                    w *= 1.0 - norm_cdf((hi[k] - mean[k]) / tau);
                    x[k] = hi[k];
                }
                _ => free.push(k),
            }
        }
        if w > 0.0 {
            if free.is_empty() {
                total += w * f(&x);
            } else {
                // limit each inside range to +-8 tau around the mean: the
                // omitted mass is ~1e-16 and the default order resolves the
                // density to ~1e-12 at this width
                let ranges: Vec<(f64, f64)> = free
                    .iter()
                    .map(|&k| {
                        (
                            lo[k].max(mean[k] - 8.0 * tau),
                            hi[k].min(mean[k] + 8.0 * tau),
                        )
                    })
                    .collect();
                let mut idx = vec![0usize; free.len()];
                // an empty range means the segment carries negligible mass
                'quad: while ranges.iter().all(|(a, b)| a < b) {
                    let mut qw = w;
                    for (j, &k) in free.iter().enumerate() {
                        let (a, b) = ranges[j];
                        let half = 0.5 * (b - a);
                        x[k] = 0.5 * (b + a) + half * nodes[idx[j]];
                        qw *= weights[idx[j]] * half * norm_pdf((x[k] - mean[k]) / tau) / tau;
                    }
                    total += qw * f(&x);
                    let mut j = 0;
                    loop {
                        if j == free.len() {
                            break 'quad;
                        }
                        idx[j] += 1;
                        if idx[j] < order {
                            break;
                        }
                        idx[j] = 0;
                        j += 1;
                    }
                }
            }
        }
        let mut k = 0;
        loop {
            if k == d {
                return total;
            }
            seg[k] += 1;
            if seg[k] < 3 {
                break;
            }
            seg[k] = 0;
            k += 1;
        }
    }
}

/// Confidence-band width multiplier for an anytime-valid bound.
///
/// With `pi_t = pi^2 t^2 / 6` (so that `sum_t 1/pi_t <= 1`), the band
/// `|mean_t - truth| <= zeta_t * sd_t` with `zeta_t = sqrt(2 ln(pi_t / (2
/// delta)))` holds simultaneously for all `t >= 1` with probability at least
/// `1 - delta` under the modeled Gaussian posterior.
pub fn concentration_zeta(t: usize, delta: f64) -> f64 {
    let pi_t = std::f64::consts::PI.powi(2) * (t as f64).powi(2) / 6.0;
    (2.0 * (pi_t / (2.0 * delta)).ln()).sqrt()
}

/// Gauss-Legendre integral of `f` over `[a, b]` in one dimension.
pub fn gauss_legendre_integral<F: FnMut(f64) -> f64>(a: f64, b: f64, order: usize, f: F) -> f64 {
    gauss_quad::GaussLegendre::new(order)
        .expect("order >= 2")
        .integrate(a, b, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cdf_spot_values() {
        assert_abs_diff_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(norm_cdf(1.96), 0.9750021048517795, epsilon = 1e-9);
        assert_abs_diff_eq!(norm_pdf(0.0), INV_SQRT_2PI, epsilon = 1e-16);
    }

    #[test]
    fn ln_cdf_matches_direct_above_cutoff() {
        for z in [-7.9, -4.0, -1.0, 0.0, 2.0] {
            assert_abs_diff_eq!(ln_norm_cdf(z), norm_cdf(z).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn ln_cdf_continuous_at_cutoff() {
        let a = ln_norm_cdf(-8.0 + 1e-9);
        let b = ln_norm_cdf(-8.0 - 1e-9);
        assert!((a - b).abs() < 1e-4, "jump at cutoff: {a} vs {b}");
    }

    #[test]
    fn hazard_never_nan_deep_in_tail() {
        for z in [-10.0, -20.0, -50.0, -300.0] {
            let h = norm_hazard(z);
            assert!(h.is_finite() && h > 0.0);
            // Mills: hazard ~ -z for z << 0
            assert!((h / -z - 1.0).abs() < 0.02, "z={z} h={h}");
        }
    }

    #[test]
    fn hermite_second_moment() {
        // E[x^2] under N(mu, tau2) = mu^2 + tau2
        let g = gauss_hermite_expect(&[0.3], 0.25, 16, |x| x[0] * x[0]);
        assert_abs_diff_eq!(g, 0.3f64.powi(2) + 0.25, epsilon = 1e-12);
    }

    #[test]
    fn clamped_expect_matches_hermite_when_clamp_inactive() {
        let g = gaussian_clamped_expect(&[0.2, -0.1], 0.04, &[-50.0, -50.0], &[50.0, 50.0], 32, |x| {
            (x[0] - x[1]).powi(2) + x[0].sin()
        });
        let h = gauss_hermite_expect(&[0.2, -0.1], 0.04, 32, |x| (x[0] - x[1]).powi(2) + x[0].sin());
        assert_abs_diff_eq!(g, h, epsilon = 1e-8);
    }

    #[test]
    fn clamped_expect_matches_closed_form_point_masses() {
        // f = identity in 1-D with clamp to [0, 1], mean at the low face:
        // E[clamp(x)] = 0.5 E[|x|] truncated... check against Monte Carlo-free
        // closed form: E[clamp(X,0,1)] with X ~ N(0, s^2)
        let s: f64 = 0.3;
        let g = gaussian_clamped_expect(&[0.0], s * s, &[0.0], &[1.0], 64, |x| x[0]);
        // closed form: s*(phi(0)-phi(1/s)) + (1 - Phi(1/s))
        let closed = s * (norm_pdf(0.0) - norm_pdf(1.0 / s)) + (1.0 - norm_cdf(1.0 / s));
        assert_abs_diff_eq!(g, closed, epsilon = 1e-12);
    }

    #[test]
    fn concentration_zeta_grows_slowly_and_is_positive() {
        let z1 = concentration_zeta(1, 0.1);
        let z100 = concentration_zeta(100, 0.1);
        assert!(z1 > 0.0 && z100 > z1);
        // direct recomputation at t = 5
        let pi5 = std::f64::consts::PI.powi(2) * 25.0 / 6.0;
        assert_abs_diff_eq!(
            concentration_zeta(5, 0.1),
            (2.0 * (pi5 / 0.2).ln()).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn legendre_box_mean_of_linear() {
        let g = gauss_legendre_box_mean(&[0.0, 0.0], &[1.0, 2.0], 8, |x| x[0] + x[1]);
        assert_abs_diff_eq!(g, 0.5 + 1.0, epsilon = 1e-13);
    }
}
