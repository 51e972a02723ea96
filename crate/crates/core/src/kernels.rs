//! Analytic oracles: heat kernels, first and second moment densities and the
//! total-mass law of the superprocess with branching term v².
//!
//! Everything here is deterministic and is used to validate simulation output.

use std::f64::consts::PI;

use serde::Serialize;
use statrs::function::erf::erf;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{domain, Error, Result};
use crate::measure::{check_point, squared_distance, Dimension, DiscreteMeasure};
use crate::quad::{integrate, Tolerance};

pub const DEFAULT_QUAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelEval {
    pub value: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceDensityEval {
    pub value: f64,
    /// Estimated absolute quadrature error.
    pub abs_error: f64,
    pub quad_tol: f64,
    pub t: f64,
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        domain(format!("time must be positive and finite, got {t}"))
    }
}

/// Gaussian density with covariance t·I evaluated at squared radius `r2`.
#[inline]
pub(crate) fn gauss(r2: f64, t: f64, d: usize) -> f64 {
    (2.0 * PI * t).powf(-0.5 * d as f64) * (-r2 / (2.0 * t)).exp()
}

/// p_t(x) = (2πt)^{-d/2} exp(-|x|²/2t).
pub fn heat_kernel(x: &[f64], t: f64) -> Result<KernelEval> {
    check_time(t)?;
    let dim = Dimension::new(x.len())?;
    check_point(dim, x)?;
    let r2: f64 = x.iter().map(|c| c * c).sum();
    Ok(KernelEval {
        value: gauss(r2, t, dim.get()),
        t,
    })
}

/// Density (μ * p_t)(x) of the intensity measure E_μ ξ_t.
pub fn mean_density(mu: &DiscreteMeasure, x: &[f64], t: f64) -> Result<KernelEval> {
    check_time(t)?;
    check_point(mu.dim(), x)?;
    let d = mu.dim().get();
    let value = mu
        .atoms()
        .map(|(u, w)| w * gauss(squared_distance(x, u), t, d))
        .sum();
    Ok(KernelEval { value, t })
}

/// Covariance density (μ * q_t)(x1, x2) of ξ_t.
///
/// Uses the one-dimensional form
/// q_t(x̄ ± r) = 2^{1-d} ∫_0^t p_{(t+s)/2}(x̄) p_{(t-s)/2}(r) ds,
/// integrated in the variable v = ln(t - s), which flattens the
/// (t - s)^{-d/2} exp(-|r|²/(t - s)) endpoint behaviour at s = t.
pub fn covariance_density(
    mu: &DiscreteMeasure,
    x1: &[f64],
    x2: &[f64],
    t: f64,
    quad_tol: f64,
) -> Result<CovarianceDensityEval> {
    check_time(t)?;
    check_point(mu.dim(), x1)?;
    check_point(mu.dim(), x2)?;
    if !(quad_tol > 0.0 && quad_tol < 1.0) {
        return domain(format!("quad_tol must lie in (0, 1), got {quad_tol}"));
    }
    let d = mu.dim().get();
    let half_diff2 = 0.25 * squared_distance(x1, x2);
    if half_diff2 == 0.0 && d >= 2 {
        return Err(Error::Singular(d));
    }
    if mu.is_empty() {
        return Ok(CovarianceDensityEval {
            value: 0.0,
            abs_error: 0.0,
            quad_tol,
            t,
        });
    }

    // Squared distances from each atom to the midpoint x̄.
    let mid: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| 0.5 * (a + b)).collect();
    let atoms: Vec<(f64, f64)> = mu
        .atoms()
        .map(|(u, w)| (squared_distance(&mid, u), w))
        .collect();

    let hi = t.ln();
    let mut lo = if half_diff2 > 0.0 {
        (half_diff2 / 60.0).ln()
    } else {
        f64::NEG_INFINITY
    };
    if d == 1 {
        lo = lo.max(hi - 60.0);
    }
    lo = lo.min(hi - 1.0);

    let integrand = |v: f64| {
        let w = v.exp();
        let spread = gauss(half_diff2, 0.5 * w, d) * w;
        if spread == 0.0 {
            return 0.0;
        }
        let centre_time = t - 0.5 * w;
        let centre: f64 = atoms
            .iter()
            .map(|&(m2, weight)| weight * gauss(m2, centre_time, d))
            .sum();
        centre * spread
    };
    let q = integrate(integrand, lo, hi, Tolerance::relative(quad_tol))?;
    let scale = 2f64.powi(1 - d as i32);
    Ok(CovarianceDensityEval {
        value: scale * q.value,
        abs_error: scale * q.abs_error,
        quad_tol,
        t,
    })
}

/// ∫∫ (δ_0 * q_t)(x1, x2) dx1 dx2 evaluated by quadrature of [`covariance_density`].
///
/// The integrand depends only on |x̄| and |r|, so the 2d-dimensional integral
/// reduces to a two-dimensional radial one. The analytic value is 2t.
pub fn covariance_total_integral(t: f64, dim: Dimension, tol: f64) -> Result<f64> {
    check_time(t)?;
    let d = dim.get();
    let mu = DiscreteMeasure::unit_at_origin(dim);
    let sphere = sphere_area(d);
    let a_max = 8.0 * t.sqrt();
    let b_max = 8.0 * (0.5 * t).sqrt();
    let inner_tol = (tol * 0.1).max(1e-13);
    let middle_tol = (tol * 0.3).max(1e-12);

    let mut failure: Option<Error> = None;
    let mut x1 = vec![0.0; d];
    let mut x2 = vec![0.0; d];
    let mut radial_b = |b: f64| -> f64 {
        if failure.is_some() {
            return 0.0;
        }
        let inner = integrate(
            |a: f64| {
                if d == 1 {
                    x1[0] = a + b;
                    x2[0] = a - b;
                } else {
                    x1[0] = a;
                    x2[0] = a;
                    x1[1] = b;
                    x2[1] = -b;
                }
                match covariance_density(&mu, &x1, &x2, t, inner_tol) {
                    Ok(q) => a.powi(d as i32 - 1) * q.value,
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                }
            },
            0.0,
            a_max,
            Tolerance::relative(middle_tol),
        );
        match inner {
            Ok(q) => b.powi(d as i32 - 1) * q.value,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let outer = integrate(&mut radial_b, 0.0, b_max, Tolerance::relative(tol * 0.1))?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(2f64.powi(d as i32) * sphere * sphere * outer.value)
}

/// Surface area of the unit sphere S^{d-1}.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(0.5 * d as f64) / ln_gamma(0.5 * d as f64).exp()
}

/// Volume of the unit ball in ℝ^d.
pub fn ball_volume(d: usize) -> f64 {
    sphere_area(d) / d as f64
}

/// E_μ exp(-θ‖ξ_t‖) = exp(-‖μ‖ θ/(1 + θt)); θ = ∞ gives the extinction probability.
pub fn total_mass_laplace(theta: f64, t: f64, m0: f64) -> Result<f64> {
    check_time(t)?;
    if !(theta >= 0.0) {
        return domain(format!("theta must be nonnegative, got {theta}"));
    }
    if !(m0 >= 0.0 && m0.is_finite()) {
        return domain(format!("initial mass must be nonnegative, got {m0}"));
    }
    let v = if theta.is_infinite() {
        1.0 / t
    } else {
        theta / (1.0 + theta * t)
    };
    Ok((-m0 * v).exp())
}

/// P_μ{ξ_t = 0} = exp(-‖μ‖/t).
pub fn extinction_probability(m0: f64, t: f64) -> Result<f64> {
    total_mass_laplace(f64::INFINITY, t, m0)
}

/// Planar time inflation l(ε) = 1 + |log ε|^{-1/2}, the upper end of the
/// admissible window 0 ≤ l(ε) - 1 ≤ |log ε|^{-1/2}.
pub fn planar_time_inflation(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return domain(format!("planar inflation needs 0 < eps < 1, got {eps}"));
    }
    Ok(1.0 + eps.ln().abs().powf(-0.5))
}

/// Adjusted time t_ε entering the upper hitting bounds for small balls:
/// t + ε² when d ≥ 3 and t·l(ε/√t) when d = 2.
pub fn bound_times(t: f64, eps: f64, dim: Dimension) -> Result<f64> {
    check_time(t)?;
    dim.require_at_least(2, "bound_times")?;
    if !(eps > 0.0) {
        return domain(format!("epsilon must be positive, got {eps}"));
    }
    let root = t.sqrt();
    if dim.get() >= 3 {
        if eps >= root {
            return domain(format!("need eps < sqrt(t) = {root}, got {eps}"));
        }
        Ok(t + eps * eps)
    } else {
        if eps >= 0.5 * root {
            return domain(format!("need eps < sqrt(t)/2 = {}, got {eps}", 0.5 * root));
        }
        Ok(t * planar_time_inflation(eps / root)?)
    }
}

/// ∫_{|x| > R} p_t(x) dx.
pub fn gaussian_tail_mass(radius: f64, t: f64, dim: Dimension) -> Result<f64> {
    check_time(t)?;
    if !(radius >= 0.0) {
        return domain("radius must be nonnegative");
    }
    if radius == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(0.5 * dim.get() as f64, radius * radius / (2.0 * t)))
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// E_μ ξ_t B for an axis-aligned box B = [lo, hi].
pub fn box_mass_expectation(mu: &DiscreteMeasure, lo: &[f64], hi: &[f64], t: f64) -> Result<f64> {
    check_time(t)?;
    check_point(mu.dim(), lo)?;
    check_point(mu.dim(), hi)?;
    let s = t.sqrt();
    Ok(mu
        .atoms()
        .map(|(u, w)| {
            w * u
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(c, (a, b))| (normal_cdf((b - c) / s) - normal_cdf((a - c) / s)).max(0.0))
                .product::<f64>()
        })
        .sum())
}

/// E_μ ξ_t B_c^r for an open ball, via the Poisson mixture form of the noncentral χ² law.
pub fn ball_mass_expectation(mu: &DiscreteMeasure, centre: &[f64], r: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    check_point(mu.dim(), centre)?;
    if !(r > 0.0) {
        return domain("ball radius must be positive");
    }
    let d = mu.dim().get() as f64;
    let x = r * r / t;
    Ok(mu
        .atoms()
        .map(|(u, w)| {
            let half_lambda = 0.5 * squared_distance(u, centre) / t;
            let mut total = 0.0;
            let mut log_weight = -half_lambda;
            let mut k = 0.0;
            loop {
                let term = log_weight.exp() * gamma_lr(0.5 * d + k, 0.5 * x);
                total += term;
                k += 1.0;
                if k > half_lambda && (term < 1e-17 || log_weight < -745.0) {
                    break;
                }
                log_weight += half_lambda.max(f64::MIN_POSITIVE).ln() - k.ln();
            }
            w * total.min(1.0)
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn d(n: usize) -> Dimension {
        Dimension::new(n).unwrap()
    }

    #[test]
    fn heat_kernel_values() {
        assert_relative_eq!(heat_kernel(&[0.0, 0.0], 1.0).unwrap().value, 0.159_154_943_1, epsilon = 1e-9);
        assert_relative_eq!(heat_kernel(&[1.0, 0.0], 1.0).unwrap().value, 0.096_532_352_6, epsilon = 1e-9);
        assert!(heat_kernel(&[0.0], 0.0).is_err());
        assert!(heat_kernel(&[0.0], -1.0).is_err());
    }

    #[test]
    fn heat_kernel_bounded_by_peak() {
        for &t in &[0.1, 1.0, 7.0] {
            let peak = (2.0 * PI * t).powf(-1.5);
            for &x in &[0.0, 0.3, 2.0] {
                let v = heat_kernel(&[x, -x, 0.5 * x], t).unwrap().value;
                assert!(v >= 0.0 && v <= peak);
            }
        }
    }

    #[test]
    fn mean_density_cases() {
        let origin = DiscreteMeasure::unit_at_origin(d(2));
        let one = mean_density(&origin, &[0.0, 0.0], 1.0).unwrap().value;
        assert_relative_eq!(one, 0.159_154_943_1, epsilon = 1e-9);
        let double = DiscreteMeasure::dirac(&[0.0, 0.0], 2.0).unwrap();
        assert_eq!(mean_density(&double, &[0.0, 0.0], 1.0).unwrap().value, 2.0 * one);
        let pair = DiscreteMeasure::from_atoms(d(2), [(&[0.0, 0.0][..], 1.0), (&[1.0, 0.0][..], 1.0)]).unwrap();
        let v = mean_density(&pair, &[0.5, 0.0], 1.0).unwrap().value;
        assert_relative_eq!(v, 2.0 * (-0.125f64).exp() / (2.0 * PI), epsilon = 1e-12);
        assert_relative_eq!(v, 0.280_908, epsilon = 1e-6);
        assert!(mean_density(&origin, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn covariance_density_is_symmetric_and_positive() {
        let mu = DiscreteMeasure::from_atoms(d(3), [(&[0.0, 0.0, 0.0][..], 1.0), (&[0.4, -0.2, 0.1][..], 0.5)]).unwrap();
        let a = [0.3, 0.1, -0.2];
        let b = [-0.5, 0.7, 0.0];
        let q1 = covariance_density(&mu, &a, &b, 1.3, 1e-10).unwrap().value;
        let q2 = covariance_density(&mu, &b, &a, 1.3, 1e-10).unwrap().value;
        assert!(q1 > 0.0);
        assert_relative_eq!(q1, q2, max_relative = 1e-12);
    }

    #[test]
    fn covariance_density_diagonal_is_singular_for_d_at_least_two() {
        let mu = DiscreteMeasure::unit_at_origin(d(2));
        assert_eq!(covariance_density(&mu, &[0.1, 0.0], &[0.1, 0.0], 1.0, 1e-8), Err(Error::Singular(2)));
        let line = DiscreteMeasure::unit_at_origin(d(1));
        let q = covariance_density(&line, &[0.2], &[0.2], 1.0, 1e-10).unwrap().value;
        assert!(q.is_finite() && q > 0.0);
    }

    /// Direct (1 + d)-dimensional quadrature of
    /// q_t(x1, x2) = 2 ∫_0^t ds ∫ p_s(u) p_{t-s}(x1 - u) p_{t-s}(x2 - u) du, d = 2,
    /// using u = √s z so that the p_s factor becomes a standard normal weight.
    fn q_direct_planar(x1: [f64; 2], x2: [f64; 2], t: f64) -> f64 {
        let tol = Tolerance::relative(1e-9);
        let outer = integrate(
            |s: f64| {
                let root = s.sqrt();
                let z1 = integrate(
                    |za: f64| {
                        integrate(
                            |zb: f64| {
                                let u = [root * za, root * zb];
                                let phi = gauss(za * za + zb * zb, 1.0, 2);
                                phi * gauss(squared_distance(&x1, &u), t - s, 2)
                                    * gauss(squared_distance(&x2, &u), t - s, 2)
                            },
                            -9.0,
                            9.0,
                            tol,
                        )
                        .unwrap()
                        .value
                    },
                    -9.0,
                    9.0,
                    tol,
                )
                .unwrap()
                .value;
                z1
            },
            0.0,
            t,
            Tolerance::relative(1e-8),
        )
        .unwrap()
        .value;
        2.0 * outer
    }

    #[test]
    fn one_dimensional_reduction_matches_direct_quadrature() {
        let x1 = [0.3, -0.1];
        let x2 = [-0.4, 0.5];
        let direct = q_direct_planar(x1, x2, 1.0);
        let mu = DiscreteMeasure::unit_at_origin(d(2));
        let reduced = covariance_density(&mu, &x1, &x2, 1.0, 1e-10).unwrap().value;
        assert_relative_eq!(reduced, direct, max_relative = 1e-6);
    }

    #[test]
    fn covariance_total_integral_is_two_t() {
        for &(dim, t) in &[(1usize, 1.0), (2, 0.5), (3, 1.0)] {
            let total = covariance_total_integral(t, d(dim), 1e-8).unwrap();
            assert!((total - 2.0 * t).abs() < 1e-6, "d={dim} t={t} total={total}");
        }
    }

    #[test]
    fn planar_covariance_grows_like_log() {
        // q_1((r,0),(-r,0)) / |log r| settles as r -> 0; successive differences shrink.
        let mu = DiscreteMeasure::unit_at_origin(d(2));
        let ratio = |r: f64| covariance_density(&mu, &[r, 0.0], &[-r, 0.0], 1.0, 1e-10).unwrap().value / r.ln().abs();
        let r2 = ratio(1e-2);
        let r3 = ratio(1e-3);
        let r4 = ratio(1e-4);
        assert!((r4 - r3).abs() < (r3 - r2).abs());
        // The limit constant is a bounded multiple of p_1(0).
        let p = 1.0 / (2.0 * PI);
        assert!(r4 / p > 0.1 && r4 / p < 10.0);
    }

    #[test]
    fn laplace_transform_values() {
        assert_eq!(total_mass_laplace(0.0, 1.0, 3.0).unwrap(), 1.0);
        assert_relative_eq!(total_mass_laplace(1.0, 1.0, 1.0).unwrap(), 0.606_530_659_7, epsilon = 1e-9);
        assert_relative_eq!(
            total_mass_laplace(1e12, 2.0, 1.5).unwrap(),
            extinction_probability(1.5, 2.0).unwrap(),
            max_relative = 1e-9
        );
        assert!(total_mass_laplace(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn laplace_transform_matches_riccati_integration() {
        // v' = -v², v(0) = θ integrated with RK4.
        let theta = 1.0;
        let steps = 10_000;
        let h = 1.0 / steps as f64;
        let mut v: f64 = theta;
        for _ in 0..steps {
            let f = |v: f64| -v * v;
            let k1 = f(v);
            let k2 = f(v + 0.5 * h * k1);
            let k3 = f(v + 0.5 * h * k2);
            let k4 = f(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert_relative_eq!((-v).exp(), total_mass_laplace(theta, 1.0, 1.0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn laplace_transform_monotonicity() {
        let mut prev = 1.0;
        for k in 1..20 {
            let v = total_mass_laplace(0.5 * k as f64, 1.0, 2.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
        let mut prev = 0.0;
        for k in 1..20 {
            let v = total_mass_laplace(1.0, 0.5 * k as f64, 2.0).unwrap();
            assert!(v > prev && v < 1.0);
            prev = v;
        }
    }

    #[test]
    fn extinction_values() {
        assert_relative_eq!(extinction_probability(1.0, 1.0).unwrap(), 0.367_879_441, epsilon = 1e-9);
        assert_relative_eq!(extinction_probability(2.0, 1.0).unwrap(), 0.135_335_283, epsilon = 1e-9);
        assert!(extinction_probability(1.0, 1e9).unwrap() > 0.999_999);
    }

    #[test]
    fn bound_times_cases() {
        assert_relative_eq!(bound_times(1.0, 0.1, d(3)).unwrap(), 1.01, epsilon = 1e-15);
        assert!(bound_times(1.0, 1.0, d(3)).is_err());
        assert!(bound_times(1.0, 0.5, d(2)).is_err());
        assert!(bound_times(1.0, 0.1, d(1)).is_err());
        let eps: f64 = 1e-4;
        let l = planar_time_inflation(eps).unwrap();
        assert!(l - 1.0 >= 0.0 && l - 1.0 <= eps.ln().abs().powf(-0.5) + 1e-15);
        assert!(bound_times(2.0, 1e-300, d(2)).unwrap() - 2.0 < 0.2);
        assert!(bound_times(2.0, 1e-9, d(3)).unwrap() - 2.0 < 1e-15);
    }

    #[test]
    fn gaussian_tail_planar_closed_form() {
        assert_relative_eq!(gaussian_tail_mass(6.0, 2.0, d(2)).unwrap(), (-9.0f64).exp(), max_relative = 1e-10);
        assert_relative_eq!(gaussian_tail_mass(6.0, 2.0, d(2)).unwrap(), 1.234e-4, max_relative = 1e-3);
    }

    #[test]
    fn box_and_ball_expectations() {
        let mu = DiscreteMeasure::unit_at_origin(d(2));
        let boxed = box_mass_expectation(&mu, &[-1.0, -1.0], &[1.0, 1.0], 1.0).unwrap();
        assert_relative_eq!(boxed, 0.682_689_492_137_086f64.powi(2), epsilon = 1e-9);
        // Centred planar ball: 1 - exp(-r²/2t).
        let ball = ball_mass_expectation(&mu, &[0.0, 0.0], 0.7, 1.3).unwrap();
        assert_relative_eq!(ball, 1.0 - (-0.49f64 / 2.6).exp(), epsilon = 1e-12);
        // Off-centre ball against quadrature.
        let c = [0.8, -0.3];
        let r = 0.5;
        let q = integrate(
            |x: f64| {
                let half = (r * r - (x - c[0]).powi(2)).max(0.0).sqrt();
                integrate(|y| gauss(x * x + y * y, 1.0, 2), c[1] - half, c[1] + half, Tolerance::relative(1e-12))
                    .unwrap()
                    .value
            },
            c[0] - r,
            c[0] + r,
            Tolerance::relative(1e-10),
        )
        .unwrap()
        .value;
        assert_relative_eq!(ball_mass_expectation(&mu, &c, r, 1.0).unwrap(), q, max_relative = 1e-7);
    }

    #[test]
    fn sphere_constants() {
        assert_relative_eq!(sphere_area(2), 2.0 * PI, epsilon = 1e-12);
        assert_relative_eq!(sphere_area(3), 4.0 * PI, epsilon = 1e-12);
        assert_relative_eq!(ball_volume(3), 4.0 * PI / 3.0, epsilon = 1e-12);
        assert_relative_eq!(sphere_area(1), 2.0, epsilon = 1e-12);
    }
}
