//! Confidence intervals, two-sample tests and trend fits.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithCI {
    pub mean: f64,
    pub stderr: f64,
    pub n_reps: usize,
    pub lower: f64,
    pub upper: f64,
    pub tag: String,
}

impl EstimateWithCI {
    pub fn new(mean: f64, stderr: f64, n_reps: usize, tag: impl Into<String>) -> Self {
        Self {
            mean,
            stderr,
            n_reps,
            lower: mean - Z95 * stderr,
            upper: mean + Z95 * stderr,
            tag: tag.into(),
        }
    }

    /// Number of standard errors between this estimate and `target`.
    pub fn z_against(&self, target: f64) -> f64 {
        z_score(self.mean, self.stderr, target, 0.0)
    }

    pub fn relative_stderr(&self) -> f64 {
        self.stderr / self.mean.abs()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            mean: c * self.mean,
            stderr: c.abs() * self.stderr,
            n_reps: self.n_reps,
            lower: if c >= 0.0 { c * self.lower } else { c * self.upper },
            upper: if c >= 0.0 { c * self.upper } else { c * self.lower },
            tag: self.tag.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub method: String,
    /// Mean and standard deviation of the permutation null, when one was run.
    pub null_mean: Option<f64>,
    pub null_sd: Option<f64>,
}

/// (a - b) / sqrt(se_a² + se_b²); zero when both errors vanish and a = b.
pub fn z_score(a: f64, se_a: f64, b: f64, se_b: f64) -> f64 {
    let s = (se_a * se_a + se_b * se_b).sqrt();
    if s == 0.0 {
        if a == b {
            0.0
        } else {
            f64::INFINITY.copysign(a - b)
        }
    } else {
        (a - b) / s
    }
}

fn insufficient<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InsufficientData(msg.into()))
}

/// Sample mean with stderr = sd/√n.
pub fn mean_ci(samples: &[f64]) -> Result<EstimateWithCI> {
    let n = samples.len();
    if n < 2 {
        return insufficient(format!("mean_ci needs at least 2 samples, got {n}"));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(EstimateWithCI::new(mean, (var / n as f64).sqrt(), n, "mean"))
}

/// Unbiased sample variance with a standard error from the fourth central moment.
pub fn variance_ci(samples: &[f64]) -> Result<EstimateWithCI> {
    let n = samples.len();
    if n < 4 {
        return insufficient(format!("variance_ci needs at least 4 samples, got {n}"));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let var = m2 * nf / (nf - 1.0);
    let se = ((m4 - m2 * m2 * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0).sqrt();
    Ok(EstimateWithCI::new(var, se, n, "variance"))
}

/// Wilson 95% score interval; `stderr` is the binomial √(p(1-p)/n).
pub fn proportion_ci(hits: u64, n: u64) -> Result<EstimateWithCI> {
    if n == 0 {
        return insufficient("proportion_ci needs n >= 1");
    }
    if hits > n {
        return Err(Error::Domain(format!("hits {hits} exceed trials {n}")));
    }
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Ok(EstimateWithCI {
        mean: p,
        stderr: (p * (1.0 - p) / nf).sqrt(),
        n_reps: n as usize,
        lower: if hits == 0 { 0.0 } else { (centre - half).max(0.0) },
        upper: if hits == n { 1.0 } else { (centre + half).min(1.0) },
        tag: "wilson".into(),
    })
}

/// Asymptotic Kolmogorov tail P(K > λ) = 2 Σ (-1)^{k-1} exp(-2k²λ²).
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Domain("NaN in sample".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestReport> {
    if a.len() < 20 || b.len() < 20 {
        return insufficient(format!("KS needs at least 20 per arm, got {} and {}", a.len(), b.len()));
    }
    let xa = sorted(a)?;
    let xb = sorted(b)?;
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = xa[i].min(xb[j]);
        while i < na && xa[i] <= x {
            i += 1;
        }
        while j < nb && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let root = ne.sqrt();
    Ok(TestReport {
        statistic: d,
        p_value: kolmogorov_tail((root + 0.12 + 0.11 / root) * d),
        n_a: na,
        n_b: nb,
        method: "ks-two-sample".into(),
        null_mean: None,
        null_sd: None,
    })
}

/// One-sample KS statistic and asymptotic p-value against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(a: &[f64], cdf: F) -> Result<TestReport> {
    if a.len() < 20 {
        return insufficient(format!("KS needs at least 20 samples, got {}", a.len()));
    }
    let x = sorted(a)?;
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    let root = n.sqrt();
    Ok(TestReport {
        statistic: d,
        p_value: kolmogorov_tail((root + 0.12 + 0.11 / root) * d),
        n_a: x.len(),
        n_b: 0,
        method: "ks-one-sample".into(),
        null_mean: None,
        null_sd: None,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy-distance V-statistic 2E|X-Y| - E|X-X'| - E|Y-Y'| for labels over a
/// pooled distance matrix; `first` marks membership of the first arm.
fn energy_from_matrix(dist: &[f32], m: usize, first: &[bool], na: usize) -> f64 {
    let nb = m - na;
    let (mut sab, mut saa, mut sbb) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..m {
        let row = &dist[i * m..(i + 1) * m];
        let (mut ra, mut rb) = (0.0f64, 0.0f64);
        for (j, &v) in row.iter().enumerate() {
            if first[j] {
                ra += v as f64;
            } else {
                rb += v as f64;
            }
        }
        if first[i] {
            saa += ra;
            sab += rb;
        } else {
            sbb += rb;
        }
    }
    let (na, nb) = (na as f64, nb as f64);
    2.0 * sab / (na * nb) - saa / (na * na) - sbb / (nb * nb)
}

/// Energy distance between two multivariate samples with a permutation p-value.
///
/// Permutations use independent streams derived from `seed`, so the report is
/// identical for any thread count.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>], n_permutations: usize, seed: u64) -> Result<TestReport> {
    if a.len() < 20 || b.len() < 20 {
        return insufficient(format!("energy distance needs at least 20 per arm, got {} and {}", a.len(), b.len()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Domain("all vectors must share one length".into()));
    }
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(|v| v.as_slice()).collect();
    let m = pooled.len();
    let dist: Vec<f32> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pooled = &pooled;
            (0..m).map(move |j| euclid(pooled[i], pooled[j]) as f32)
        })
        .collect();
    let na = a.len();
    let labels: Vec<bool> = (0..m).map(|i| i < na).collect();
    let observed = energy_from_matrix(&dist, m, &labels, na);

    let null: Vec<f64> = (0..n_permutations as u64)
        .into_par_iter()
        .map(|k| {
            let mut l = labels.clone();
            l.shuffle(&mut stream(seed, k));
            energy_from_matrix(&dist, m, &l, na)
        })
        .collect();
    let (p_value, null_mean, null_sd) = if null.is_empty() {
        (1.0, None, None)
    } else {
        let exceed = null.iter().filter(|&&x| x >= observed).count();
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (null.len().max(2) - 1) as f64).sqrt();
        ((1 + exceed) as f64 / (1 + null.len()) as f64, Some(mean), Some(sd))
    };
    Ok(TestReport {
        statistic: observed,
        p_value,
        n_a: na,
        n_b: b.len(),
        method: "energy-permutation".into(),
        null_mean,
        null_sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub n: usize,
}

impl LineFit {
    /// Two-sided t-test p-value for slope = 0.
    pub fn slope_p_value(&self) -> f64 {
        if self.n <= 2 || self.stderr == 0.0 {
            return if self.slope == 0.0 { 1.0 } else { 0.0 };
        }
        let t = StudentsT::new(0.0, 1.0, (self.n - 2) as f64).expect("positive degrees of freedom");
        2.0 * (1.0 - t.cdf((self.slope / self.stderr).abs()))
    }
}

/// Weighted least squares y = a + b x with weights 1/σ². With `sigma = None`
/// the residual variance sets the slope error (ordinary least squares);
/// with known σ the slope error is the model-based one.
pub fn line_fit(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || sigma.is_some_and(|s| s.len() != n) {
        return Err(Error::Domain("line_fit inputs differ in length".into()));
    }
    if n < 2 || (sigma.is_none() && n < 3) {
        return insufficient(format!("line_fit needs more points, got {n}"));
    }
    let w: Vec<f64> = match sigma {
        Some(s) => {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Domain("line_fit sigmas must be positive".into()));
            }
            s.iter().map(|v| 1.0 / (v * v)).collect()
        }
        None => vec![1.0; n],
    };
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("line_fit needs distinct x values".into()));
    }
    let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - mx) * (y[i] - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = match sigma {
        Some(_) => (1.0 / sxx).sqrt(),
        None => {
            let rss: f64 = (0..n).map(|i| (y[i] - intercept - slope * x[i]).powi(2)).sum();
            (rss / (n - 2) as f64 / sxx).sqrt()
        }
    };
    Ok(LineFit {
        slope,
        stderr,
        intercept,
        n,
    })
}

/// Least-squares slope of log(error) against log(ε).
pub fn loglog_rate_fit(pairs: &[(f64, f64)]) -> Result<LineFit> {
    if pairs.len() < 3 {
        return insufficient(format!("rate fit needs at least 3 pairs, got {}", pairs.len()));
    }
    if pairs.iter().any(|&(e, v)| !(e > 0.0 && v > 0.0)) {
        return Err(Error::Domain("rate fit needs positive epsilon and error values".into()));
    }
    let x: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    line_fit(&x, &y, None)
}

/// Inverse-variance weighted mean of independent estimates.
pub fn inverse_variance_mean(estimates: &[EstimateWithCI]) -> Result<EstimateWithCI> {
    if estimates.is_empty() {
        return insufficient("no estimates to combine");
    }
    if estimates.iter().any(|e| !(e.stderr > 0.0)) {
        return Err(Error::Domain("combined estimates need positive standard errors".into()));
    }
    let w: Vec<f64> = estimates.iter().map(|e| 1.0 / (e.stderr * e.stderr)).collect();
    let sw: f64 = w.iter().sum();
    let mean = estimates.iter().zip(&w).map(|(e, w)| w * e.mean).sum::<f64>() / sw;
    let n = estimates.iter().map(|e| e.n_reps).sum();
    Ok(EstimateWithCI::new(mean, (1.0 / sw).sqrt(), n, "inverse-variance"))
}

/// Median of a nonempty sample.
pub fn median(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return insufficient("median of empty sample");
    }
    let s = sorted(v)?;
    let n = s.len();
    Ok(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_ci_cases() {
        let c = mean_ci(&[3.0; 10]).unwrap();
        assert_eq!((c.mean, c.stderr), (3.0, 0.0));
        let alt: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let e = mean_ci(&alt).unwrap();
        assert_eq!(e.mean, 0.5);
        // sd = sqrt(25/99), se = sd/10
        assert_relative_eq!(e.stderr, 0.050_251_890_762_960_6, epsilon = 1e-12);
        let scaled: Vec<f64> = alt.iter().map(|x| -3.0 * x).collect();
        let s = mean_ci(&scaled).unwrap();
        assert_relative_eq!(s.mean, -1.5, epsilon = 1e-12);
        assert_relative_eq!(s.stderr, 3.0 * e.stderr, epsilon = 1e-12);
        assert!(mean_ci(&[1.0]).is_err());
    }

    #[test]
    fn wilson_interval() {
        let w = proportion_ci(50, 100).unwrap();
        assert_relative_eq!(w.lower, 0.403_831_7, epsilon = 1e-6);
        assert_relative_eq!(w.upper, 0.596_168_3, epsilon = 1e-6);
        assert_eq!(proportion_ci(0, 30).unwrap().lower, 0.0);
        assert_eq!(proportion_ci(30, 30).unwrap().upper, 1.0);
        assert!(proportion_ci(3, 2).is_err());
        assert!(proportion_ci(0, 0).is_err());
    }

    #[test]
    fn variance_of_alternating_sample() {
        let alt: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let v = variance_ci(&alt).unwrap();
        assert_relative_eq!(v.mean, 25.0 / 99.0, epsilon = 1e-12);
        assert!(v.stderr >= 0.0 && v.stderr < 0.01);
    }

    #[test]
    fn ks_extremes() {
        let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let same = ks_two_sample(&a, &a).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
        let b: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        let apart = ks_two_sample(&a, &b).unwrap();
        assert_eq!(apart.statistic, 1.0);
        assert!(apart.p_value < 1e-10);
        assert!(ks_two_sample(&a[..10], &b).is_err());
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        // Critical values of the Kolmogorov distribution.
        assert_relative_eq!(kolmogorov_tail(1.358_099), 0.05, epsilon = 1e-5);
        assert_relative_eq!(kolmogorov_tail(1.627_624), 0.01, epsilon = 1e-5);
    }

    #[test]
    fn ks_one_sample_uniform_grid() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let r = ks_one_sample(&x, |v| v.clamp(0.0, 1.0)).unwrap();
        assert_relative_eq!(r.statistic, 0.005, epsilon = 1e-12);
    }

    #[test]
    fn energy_identical_and_separated() {
        let a: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, 0.0]).collect();
        let same = energy_distance(&a, &a, 50, 1).unwrap();
        assert!(same.statistic.abs() < 1e-9);
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 1000.0, 0.0]).collect();
        let far = energy_distance(&a, &b, 99, 1).unwrap();
        assert!(far.p_value <= 0.01 + 1e-12);
        assert_eq!(energy_distance(&a, &b, 99, 1).unwrap(), far);
    }

    #[test]
    fn rate_fit_exact_powers() {
        let eps = [0.4, 0.2, 0.1, 0.05];
        let one: Vec<_> = eps.iter().map(|&e| (e, e)).collect();
        assert_relative_eq!(loglog_rate_fit(&one).unwrap().slope, 1.0, epsilon = 1e-12);
        let two: Vec<_> = eps.iter().map(|&e| (e, 3.0 * e * e)).collect();
        assert_relative_eq!(loglog_rate_fit(&two).unwrap().slope, 2.0, epsilon = 1e-12);
        assert!(loglog_rate_fit(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
        assert!(loglog_rate_fit(&one[..2]).is_err());
    }

    #[test]
    fn inverse_variance_weights() {
        let a = EstimateWithCI::new(1.0, 1.0, 10, "a");
        let b = EstimateWithCI::new(3.0, 1.0, 10, "b");
        let c = inverse_variance_mean(&[a, b]).unwrap();
        assert_relative_eq!(c.mean, 2.0);
        assert_relative_eq!(c.stderr, 0.5f64.sqrt());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }
}
