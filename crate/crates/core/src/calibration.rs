//! Seeded calibration runs for the statistical machinery.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::measure::{Dimension, DiscreteMeasure};
use crate::rng::{derive_seed, replicate, stream};
use crate::simulate::{simulate_dw, SimConfig};
use crate::stats::{energy_distance, ks_one_sample, ks_two_sample, loglog_rate_fit, proportion_ci};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CalibrationCheck {
    CalibrationCheck {
        name: name.into(),
        passed,
        detail,
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Two standard-normal arms of size 500: KS p > 0.01 in at least 98 of 100 runs.
pub fn ks_null_calibration(seed: u64) -> Result<CalibrationCheck> {
    let p = replicate(seed, 100, |_, rng| {
        let a = normals(rng, 500);
        let b = normals(rng, 500);
        Ok(ks_two_sample(&a, &b)?.p_value)
    })?;
    let ok = p.iter().filter(|&&v| v > 0.01).count();
    Ok(check("ks-null", ok >= 98, format!("{ok}/100 runs with p > 0.01")))
}

/// Two bivariate standard-normal arms of size 100 with 199 permutations.
/// The permutation p-value is exactly uniform under the null, so the p-values
/// must pass a uniformity KS test and at most 5 of 100 may fall at or below
/// 0.01 (Binomial(100, 0.01) exceeds 5 with probability 5e-4).
pub fn energy_null_calibration(seed: u64) -> Result<CalibrationCheck> {
    let p = replicate(seed, 100, |i, rng| {
        let mut draw = |n| (0..n).map(|_| normals(rng, 2)).collect::<Vec<_>>();
        let a = draw(100);
        let b = draw(100);
        Ok(energy_distance(&a, &b, 199, derive_seed(seed, i))?.p_value)
    })?;
    let ok = p.iter().filter(|&&v| v > 0.01).count();
    let uniform = ks_one_sample(&p, |x| x.clamp(0.0, 1.0))?;
    Ok(check(
        "energy-null",
        ok >= 95 && uniform.p_value > 0.01,
        format!("{ok}/100 runs with p > 0.01; uniformity KS p = {:.4}", uniform.p_value),
    ))
}

/// A one-unit location shift between arms of size 100 must be detected.
pub fn energy_power_check(seed: u64) -> Result<CalibrationCheck> {
    let mut rng = stream(seed, 0);
    let a: Vec<Vec<f64>> = (0..100).map(|_| normals(&mut rng, 2)).collect();
    let b: Vec<Vec<f64>> = (0..100).map(|_| normals(&mut rng, 2).iter().map(|x| x + 1.0).collect()).collect();
    let r = energy_distance(&a, &b, 199, derive_seed(seed, 1))?;
    Ok(check("energy-power", r.p_value <= 0.01, format!("shifted arms p = {:.4}", r.p_value)))
}

/// Wilson coverage of the survival probability: 200 meta-replications of 100
/// simulated DW runs (d = 2, N = 1000, t = 1, μ = δ_0). The exact survival
/// probability of the particle system is 1 - exp(-N/(N+1)).
pub fn wilson_coverage_calibration(seed: u64) -> Result<CalibrationCheck> {
    let dim = Dimension::new(2)?;
    let cfg = SimConfig::new(dim, 1000, seed)?;
    let mu = DiscreteMeasure::unit_at_origin(dim);
    let n = cfg.mass_scale as f64;
    let truth = 1.0 - (-n / (n + 1.0)).exp();
    let alive = replicate(seed, 200 * 100, |_, rng| Ok(!simulate_dw(&mu, 1.0, &cfg, rng)?.is_empty()))?;
    let mut covered = 0;
    for chunk in alive.chunks(100) {
        let ci = proportion_ci(chunk.iter().filter(|&&b| b).count() as u64, 100)?;
        if ci.lower <= truth && truth <= ci.upper {
            covered += 1;
        }
    }
    // Binomial(200, 0.95): mean 190, sd 3.08.
    let ok = (181..=199).contains(&covered);
    Ok(check("wilson-coverage", ok, format!("{covered}/200 intervals cover {truth:.6}")))
}

/// Log-log slope of error = ε·exp(0.1 Z) over 8 ε values lies in [0.7, 1.3].
pub fn rate_fit_calibration(seed: u64) -> Result<CalibrationCheck> {
    let mut rng = stream(seed, 0);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let pairs: Vec<(f64, f64)> = (0..8)
        .map(|k| {
            let e = 0.5f64.powi(k);
            let z: f64 = noise.sample(&mut rng);
            (e, e * z.exp())
        })
        .collect();
    let fit = loglog_rate_fit(&pairs)?;
    Ok(check(
        "rate-fit",
        (0.7..=1.3).contains(&fit.slope),
        format!("slope {:.4} ± {:.4}", fit.slope, fit.stderr),
    ))
}

/// Runs every calibration check with seeds derived from `seed`.
pub fn calibration_suite(seed: u64) -> Result<Vec<CalibrationCheck>> {
    Ok(vec![
        ks_null_calibration(derive_seed(seed, 1))?,
        energy_null_calibration(derive_seed(seed, 2))?,
        energy_power_check(derive_seed(seed, 3))?,
        wilson_coverage_calibration(derive_seed(seed, 4))?,
        rate_fit_calibration(derive_seed(seed, 5))?,
    ])
}
