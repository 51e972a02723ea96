//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are expected to fail at desk scale and
//! do not fail the process; their lines still read FAIL. Any other failure, or
//! a known failure that starts passing, makes the process exit nonzero.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dwsim::calibration::calibration_suite;
use dwsim::estimators::*;
use dwsim::geometry::Window;
use dwsim::kernels::{box_mass_expectation, covariance_total_integral};
use dwsim::rng::{derive_seed, replicate};
use dwsim::simulate::{poisson_forest, sample_cluster, simulate_dw, superpose};
use dwsim::stats::{ks_one_sample, ks_two_sample, line_fit, mean_ci, proportion_ci, variance_ci, z_score};
use dwsim::{Dimension, DiscreteMeasure, EstimateWithCI, Result, SimConfig};

const SEED: u64 = 20_261_015;
const KNOWN_FAILURES: [u32; 2] = [8, 11];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn dim(d: usize) -> Dimension {
    Dimension::new(d).expect("valid dimension")
}

fn config(d: usize, n: u64, label: u64) -> Result<SimConfig> {
    SimConfig::new(dim(d), n, derive_seed(SEED, label))
}

fn c1() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for d in [2, 3] {
        for t in [0.5, 1.0] {
            let v = covariance_total_integral(t, dim(d), 1e-6)?;
            worst = worst.max((v - 2.0 * t).abs());
        }
    }
    verdict(worst < 1e-6, format!("max |∫∫q_t - 2t| = {worst:.2e} over d in {{2,3}}, t in {{0.5,1}}"))
}

struct PlanarBatch {
    box_mass: Vec<f64>,
    total: Vec<f64>,
}

fn planar_batch() -> Result<PlanarBatch> {
    let cfg = config(2, 1000, 2)?;
    let mu = DiscreteMeasure::unit_at_origin(cfg.dim);
    let v = replicate(cfg.seed, 2000, |_, rng| {
        let s = simulate_dw(&mu, 1.0, &cfg, rng)?;
        let inside = s.points().filter(|x| x.iter().all(|c| c.abs() <= 1.0)).count() as f64 * s.particle_mass;
        Ok((inside, s.total_mass()))
    })?;
    let (box_mass, total) = v.into_iter().unzip();
    Ok(PlanarBatch { box_mass, total })
}

fn c2(b: &PlanarBatch) -> Result<Verdict> {
    let mu = DiscreteMeasure::unit_at_origin(dim(2));
    let target = box_mass_expectation(&mu, &[-1.0, -1.0], &[1.0, 1.0], 1.0)?;
    let est = mean_ci(&b.box_mass)?;
    let z = est.z_against(target);
    verdict(z.abs() < 3.0, format!("mean box mass {:.4} ± {:.4} vs {target:.6}, z = {z:.2}", est.mean, est.stderr))
}

fn c3(b: &PlanarBatch) -> Result<Verdict> {
    let v = variance_ci(&b.total)?;
    let z = v.z_against(2.0);
    verdict(z.abs() < 3.0, format!("Var total mass {:.4} ± {:.4} vs 2, z = {z:.2}", v.mean, v.stderr))
}

fn c4(b: &PlanarBatch) -> Result<Verdict> {
    let lap: Vec<f64> = b.total.iter().map(|m| (-m).exp()).collect();
    let l = mean_ci(&lap)?;
    let zl = l.z_against((-0.5f64).exp());
    let dead = b.total.iter().filter(|&&m| m == 0.0).count() as u64;
    let p = proportion_ci(dead, b.total.len() as u64)?;
    let zp = p.z_against((-1.0f64).exp());
    verdict(
        zl.abs() < 3.0 && zp.abs() < 3.0,
        format!("E e^-|ξ| = {:.4} (z = {zl:.2}); extinction {:.4} (z = {zp:.2})", l.mean, p.mean),
    )
}

fn c5() -> Result<Verdict> {
    let cfg = config(2, 1000, 5)?;
    let m = replicate(cfg.seed, 2000, |_, rng| Ok(sample_cluster(&[0.0, 0.0], 1.0, &cfg, rng)?.particles.total_mass()))?;
    let ks = ks_one_sample(&m, |x| 1.0 - (-x).exp())?;
    let mean = mean_ci(&m)?;
    let z = mean.z_against(1.0);
    verdict(
        ks.statistic < 0.05 && z.abs() < 3.0,
        format!("KS D = {:.4} (p = {:.3}); mean {:.4} ± {:.4}, z = {z:.2}", ks.statistic, ks.p_value, mean.mean, mean.stderr),
    )
}

fn c6() -> Result<Verdict> {
    let cfg = config(3, 1000, 6)?;
    let mu = DiscreteMeasure::unit_at_origin(cfg.dim);
    let direct = replicate(derive_seed(cfg.seed, 1), 2000, |_, rng| Ok(simulate_dw(&mu, 1.0, &cfg, rng)?.total_mass()))?;
    let forest = replicate(derive_seed(cfg.seed, 2), 2000, |_, rng| {
        let c = poisson_forest(&mu, 1.0, &cfg, rng)?;
        Ok(superpose(cfg.dim, &c, cfg.particle_mass(), 1.0).total_mass())
    })?;
    let ks = ks_two_sample(&forest, &direct)?;
    let zero = [0.0; 3];
    let a = hit_probability(&mu, 1.0, &zero, 0.1, &cfg.clone().with_seed(derive_seed(cfg.seed, 3)), 20000, HitMode::Direct)?;
    let b = hit_probability(&mu, 1.0, &zero, 0.1, &cfg.clone().with_seed(derive_seed(cfg.seed, 4)), 20000, HitMode::Cluster)?;
    let (pa, pb) = (&a.probability, &b.probability);
    let z = z_score(pa.mean, pa.stderr, pb.mean, pb.stderr);
    verdict(
        ks.p_value > 0.01 && z.abs() < 3.0,
        format!("forest KS p = {:.3}; direct {:.4} vs converted {:.4}, z = {z:.2}", ks.p_value, pa.mean, pb.mean),
    )
}

fn c7() -> Result<(Verdict, EstimateWithCI)> {
    let cfg = config(3, 16000, 7)?;
    let mu = DiscreteMeasure::unit_at_origin(cfg.dim);
    let mut design = Vec::new();
    for t in [1.0, 2.0] {
        for x in [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]] {
            for eps in [0.2, 0.1] {
                design.push(DesignPoint { mu: mu.clone(), t, x: x.to_vec(), eps });
            }
        }
    }
    let cd = estimate_cd(&design, &cfg, 5000)?;
    let rel = cd.c_hat.relative_stderr();
    let v = Verdict {
        passed: cd.max_abs_z < 3.0 && cd.c_hat.mean > 0.0 && rel < 0.15,
        detail: format!(
            "max pairwise |z| = {:.2} over {} pairs; ĉ_3 = {:.3} ± {:.3} (rel {:.1}%)",
            cd.max_abs_z,
            cd.pairwise.len(),
            cd.c_hat.mean,
            cd.c_hat.stderr,
            100.0 * rel
        ),
    };
    Ok((v, cd.c_hat))
}

fn c8() -> Result<Verdict> {
    let cfg = config(2, 100_000, 8)?;
    let table = m_table(&[0.05, 0.02, 0.01], 4.0, &cfg, 2000, 200)?;
    let ms: Vec<f64> = table.rows.iter().map(|r| r.m.mean).collect();
    let band = ms.iter().cloned().fold(f64::MIN, f64::max) / ms.iter().cloned().fold(f64::MAX, f64::min);
    let mu = DiscreteMeasure::unit_at_origin(cfg.dim);
    let cross = planar_cross_check(&mu, 1.0, &table, &cfg.clone().with_seed(derive_seed(cfg.seed, 1)), 5000)?;
    let zs: Vec<String> = cross.iter().map(|r| format!("{:.4}±{:.4} (z {:.1})", r.normalized.mean, r.normalized.stderr, r.z)).collect();
    let ok = band < 3.0 && cross.iter().all(|r| r.z.abs() < 3.0);
    verdict(
        ok,
        format!("m̂ = {ms:.3?}, band {band:.2}; |log ε|P̂/m̂ = [{}] vs 1/(2π) = {:.4}", zs.join(", "), 1.0 / (2.0 * PI)),
    )
}

fn c9(c_hat: &EstimateWithCI) -> Result<Verdict> {
    let cfg = config(3, 16000, 9)?;
    let mu = DiscreteMeasure::unit_at_origin(cfg.dim);
    let norm = Normalizer::HighDim { c_hat: c_hat.clone() };
    let support = Window::cube(cfg.dim, 1.0)?;
    let rows = lebesgue_experiment(&mu, 1.0, &[0.3, 0.2, 0.12], &support, &norm, &cfg, 1500, Some(0.25))?;
    let z_ok = rows.iter().all(|r| r.z.abs() < 3.0);
    let guard_ok = rows.iter().all(|r| r.trusted_fraction >= 0.95);
    let med: Vec<f64> = rows.iter().map(|r| r.median_relative_error).collect();
    let decreasing = med.windows(2).all(|w| w[1] < w[0]);
    let desc: Vec<String> = rows
        .iter()
        .map(|r| format!("ε={}: {:.4}±{:.4} (z {:.2}, med {:.3}, guard {:.2})", r.eps, r.mean.mean, r.mean.stderr, r.z, r.median_relative_error, r.trusted_fraction))
        .collect();
    verdict(z_ok && guard_ok && decreasing, format!("target {:.4}; {}", rows[0].target, desc.join("; ")))
}

fn c10() -> Result<Verdict> {
    let cfg = config(2, 1000, 10)?;
    let mu = DiscreteMeasure::unit_at_origin(cfg.dim);
    let rep = scaling_check(&mu, 1.0, 0.5, &cfg, 2000, 199)?;
    verdict(
        rep.ks_total_mass.p_value > 0.01,
        format!(
            "KS p = {:.3}; energy p = {:.3}; B_0^1 mass {:.4} vs {:.4} (oracle {:.4})",
            rep.ks_total_mass.p_value, rep.energy.p_value, rep.ball_mass_rescaled.mean, rep.ball_mass_direct.mean, rep.ball_mass_oracle
        ),
    )
}

fn c11() -> Result<Verdict> {
    let grid = [0.2, 0.1, 0.05];
    let cfg2 = config(2, 100_000, 11)?;
    let mu2 = DiscreteMeasure::unit_at_origin(cfg2.dim);
    let prof = palm_local_profile(&mu2, 1.0, &grid, &[0.0, 0.5f64.sqrt(), 1.0], &cfg2, 2000, 20)?;
    let inner: Vec<&EstimateWithCI> = prof.iter().map(|p| &p.annuli[0].normalized_mass).collect();
    let closer = inner.windows(2).all(|w| (w[1].mean - PI / 2.0).abs() < (w[0].mean - PI / 2.0).abs());
    let x: Vec<f64> = grid.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = inner.iter().map(|e| e.mean).collect();
    let s: Vec<f64> = inner.iter().map(|e| e.stderr).collect();
    let fit = line_fit(&x, &y, Some(&s))?;
    let palm_ok = closer && fit.slope > 0.0 && fit.slope / fit.stderr >= 2.0;

    let cfg3 = config(3, 40_000, 111)?;
    let mu3 = DiscreteMeasure::unit_at_origin(cfg3.dim);
    let rows = occupancy_contrast(&mu3, 1.0, &grid, &[vec![1.0, 0.0, 0.0]], &[0.25], &cfg3, 20000)?;
    let miss: Vec<&EstimateWithCI> = rows.iter().map(|r| r.miss.as_ref().expect("conditioning events")).collect();
    let increasing = miss.windows(2).all(|w| w[1].mean > w[0].mean);
    let last = miss.last().expect("three rows").mean;
    let contrast_ok = increasing && last >= 0.9 && rows.iter().all(|r| !r.low_power);
    verdict(
        palm_ok && contrast_ok,
        format!(
            "d=2 inner disc {:?} → π/2 = {:.4} (slope {:.3}, z {:.1}); d=3 miss {:?} (conditioned {:?})",
            y.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            PI / 2.0,
            fit.slope,
            fit.slope / fit.stderr,
            miss.iter().map(|m| format!("{:.3}±{:.3}", m.mean, m.stderr)).collect::<Vec<_>>(),
            rows.iter().map(|r| r.conditioned).collect::<Vec<_>>(),
        ),
    )
}

fn c12() -> Result<Verdict> {
    let cfg = config(3, 64000, 12)?;
    let mu = DiscreteMeasure::unit_at_origin(cfg.dim);
    let arms = [Arm { mu: mu.clone(), t: 1.0 }, Arm { mu, t: 2.0 }];
    let rep = local_law_universality(&arms, 0.05, Some(2.0), &cfg, 1000, 400_000, 200)?;
    let ok = !rep.low_power && rep.comparisons.iter().all(|c| c.z.abs() <= 3.0);
    let desc: Vec<String> = rep
        .comparisons
        .iter()
        .map(|c| format!("{}: D = {:.2e} vs baseline {:.2e}, z = {:.2}", c.label, c.distance.statistic, c.baseline.statistic, c.z))
        .collect();
    verdict(ok, desc.join("; "))
}

fn run_cli(spec: &Path, out: &Path, threads: &str) -> Vec<Vec<u8>> {
    let status = Command::new(env!("CARGO_BIN_EXE_dwsim"))
        .arg("--spec")
        .arg(spec)
        .arg("--out")
        .arg(out)
        .args(["--threads", threads])
        .status()
        .expect("run dwsim binary");
    assert_eq!(status.code(), Some(0), "dwsim exited with {status}");
    ["results.csv", "summary.json", "schema.json"].iter().map(|f| fs::read(out.join(f)).expect("artifact")).collect()
}

fn c13() -> Result<Verdict> {
    let dir = std::env::temp_dir().join(format!("dwsim-acceptance-{}", std::process::id()));
    fs::create_dir_all(&dir).expect("temp dir");
    let specs = [
        ("forest", "subcommand = \"forest-check\"\ndimension = 2\nseed = 11\nmass_scale = 1000\nreps = 2000\n"),
        ("hit", "subcommand = \"hit\"\ndimension = 3\nseed = 12\nmass_scale = 1000\nreps = 1000\nepsilon = [0.2, 0.1]\nmode = \"cluster\"\n"),
        ("scaling", "subcommand = \"scaling\"\ndimension = 2\nseed = 13\nmass_scale = 400\nreps = 300\nscale = 0.5\npermutations = 99\n"),
    ];
    let mut identical = true;
    for (name, body) in specs {
        let spec = dir.join(format!("{name}.toml"));
        fs::write(&spec, body).expect("write spec");
        let a = run_cli(&spec, &dir.join(format!("{name}-1")), "1");
        let b = run_cli(&spec, &dir.join(format!("{name}-4")), "4");
        let c = run_cli(&spec, &dir.join(format!("{name}-1b")), "1");
        identical &= a == b && a == c;
    }
    let _ = fs::remove_dir_all(&dir);
    let checks = calibration_suite(SEED)?;
    let calib_ok = checks.iter().all(|c| c.passed);
    let desc: Vec<String> = checks.iter().map(|c| format!("{} {}", c.name, if c.passed { "ok" } else { "FAILED" })).collect();
    verdict(identical && calib_ok, format!("artifacts byte-identical across runs and thread counts: {identical}; calibration: {}", desc.join(", ")))
}

struct Line {
    id: u32,
    name: &'static str,
    budget: Duration,
}

fn main() {
    let mut unexpected = Vec::new();
    let mut report = |line: Line, result: Result<Verdict>, elapsed: Duration| {
        let (passed, detail) = match result {
            Ok(v) => (v.passed && elapsed <= line.budget, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let over = if elapsed > line.budget { " [over time budget]" } else { "" };
        println!(
            "C{:<2} {} {}: {} ({:.1} s of {} s){}",
            line.id,
            if passed { "PASS" } else { "FAIL" },
            line.name,
            detail,
            elapsed.as_secs_f64(),
            line.budget.as_secs(),
            over
        );
        let known = KNOWN_FAILURES.contains(&line.id);
        if passed == known {
            unexpected.push(line.id);
        }
    };
    let mins = |m: u64| Duration::from_secs(60 * m);
    macro_rules! timed {
        ($e:expr) => {{
            let start = Instant::now();
            let r = $e;
            (r, start.elapsed())
        }};
    }

    let (r, e) = timed!(c1());
    report(Line { id: 1, name: "covariance oracle", budget: Duration::from_secs(1) }, r, e);

    let (batch, batch_time) = timed!(planar_batch());
    match batch {
        Ok(b) => {
            let (r, e) = timed!(c2(&b));
            report(Line { id: 2, name: "first moment", budget: mins(2) }, r, e + batch_time);
            let (r, e) = timed!(c3(&b));
            report(Line { id: 3, name: "variance fingerprint", budget: mins(2) }, r, e + batch_time);
            let (r, e) = timed!(c4(&b));
            report(Line { id: 4, name: "total-mass law", budget: mins(2) }, r, e + batch_time);
        }
        Err(err) => {
            for (id, name) in [(2, "first moment"), (3, "variance fingerprint"), (4, "total-mass law")] {
                report(Line { id, name, budget: mins(2) }, Err(err.clone()), batch_time);
            }
        }
    }
    let (r, e) = timed!(c5());
    report(Line { id: 5, name: "cluster law", budget: mins(5) }, r, e);
    let (r, e) = timed!(c6());
    report(Line { id: 6, name: "forest equivalence and conversion identity", budget: mins(5) }, r, e);
    let (r7, e7) = timed!(c7());
    let c_hat = r7.as_ref().ok().map(|(_, c)| c.clone());
    report(Line { id: 7, name: "normalized-hit constancy (d=3)", budget: mins(15) }, r7.map(|(v, _)| v), e7);
    let (r, e) = timed!(c8());
    report(Line { id: 8, name: "planar normalizer m(ε)", budget: mins(15) }, r, e);
    let (r, e) = timed!(match &c_hat {
        Some(c) => c9(c),
        None => Err(dwsim::Error::InsufficientData("no ĉ_3 from C7".into())),
    });
    report(Line { id: 9, name: "Lebesgue approximation", budget: mins(20) }, r, e);
    let (r, e) = timed!(c10());
    report(Line { id: 10, name: "Brownian scaling", budget: mins(5) }, r, e);
    let (r, e) = timed!(c11());
    report(Line { id: 11, name: "local dichotomy d=2 vs d=3", budget: mins(20) }, r, e);
    let (r, e) = timed!(c12());
    report(Line { id: 12, name: "conditional local-law universality", budget: mins(30) }, r, e);
    let (r, e) = timed!(c13());
    report(Line { id: 13, name: "reproducibility and calibration", budget: mins(10) }, r, e);

    if unexpected.is_empty() {
        println!("acceptance: all outcomes as recorded (known failures: {KNOWN_FAILURES:?})");
    } else {
        println!("acceptance: unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
