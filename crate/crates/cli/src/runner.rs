//! Subcommand execution: spec → estimator calls → rows and summary.

use dwsim::estimators::*;
use dwsim::geometry::Window;
use dwsim::kernels::{self, heat_kernel, mean_density, DEFAULT_QUAD_TOL};
use dwsim::rng::{derive_seed, replicate};
use dwsim::simulate::{poisson_forest, simulate_dw, superpose};
use dwsim::stats::{ks_two_sample, mean_ci};
use dwsim::{Dimension, DiscreteMeasure, EstimateWithCI};
use serde_json::{json, Value};

use crate::output::{Record, LOW_POWER};
use crate::spec::{measure_from, ExperimentSpec};
use crate::CliError;

pub struct Outcome {
    pub rows: Vec<Record>,
    pub results: Value,
}

impl Outcome {
    pub fn low_power(&self) -> bool {
        self.rows.iter().any(|r| r.flags.iter().any(|f| f == LOW_POWER))
    }
}

fn js<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable result")
}

pub fn execute(spec: &ExperimentSpec, seed: u64) -> Result<Outcome, CliError> {
    let cfg = spec.sim_config(seed)?;
    let dim = spec.dim()?;
    let mu = spec.mu()?;
    let t = spec.time();
    let eps = spec.eps();
    let reps = spec.reps.unwrap_or(1000);
    let mut rows = Vec::new();
    let results = match spec.subcommand.as_str() {
        "moments" => {
            let times = spec.times.clone().unwrap_or(vec![t]);
            let mut out = Vec::new();
            for &tt in &times {
                for x in spec.points_or_origin() {
                    let p = heat_kernel(&x, tt)?.value;
                    let m = mean_density(&mu, &x, tt)?.value;
                    rows.push(Record::new("heat_kernel", p).t(tt).x(&x));
                    rows.push(Record::new("mean_density", m).t(tt).x(&x));
                    out.push(json!({"t": tt, "x": x, "heat_kernel": p, "mean_density": m}));
                }
                if dim.get() >= 1 {
                    let c = kernels::covariance_total_integral(tt, dim, DEFAULT_QUAD_TOL)?;
                    rows.push(Record::new("covariance_total_integral", c).t(tt));
                }
                let l = kernels::total_mass_laplace(1.0, tt, mu.total_mass())?;
                let q = kernels::extinction_probability(mu.total_mass(), tt)?;
                rows.push(Record::new("laplace_total_mass", l).t(tt));
                rows.push(Record::new("extinction_probability", q).t(tt));
            }
            json!({"points": out})
        }
        "hit" => {
            let mode = match spec.mode.as_deref() {
                Some("cluster") => HitMode::Cluster,
                _ => HitMode::Direct,
            };
            let mut out = Vec::new();
            for (k, x) in spec.points_or_origin().iter().enumerate() {
                for (j, &e) in eps.iter().enumerate() {
                    let c = cfg.clone().with_seed(derive_seed(seed, (k * eps.len() + j) as u64));
                    let h = hit_probability(&mu, t, x, e, &c, reps, mode)?;
                    rows.push(Record::est("hit_probability", &h.probability).eps(e).t(t).x(x).flag(h.upper_bound_only, "upper-bound-only"));
                    if let Some(cp) = &h.cluster_probability {
                        rows.push(Record::est("cluster_hit_probability", cp).eps(e).t(t).x(x));
                    }
                    out.push(json!({"x": x, "epsilon": e, "estimate": js(&h)}));
                }
            }
            json!({"mode": mode, "estimates": out})
        }
        "sandwich" => {
            let table = sandwich_check(&mu, t, &eps, &cfg, spec.clusters.unwrap_or(reps))?;
            for r in &table.rows {
                rows.push(Record::est("cluster_hit", &r.cluster_hit).eps(r.eps).t(t));
                rows.push(Record::est("normalized_hit", &r.normalized).eps(r.eps).t(t));
                rows.push(Record::est("ratio_t", &r.ratio_t).eps(r.eps).t(t));
                rows.push(Record::est("ratio_t_eps", &r.ratio_t_eps).eps(r.eps).t(r.t_eps));
            }
            rows.push(Record::new("band", table.band).t(t));
            js(&table)
        }
        "cd" => {
            let design = cd_design(spec, dim, &mu)?;
            let cd = estimate_cd(&design, &cfg, reps)?;
            for r in &cd.rows {
                let arm = format!("group{}", r.group);
                rows.push(Record::est("hit_probability", &r.probability).arm(&arm).eps(r.eps).t(r.t).x(&r.x));
                rows.push(Record::est("ratio", &r.ratio).arm(&arm).eps(r.eps).t(r.t).x(&r.x));
            }
            rows.push(Record::est("c_hat", &cd.c_hat));
            rows.push(Record::new("c_tilde", cd.c_tilde));
            rows.push(Record::new("max_abs_z", cd.max_abs_z).flag(cd.max_abs_z >= 3.0, "fail"));
            rows.push(Record::new("dispersion", cd.dispersion));
            js(&cd)
        }
        "m-table" => {
            let radius = spec.radius.unwrap_or(4.0);
            let table = m_table(&eps, radius, &cfg, spec.clusters.unwrap_or(reps), spec.roots_per_cluster.unwrap_or(100))?;
            for r in &table.rows {
                rows.push(Record::est("m_hat", &r.m).eps(r.eps).h(radius));
                rows.push(Record::new("m_tilde", r.m_tilde).eps(r.eps).h(radius));
                rows.push(Record::new("tail_bound", r.tail_bound).eps(r.eps).h(radius));
            }
            let cross = match spec.cross_check_reps {
                Some(n) => {
                    let c = planar_cross_check(&mu, t, &table, &cfg.clone().with_seed(derive_seed(seed, 1)), n)?;
                    for r in &c {
                        rows.push(Record::est("normalized_hit", &r.normalized).eps(r.eps).t(t).flag(r.z.abs() >= 3.0, "fail"));
                        rows.push(Record::new("target", r.target).eps(r.eps).t(t));
                    }
                    Some(c)
                }
                None => None,
            };
            json!({"table": js(&table), "cross_check": js(&cross)})
        }
        "lebesgue" => {
            let half = spec.box_half.unwrap_or(1.0);
            let window = Window::cube(dim, half)?;
            let normalizers = lebesgue_normalizers(spec, dim, &mu, &cfg, seed)?;
            let mut out = Vec::new();
            for (k, &e) in eps.iter().enumerate() {
                let c = cfg.clone().with_seed(derive_seed(seed, 100));
                let norm = &normalizers[if normalizers.len() == 1 { 0 } else { k }];
                let (factor, rel) = norm.factor(e, dim)?;
                rows.push(Record::new("normalizer", factor).eps(e).se(factor * rel, reps));
                // Each ε reuses the same replications (same seed).
                let r = lebesgue_experiment(&mu, t, &[e], &window, norm, &c, reps, spec.delta_fraction)?.remove(0);
                rows.push(Record::est("normalized_mean", &r.mean).eps(e).t(t).flag(r.trusted_fraction < 0.5, "untrusted"));
                rows.push(Record::new("target", r.target).eps(e).t(t));
                rows.push(Record::new("z", r.z).eps(e).t(t).flag(r.z.abs() >= 3.0, "fail"));
                rows.push(Record::new("median_relative_error", r.median_relative_error).eps(e).t(t).reps(r.n_compared));
                rows.push(Record::new("trusted_fraction", r.trusted_fraction).eps(e).t(t));
                out.push(r);
            }
            json!({"normalizers": js(&normalizers), "rows": js(&out)})
        }
        "multiplicity" => {
            let mut out = Vec::new();
            for (j, &h) in spec.h.clone().unwrap_or_default().iter().enumerate() {
                let c = cfg.clone().with_seed(derive_seed(seed, j as u64));
                let table = multiplicity_table(&mu, t, h, &eps, &c, reps)?;
                for r in &table {
                    rows.push(Record::est("overcount", &r.overcount).eps(r.eps).t(t).h(h));
                    if let Some(s) = &r.scaled {
                        rows.push(Record::est("overcount_scaled", s).eps(r.eps).t(t).h(h));
                    }
                }
                out.push(json!({"h": h, "rows": js(&table)}));
            }
            json!({"tables": out})
        }
        "extinction" => {
            let centre = spec.points_or_origin().remove(0);
            let radius = spec.radius.unwrap_or(1.0);
            let times = spec.times.clone().unwrap_or_default();
            let curve = extinction_curve(&mu, &centre, radius, &times, &cfg, reps)?;
            for r in &curve {
                rows.push(Record::est("hit_probability", &r.hit).t(r.t).h(radius).x(&centre).flag(r.hit.mean > r.survival + 3.0 * r.hit.stderr, "fail"));
                rows.push(Record::new("survival", r.survival).t(r.t));
                if let Some(c) = r.companion {
                    rows.push(Record::new("companion", c).t(r.t).x(&centre));
                }
            }
            js(&curve)
        }
        "scaling" => {
            let r = spec.scale.unwrap_or(0.5);
            let rep = scaling_check(&mu, t, r, &cfg, reps, spec.permutations.unwrap_or(199))?;
            rows.push(Record::new("ks_statistic", rep.ks_total_mass.statistic).t(t).h(r).reps(reps));
            rows.push(Record::new("ks_p_value", rep.ks_total_mass.p_value).t(t).h(r).reps(reps));
            rows.push(Record::new("energy_statistic", rep.energy.statistic).t(t).h(r).reps(reps));
            rows.push(Record::new("energy_p_value", rep.energy.p_value).t(t).h(r).reps(reps));
            rows.push(Record::est("ball_mass_rescaled", &rep.ball_mass_rescaled).t(t).h(r));
            rows.push(Record::est("ball_mass_direct", &rep.ball_mass_direct).t(t).h(r));
            rows.push(Record::new("ball_mass_oracle", rep.ball_mass_oracle).t(t).h(r));
            js(&rep)
        }
        "palm" => {
            let edges = spec.edges.clone().unwrap_or(vec![0.0, 0.5f64.sqrt(), 1.0]);
            let prof = palm_local_profile(&mu, t, &eps, &edges, &cfg, reps, spec.picks.unwrap_or(10))?;
            for p in &prof {
                for a in &p.annuli {
                    let arm = format!("annulus[{},{})", a.inner, a.outer);
                    rows.push(Record::est("annulus_mass", &a.normalized_mass).arm(&arm).eps(p.eps).t(t).flag(p.used_reps < MIN_CONDITIONED, LOW_POWER));
                    rows.push(Record::new("annulus_area", a.lebesgue).arm(&arm).eps(p.eps));
                }
                rows.push(Record::new("extinct_reps", p.extinct_reps as f64).eps(p.eps).t(t).reps(reps));
            }
            js(&prof)
        }
        "contrast" => {
            let offsets = spec.offsets.clone().unwrap_or_default();
            let radii = spec.h.clone().unwrap_or_default();
            let table = if dim.get() >= 3 {
                occupancy_contrast(&mu, t, &eps, &offsets, &radii, &cfg, reps)?
            } else {
                occupancy_contrast_planar(&mu, t, &eps, &offsets, &radii, &cfg, reps)?
            };
            for r in &table {
                if let Some(m) = &r.miss {
                    rows.push(Record::est("miss_frequency", m).eps(r.eps).t(t).h(r.h).x(&r.offset).flag(r.low_power, LOW_POWER));
                }
                rows.push(Record::new("conditioned", r.conditioned as f64).eps(r.eps).t(t).h(r.h).x(&r.offset).reps(reps).flag(r.low_power, LOW_POWER));
            }
            js(&table)
        }
        "universality" => {
            let arms: Vec<Arm> = spec
                .arms
                .clone()
                .unwrap_or_default()
                .iter()
                .map(|a| Ok(Arm { mu: measure_from(dim, a.atoms.as_deref().or(spec.atoms.as_deref()))?, t: a.t }))
                .collect::<Result<_, CliError>>()?;
            let target = spec.target.unwrap_or(500);
            let rep = local_law_universality(&arms, eps[0], spec.scale, &cfg, target, spec.max_reps.unwrap_or(1_000_000), spec.permutations.unwrap_or(199))?;
            for c in &rep.comparisons {
                let sd = (c.distance.null_sd.unwrap_or(0.0).powi(2) + c.baseline.null_sd.unwrap_or(0.0).powi(2)).sqrt();
                rows.push(Record::new("energy_distance", c.distance.statistic).arm(&c.label).eps(rep.eps).se(sd, c.distance.n_a));
                rows.push(Record::new("baseline", c.baseline.statistic).arm(&c.label).eps(rep.eps));
                rows.push(Record::new("z", c.z).arm(&c.label).eps(rep.eps).flag(c.z.abs() >= 3.0, "fail"));
            }
            for s in &rep.samples {
                rows.push(Record::new("conditioned", s.values.len() as f64).arm(&s.label).eps(s.eps).reps(s.replications as usize).flag(s.low_power, LOW_POWER));
            }
            json!({
                "eps": rep.eps,
                "comparisons": js(&rep.comparisons),
                "samples": rep.samples.iter().map(|s| json!({"label": s.label, "eps": s.eps, "conditioned": s.values.len(), "replications": s.replications, "low_power": s.low_power})).collect::<Vec<_>>(),
                "low_power": rep.low_power,
                "note": rep.note,
            })
        }
        "forest-check" => {
            let direct = replicate(derive_seed(seed, 1), reps, |_, rng| Ok(simulate_dw(&mu, t, &cfg, rng)?.total_mass()))?;
            let forest = replicate(derive_seed(seed, 2), reps, |_, rng| {
                let clusters = poisson_forest(&mu, t, &cfg, rng)?;
                Ok(superpose(dim, &clusters, cfg.particle_mass(), t).total_mass())
            })?;
            let ks = ks_two_sample(&forest, &direct)?;
            let (mf, md) = (mean_ci(&forest)?, mean_ci(&direct)?);
            rows.push(Record::new("ks_statistic", ks.statistic).t(t).reps(reps));
            rows.push(Record::new("ks_p_value", ks.p_value).t(t).reps(reps).flag(ks.p_value <= 0.01, "fail"));
            rows.push(Record::est("mean_mass_forest", &mf).t(t));
            rows.push(Record::est("mean_mass_direct", &md).t(t));
            json!({"ks": js(&ks), "mean_mass_forest": js(&mf), "mean_mass_direct": js(&md)})
        }
        other => return Err(CliError::Validation(format!("subcommand: unknown `{other}`"))),
    };
    Ok(Outcome { rows, results })
}

fn cd_design(spec: &ExperimentSpec, dim: Dimension, mu: &DiscreteMeasure) -> Result<Vec<DesignPoint>, CliError> {
    let arms: Vec<(DiscreteMeasure, f64)> = match &spec.arms {
        Some(a) => a
            .iter()
            .map(|a| Ok((measure_from(dim, a.atoms.as_deref().or(spec.atoms.as_deref()))?, a.t)))
            .collect::<Result<_, CliError>>()?,
        None => vec![(mu.clone(), spec.time())],
    };
    let mut design = Vec::new();
    for (m, t) in &arms {
        for x in spec.points_or_origin() {
            for &e in &spec.eps() {
                design.push(DesignPoint { mu: m.clone(), t: *t, x: x.clone(), eps: e });
            }
        }
    }
    Ok(design)
}

/// One normalizer for d ≥ 3 (given or estimated at the origin and (1/2)e1),
/// one per ε for d = 2 (an m-table over the grid).
fn lebesgue_normalizers(
    spec: &ExperimentSpec,
    dim: Dimension,
    mu: &DiscreteMeasure,
    cfg: &dwsim::SimConfig,
    seed: u64,
) -> Result<Vec<Normalizer>, CliError> {
    let eps = spec.eps();
    let n = spec.normalizer_reps.unwrap_or(spec.reps.unwrap_or(1000).max(100));
    if dim.get() >= 3 {
        if let Some(v) = spec.normalizer_value {
            let c_hat = EstimateWithCI::new(v, spec.normalizer_stderr.unwrap_or(0.0), 1, "given");
            return Ok(vec![Normalizer::HighDim { c_hat }]);
        }
        let t = spec.time();
        let mut x1 = vec![0.0; dim.get()];
        x1[0] = 0.5;
        let design: Vec<DesignPoint> = eps
            .iter()
            .filter(|e| **e < t.sqrt())
            .flat_map(|&e| [vec![0.0; dim.get()], x1.clone()].map(|x| DesignPoint { mu: mu.clone(), t, x, eps: e }))
            .collect();
        let cd = estimate_cd(&design, &cfg.clone().with_seed(derive_seed(seed, 7)), n)?;
        Ok(vec![Normalizer::HighDim { c_hat: cd.c_hat }])
    } else {
        let mut sorted = eps.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let table = m_table(&sorted, spec.radius.unwrap_or(4.0), &cfg.clone().with_seed(derive_seed(seed, 7)), n, spec.roots_per_cluster.unwrap_or(100))?;
        Ok(eps
            .iter()
            .map(|e| {
                let row = table.rows.iter().find(|r| r.eps == *e).expect("row for every epsilon");
                Normalizer::Planar { eps: *e, m_hat: row.m.clone() }
            })
            .collect())
    }
}
