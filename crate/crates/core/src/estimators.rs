//! Monte Carlo estimators: hitting probabilities and their normalizations,
//! Lebesgue approximation of ξ_t, multiplicities, extinction, scaling and
//! local structure near hitting points.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{build_index, neighborhood_measure, neighborhood_measure_refined, state_count_in_ball, state_hits_ball, Window};
use crate::kernels::{self, bound_times, gaussian_tail_mass, mean_density, planar_time_inflation};
use crate::measure::{squared_distance, Dimension, DiscreteMeasure};
use crate::rng::{derive_seed, replicate, SimRng};
use crate::simulate::{evolve, rescale_state, sample_cluster, simulate_dw, simulate_path, Lineage, ParticleState, SimConfig};
use crate::stats::{self, energy_distance, ks_two_sample, mean_ci, proportion_ci, z_score, EstimateWithCI, TestReport};

pub const MIN_HIT_REPS: usize = 100;
/// Conditioning counts below this are flagged as low power.
pub const MIN_CONDITIONED: usize = 100;

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        domain(format!("epsilon must be positive and finite, got {eps}"))
    }
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        domain(format!("time must be positive and finite, got {t}"))
    }
}

fn check_config(cfg: &SimConfig, dim: Dimension) -> Result<()> {
    cfg.validate()?;
    if cfg.dim != dim {
        return domain("config dimension does not match the initial measure");
    }
    Ok(())
}

fn check_grid(grid: &[f64], what: &str) -> Result<()> {
    if grid.is_empty() {
        return domain(format!("{what} grid must be nonempty"));
    }
    for &e in grid {
        check_eps(e)?;
    }
    Ok(())
}

fn origin(dim: Dimension) -> Vec<f64> {
    vec![0.0; dim.get()]
}

fn count_true(v: &[bool]) -> u64 {
    v.iter().filter(|&&b| b).count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HitMode {
    #[default]
    Direct,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HitEstimate {
    /// Estimate of P_μ{ξ_t B > 0}.
    pub probability: EstimateWithCI,
    /// Estimate of P_μ{η_t B > 0} (cluster mode only).
    pub cluster_probability: Option<EstimateWithCI>,
    pub hits: u64,
    pub upper_bound_only: bool,
    pub mode: HitMode,
}

/// Maps a cluster-hit probability p to the process-hit probability 1 - exp(-p/t).
pub fn cluster_to_process(cluster: &EstimateWithCI, t: f64) -> EstimateWithCI {
    let conv = |p: f64| 1.0 - (-p / t).exp();
    EstimateWithCI {
        mean: conv(cluster.mean),
        stderr: (-cluster.mean / t).exp() * cluster.stderr / t,
        n_reps: cluster.n_reps,
        lower: conv(cluster.lower),
        upper: conv(cluster.upper),
        tag: "cluster-converted".into(),
    }
}

fn root_picker(mu: &DiscreteMeasure) -> Result<WeightedIndex<f64>> {
    let w: Vec<f64> = mu.atoms().map(|(_, w)| w).collect();
    WeightedIndex::new(&w).map_err(|e| Error::Domain(e.to_string()))
}

/// Clusters of age t rooted at points drawn from μ/‖μ‖; returns, per cluster,
/// `probe(cluster)`.
fn cluster_replicates<T: Send, F>(mu: &DiscreteMeasure, t: f64, cfg: &SimConfig, seed: u64, n: usize, probe: F) -> Result<Vec<T>>
where
    F: Fn(&ParticleState, &mut SimRng) -> Result<T> + Sync,
{
    let pick = root_picker(mu)?;
    replicate(seed, n, |_, rng| {
        let root = mu.position(pick.sample(rng));
        let c = sample_cluster(root, t, cfg, rng)?;
        probe(&c.particles, rng)
    })
}

/// Probability that ξ_t charges the open ball B_center^eps.
///
/// `Direct` simulates ξ_t; `Cluster` estimates P_μ{η_t B > 0} from clusters
/// rooted according to μ and converts it by P_μ{ξ_t B > 0} = 1 - exp(-t^{-1} P_μ{η_t B > 0}).
pub fn hit_probability(
    mu: &DiscreteMeasure,
    t: f64,
    center: &[f64],
    eps: f64,
    cfg: &SimConfig,
    n_reps: usize,
    mode: HitMode,
) -> Result<HitEstimate> {
    check_config(cfg, mu.dim())?;
    check_time(t)?;
    check_eps(eps)?;
    crate::measure::check_point(mu.dim(), center)?;
    if n_reps < MIN_HIT_REPS {
        return domain(format!("hit_probability needs at least {MIN_HIT_REPS} replications, got {n_reps}"));
    }
    if mu.is_empty() {
        return Ok(HitEstimate {
            probability: EstimateWithCI {
                mean: 0.0,
                stderr: 0.0,
                n_reps,
                lower: 0.0,
                upper: 0.0,
                tag: "exact".into(),
            },
            cluster_probability: None,
            hits: 0,
            upper_bound_only: false,
            mode,
        });
    }
    match mode {
        HitMode::Direct => {
            let hits = replicate(cfg.seed, n_reps, |_, rng| Ok(state_hits_ball(&simulate_dw(mu, t, cfg, rng)?, center, eps)))?;
            let h = count_true(&hits);
            Ok(HitEstimate {
                probability: proportion_ci(h, n_reps as u64)?,
                cluster_probability: None,
                hits: h,
                upper_bound_only: h == 0,
                mode,
            })
        }
        HitMode::Cluster => {
            let hits = cluster_replicates(mu, t, cfg, cfg.seed, n_reps, |c, _| Ok(state_hits_ball(c, center, eps)))?;
            let h = count_true(&hits);
            let cluster = proportion_ci(h, n_reps as u64)?.scaled(mu.total_mass());
            Ok(HitEstimate {
                probability: cluster_to_process(&cluster, t),
                cluster_probability: Some(cluster),
                hits: h,
                upper_bound_only: h == 0,
                mode,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichRow {
    pub eps: f64,
    pub cluster_hit: EstimateWithCI,
    /// t^{-1} ε^{2-d} P̂ (d ≥ 3) or t^{-1} log(t/ε²) P̂ (d = 2).
    pub normalized: EstimateWithCI,
    pub t_eps: f64,
    pub density_t: f64,
    pub density_t_eps: f64,
    pub ratio_t: EstimateWithCI,
    pub ratio_t_eps: EstimateWithCI,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichTable {
    pub rows: Vec<SandwichRow>,
    /// Largest over smallest ratio across the table.
    pub band: f64,
}

/// Normalized cluster hitting of B_0^ε compared with μp_t and μp_{t_ε}.
pub fn sandwich_check(mu: &DiscreteMeasure, t: f64, eps_grid: &[f64], cfg: &SimConfig, n_clusters: usize) -> Result<SandwichTable> {
    check_config(cfg, mu.dim())?;
    check_time(t)?;
    check_grid(eps_grid, "epsilon")?;
    let dim = mu.dim();
    dim.require_at_least(2, "sandwich_check")?;
    if mu.is_empty() {
        return domain("sandwich_check needs a nonzero initial measure");
    }
    if n_clusters < MIN_HIT_REPS {
        return domain(format!("sandwich_check needs at least {MIN_HIT_REPS} clusters"));
    }
    let t_eps: Vec<f64> = eps_grid.iter().map(|&e| bound_times(t, e, dim)).collect::<Result<_>>()?;
    let zero = origin(dim);
    let hits = cluster_replicates(mu, t, cfg, cfg.seed, n_clusters, |c, _| {
        Ok(eps_grid.iter().map(|&e| state_hits_ball(c, &zero, e)).collect::<Vec<bool>>())
    })?;
    let density_t = mean_density(mu, &zero, t)?.value;
    let d = dim.get() as i32;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for (k, &eps) in eps_grid.iter().enumerate() {
        let h = hits.iter().filter(|v| v[k]).count() as u64;
        let cluster_hit = proportion_ci(h, n_clusters as u64)?.scaled(mu.total_mass());
        let norm = if d >= 3 { eps.powi(2 - d) / t } else { (t / (eps * eps)).ln() / t };
        let normalized = cluster_hit.scaled(norm);
        let density_t_eps = mean_density(mu, &zero, t_eps[k])?.value;
        rows.push(SandwichRow {
            eps,
            ratio_t: normalized.scaled(1.0 / density_t),
            ratio_t_eps: normalized.scaled(1.0 / density_t_eps),
            cluster_hit,
            normalized,
            t_eps: t_eps[k],
            density_t,
            density_t_eps,
        });
    }
    let ratios: Vec<f64> = rows.iter().flat_map(|r| [r.ratio_t.mean, r.ratio_t_eps.mean]).collect();
    let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
    Ok(SandwichTable {
        rows,
        band: if lo > 0.0 { hi / lo } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub mu: DiscreteMeasure,
    pub t: f64,
    pub x: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub eps: f64,
    pub group: usize,
    pub probability: EstimateWithCI,
    pub density: f64,
    /// ε^{2-d} P̂ / (μ*p_t)(x).
    pub ratio: EstimateWithCI,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairZ {
    pub a: usize,
    pub b: usize,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdEstimate {
    pub c_hat: EstimateWithCI,
    pub c_tilde: f64,
    pub rows: Vec<CdRow>,
    pub pairwise: Vec<PairZ>,
    pub max_abs_z: f64,
    /// Σ (ratio_i - ĉ)² / Var(ratio_i).
    pub dispersion: f64,
}

/// Estimates the constant in ε^{2-d} P_μ{ξ_t B_x^ε > 0} → c_d (μ*p_t)(x), d ≥ 3.
///
/// Design points sharing (μ, t) are evaluated on the same replications; the
/// resulting correlations enter both the pairwise z-scores and the standard
/// error of the weighted mean.
pub fn estimate_cd(design: &[DesignPoint], cfg: &SimConfig, n_reps: usize) -> Result<CdEstimate> {
    cfg.dim.require_at_least(3, "estimate_cd")?;
    if n_reps < MIN_HIT_REPS {
        return domain(format!("estimate_cd needs at least {MIN_HIT_REPS} replications per group"));
    }
    let mut pairs: Vec<(Vec<f64>, f64)> = Vec::new();
    for p in design {
        check_config(cfg, p.mu.dim())?;
        check_time(p.t)?;
        check_eps(p.eps)?;
        crate::measure::check_point(cfg.dim, &p.x)?;
        if p.mu.is_empty() {
            return domain("design measures must be nonzero");
        }
        if p.eps >= p.t.sqrt() {
            return domain(format!("epsilon {} is not small relative to sqrt(t) = {}", p.eps, p.t.sqrt()));
        }
        if !pairs.iter().any(|(x, t)| *x == p.x && *t == p.t) {
            pairs.push((p.x.clone(), p.t));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::Design("constancy needs at least two distinct (x, t) pairs".into()));
    }

    // Group design points by (μ, t).
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, p) in design.iter().enumerate() {
        match groups.iter_mut().find(|(j, _)| design[*j].mu == p.mu && design[*j].t == p.t) {
            Some((_, members)) => members.push(i),
            None => groups.push((i, vec![i])),
        }
    }

    let k = design.len();
    let d = cfg.dim.get() as i32;
    let mut probs = vec![0.0; k];
    let mut cov = vec![0.0; k * k];
    let mut group_of = vec![0; k];
    for (g, (lead, members)) in groups.iter().enumerate() {
        let mu = &design[*lead].mu;
        let t = design[*lead].t;
        let hits = replicate(derive_seed(cfg.seed, g as u64), n_reps, |_, rng| {
            let s = simulate_dw(mu, t, cfg, rng)?;
            Ok(members.iter().map(|&i| state_hits_ball(&s, &design[i].x, design[i].eps)).collect::<Vec<bool>>())
        })?;
        let n = n_reps as f64;
        for (a, &i) in members.iter().enumerate() {
            group_of[i] = g;
            probs[i] = hits.iter().filter(|v| v[a]).count() as f64 / n;
        }
        for (a, &i) in members.iter().enumerate() {
            for (b, &j) in members.iter().enumerate() {
                let both = hits.iter().filter(|v| v[a] && v[b]).count() as f64 / n;
                // Covariance of the two sample means.
                cov[i * k + j] = (both - probs[i] * probs[j]) / (n - 1.0);
            }
        }
    }

    let mut scale = vec![0.0; k];
    let mut rows = Vec::with_capacity(k);
    for (i, p) in design.iter().enumerate() {
        let density = mean_density(&p.mu, &p.x, p.t)?.value;
        if density <= 0.0 {
            return domain("design point has zero mean density");
        }
        scale[i] = p.eps.powi(2 - d) / density;
        let h = (probs[i] * n_reps as f64).round() as u64;
        let probability = proportion_ci(h, n_reps as u64)?;
        rows.push(CdRow {
            t: p.t,
            x: p.x.clone(),
            eps: p.eps,
            group: group_of[i],
            ratio: EstimateWithCI::new(scale[i] * probs[i], scale[i] * cov[i * k + i].max(0.0).sqrt(), n_reps, "ratio"),
            probability,
            density,
        });
    }
    let v = |i: usize, j: usize| scale[i] * scale[j] * cov[i * k + j];
    if (0..k).any(|i| v(i, i) <= 0.0) {
        return Err(Error::InsufficientData("a design point recorded no hits".into()));
    }
    let w: Vec<f64> = (0..k).map(|i| 1.0 / v(i, i)).collect();
    let sw: f64 = w.iter().sum();
    let c = (0..k).map(|i| w[i] * rows[i].ratio.mean).sum::<f64>() / sw;
    let var: f64 = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| w[i] * w[j] * v(i, j)).sum::<f64>() / (sw * sw);
    let c_hat = EstimateWithCI::new(c, var.max(0.0).sqrt(), n_reps * groups.len(), "inverse-variance");

    let mut pairwise = Vec::new();
    let mut max_abs_z: f64 = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let s2 = v(i, i) + v(j, j) - 2.0 * v(i, j);
            let diff = rows[i].ratio.mean - rows[j].ratio.mean;
            let z = if s2 > 0.0 { diff / s2.sqrt() } else { z_score(rows[i].ratio.mean, 0.0, rows[j].ratio.mean, 0.0) };
            max_abs_z = max_abs_z.max(z.abs());
            pairwise.push(PairZ { a: i, b: j, z });
        }
    }
    let dispersion = (0..k).map(|i| (rows[i].ratio.mean - c).powi(2) / v(i, i)).sum();
    Ok(CdEstimate {
        c_tilde: 1.0 / c,
        c_hat,
        rows,
        pairwise,
        max_abs_z,
        dispersion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizerRow {
    pub eps: f64,
    pub m: EstimateWithCI,
    pub m_tilde: f64,
    /// Gaussian tail weight outside the truncation disc; an additive bias bound up to a constant.
    pub tail_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizerTable {
    pub radius: f64,
    pub rows: Vec<NormalizerRow>,
}

/// Estimates m(ε) = |log ε| ∫ P_x{η_1 B_0^ε > 0} dx in d = 2 for a descending ε grid.
///
/// Each sampled cluster is rooted at 0 and probed with `roots_per_cluster`
/// uniform points y of B_0^R; by translation invariance a hit of B_y^ε by the
/// cluster is a hit of B_0^ε by the cluster rooted at -y. Clusters are shared
/// across the grid.
pub fn m_table(eps_grid: &[f64], radius: f64, cfg: &SimConfig, n_clusters: usize, roots_per_cluster: usize) -> Result<NormalizerTable> {
    cfg.dim.require_exactly(2, "m(eps) estimation")?;
    cfg.validate()?;
    check_grid(eps_grid, "epsilon")?;
    if eps_grid.iter().any(|&e| e >= 0.5) {
        return domain("m(eps) needs 0 < eps < 1/2");
    }
    if eps_grid.windows(2).any(|w| !(w[1] < w[0])) {
        return domain("epsilon grid must be strictly descending");
    }
    if !(radius >= 4.0 && radius.is_finite()) {
        return domain(format!("truncation radius must be at least 4, got {radius}"));
    }
    if n_clusters < 2 || roots_per_cluster == 0 {
        return domain("m(eps) needs at least 2 clusters and 1 root per cluster");
    }
    let width = eps_grid[0];
    let zero = [0.0, 0.0];
    let counts = replicate(cfg.seed, n_clusters, |_, rng| {
        let c = sample_cluster(&zero, 1.0, cfg, rng)?;
        let index = build_index(cfg.dim, &c.particles.positions, width)?;
        let mut hits = vec![0u32; eps_grid.len()];
        for _ in 0..roots_per_cluster {
            let y = uniform_in_disc(rng, radius);
            for (k, &e) in eps_grid.iter().enumerate() {
                if index.hits_ball(&y, e)? {
                    hits[k] += 1;
                } else {
                    // Smaller balls cannot be hit either.
                    break;
                }
            }
        }
        Ok(hits)
    })?;
    let area = PI * radius * radius;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for (k, &eps) in eps_grid.iter().enumerate() {
        let values: Vec<f64> = counts
            .iter()
            .map(|h| area * eps.ln().abs() * h[k] as f64 / roots_per_cluster as f64)
            .collect();
        let mut m = mean_ci(&values)?;
        m.tag = "m-hat".into();
        let tail_bound = gaussian_tail_mass(radius, planar_time_inflation(eps)?, cfg.dim)?;
        if !(m.mean > 0.0) {
            return Err(Error::InsufficientData(format!("no cluster hits recorded at eps = {eps}")));
        }
        if tail_bound > 0.1 * m.mean {
            return Err(Error::Design(format!(
                "truncation radius {radius} too small: tail bound {tail_bound:e} exceeds 10% of m-hat {}",
                m.mean
            )));
        }
        rows.push(NormalizerRow {
            eps,
            m_tilde: 1.0 / m.mean,
            m,
            tail_bound,
        });
    }
    Ok(NormalizerTable { radius, rows })
}

/// Single-ε form of [`m_table`].
pub fn estimate_m(eps: f64, radius: f64, cfg: &SimConfig, n_clusters: usize, roots_per_cluster: usize) -> Result<NormalizerRow> {
    Ok(m_table(&[eps], radius, cfg, n_clusters, roots_per_cluster)?.rows.remove(0))
}

fn uniform_in_disc<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let a = 2.0 * PI * rng.random::<f64>();
    [r * a.cos(), r * a.sin()]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanarCrossCheckRow {
    pub eps: f64,
    pub process_hit: EstimateWithCI,
    /// |log ε| P̂_μ{ξ_t B_0^ε > 0} / m̂(ε).
    pub normalized: EstimateWithCI,
    /// (μ*p_t)(0).
    pub target: f64,
    pub z: f64,
}

/// Compares |log ε| P̂_μ{ξ_t B_0^ε > 0}/m̂(ε) with (μ*p_t)(0) for every row of a normalizer table.
pub fn planar_cross_check(
    mu: &DiscreteMeasure,
    t: f64,
    table: &NormalizerTable,
    cfg: &SimConfig,
    n_reps: usize,
) -> Result<Vec<PlanarCrossCheckRow>> {
    cfg.dim.require_exactly(2, "planar cross-check")?;
    check_config(cfg, mu.dim())?;
    check_time(t)?;
    if n_reps < MIN_HIT_REPS {
        return domain(format!("cross-check needs at least {MIN_HIT_REPS} replications"));
    }
    let zero = [0.0, 0.0];
    let hits = replicate(cfg.seed, n_reps, |_, rng| {
        let s = simulate_dw(mu, t, cfg, rng)?;
        Ok(table.rows.iter().map(|r| state_hits_ball(&s, &zero, r.eps)).collect::<Vec<bool>>())
    })?;
    let target = mean_density(mu, &zero, t)?.value;
    let mut out = Vec::new();
    for (k, row) in table.rows.iter().enumerate() {
        let h = hits.iter().filter(|v| v[k]).count() as u64;
        let p = proportion_ci(h, n_reps as u64)?;
        let value = row.eps.ln().abs() * p.mean / row.m.mean;
        let rel = ((p.stderr / p.mean).powi(2) + row.m.relative_stderr().powi(2)).sqrt();
        let normalized = EstimateWithCI::new(value, value * rel, n_reps, "normalized-hit");
        out.push(PlanarCrossCheckRow {
            eps: row.eps,
            z: normalized.z_against(target),
            process_hit: p,
            normalized,
            target,
        });
    }
    Ok(out)
}

/// Normalizing factor applied to ξ_t^ε in the Lebesgue approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// c̃_d ε^{2-d} with c̃_d = 1/ĉ_d, d ≥ 3.
    HighDim { c_hat: EstimateWithCI },
    /// m̃(ε)|log ε| with m̃ = 1/m̂, d = 2; `m_hat` must be estimated at the same ε.
    Planar { eps: f64, m_hat: EstimateWithCI },
}

impl Normalizer {
    /// Factor and its relative standard error at `eps`.
    pub fn factor(&self, eps: f64, dim: Dimension) -> Result<(f64, f64)> {
        match self {
            Normalizer::HighDim { c_hat } => {
                dim.require_at_least(3, "c_d normalizer")?;
                Ok((eps.powi(2 - dim.get() as i32) / c_hat.mean, c_hat.relative_stderr()))
            }
            Normalizer::Planar { eps: e, m_hat } => {
                dim.require_exactly(2, "m(eps) normalizer")?;
                if (e - eps).abs() > 1e-12 * eps {
                    return domain(format!("m-hat was estimated at eps = {e}, not {eps}"));
                }
                Ok((eps.ln().abs() / m_hat.mean, m_hat.relative_stderr()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LebesgueValue {
    /// normalizer · ξ_t^ε f.
    pub value: f64,
    /// ξ_t^ε f.
    pub raw: f64,
    /// Direct particle integral ξ_t f.
    pub particle_integral: f64,
    /// Fraction of particles with a neighbour closer than ε/5.
    pub close_fraction: f64,
    /// False when ε is below five times the median nearest-neighbour spacing.
    pub trusted: bool,
}

/// normalizer · ξ_t^ε f, where ξ_t^ε is rasterized with cell size `delta`
/// (default: ε/10 halved until stable).
///
/// When `support` is given, f must vanish outside it; only particles within ε
/// of the support are rasterized, over the support grown by 2ε.
pub fn lebesgue_approximation<F: Fn(&[f64]) -> f64>(
    state: &ParticleState,
    eps: f64,
    f: F,
    normalizer: &Normalizer,
    support: Option<&Window>,
    delta: Option<f64>,
) -> Result<LebesgueValue> {
    check_eps(eps)?;
    let dim = state.dim;
    let d = dim.get();
    let (factor, _) = normalizer.factor(eps, dim)?;
    let particle_integral: f64 = state.points().map(|x| f(x)).sum::<f64>() * state.particle_mass;

    let (points, window) = match support {
        Some(w) => {
            if w.dim() != d {
                return domain("support window dimension mismatch");
            }
            let grown = w.dilated(eps)?;
            let pts: Vec<f64> = state.points().filter(|x| grown.contains(x)).flatten().copied().collect();
            (pts, w.dilated(2.0 * eps)?)
        }
        None => {
            if state.is_empty() {
                return Ok(LebesgueValue {
                    value: 0.0,
                    raw: 0.0,
                    particle_integral,
                    close_fraction: 0.0,
                    trusted: false,
                });
            }
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for x in state.points() {
                for k in 0..d {
                    lo[k] = lo[k].min(x[k]);
                    hi[k] = hi[k].max(x[k]);
                }
            }
            let w = Window::new(lo.iter().map(|a| a - 2.0 * eps).collect(), hi.iter().map(|b| b + 2.0 * eps).collect())?;
            (state.positions.clone(), w)
        }
    };

    let n = points.len() / d;
    let close_fraction = if n == 0 {
        0.0
    } else {
        let index = build_index(dim, &points, eps / 5.0)?;
        let mut close = 0usize;
        for i in 0..n {
            if index.has_neighbour(i, eps / 5.0)? {
                close += 1;
            }
        }
        close as f64 / n as f64
    };
    let grid = match delta {
        Some(dl) => neighborhood_measure(dim, &points, eps, &window, dl)?,
        None => neighborhood_measure_refined(dim, &points, eps, &window, 4)?,
    };
    let raw = grid.integrate(&f);
    Ok(LebesgueValue {
        value: factor * raw,
        raw,
        particle_integral,
        close_fraction,
        trusted: n > 0 && close_fraction >= 0.5,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LebesgueRow {
    pub eps: f64,
    /// Replication mean of the normalized neighbourhood integral, normalizer error included.
    pub mean: EstimateWithCI,
    /// ∫ (μ*p_t) f.
    pub target: f64,
    pub z: f64,
    /// Median over replications with ξ_t f > 0 of |normalized - ξ_t f| / ξ_t f.
    pub median_relative_error: f64,
    /// Fraction of nonempty replications passing the spacing guard.
    pub trusted_fraction: f64,
    pub n_compared: usize,
}

/// Lebesgue approximation experiment for f = indicator of the box `support`.
pub fn lebesgue_experiment(
    mu: &DiscreteMeasure,
    t: f64,
    eps_grid: &[f64],
    support: &Window,
    normalizer: &Normalizer,
    cfg: &SimConfig,
    n_reps: usize,
    delta_fraction: Option<f64>,
) -> Result<Vec<LebesgueRow>> {
    check_config(cfg, mu.dim())?;
    check_time(t)?;
    check_grid(eps_grid, "epsilon")?;
    if n_reps < 2 {
        return domain("lebesgue experiment needs at least 2 replications");
    }
    let f = |x: &[f64]| if support.contains(x) { 1.0 } else { 0.0 };
    let per_rep = replicate(cfg.seed, n_reps, |_, rng| {
        let s = simulate_dw(mu, t, cfg, rng)?;
        eps_grid
            .iter()
            .map(|&e| lebesgue_approximation(&s, e, f, normalizer, Some(support), delta_fraction.map(|q| q * e)))
            .collect::<Result<Vec<_>>>()
    })?;
    let target = kernels::box_mass_expectation(mu, &support.lo, &support.hi, t)?;
    let mut rows = Vec::new();
    for (k, &eps) in eps_grid.iter().enumerate() {
        let (factor, rel_norm) = normalizer.factor(eps, cfg.dim)?;
        let raw: Vec<f64> = per_rep.iter().map(|v| v[k].raw).collect();
        let m = mean_ci(&raw)?;
        let mean = factor * m.mean;
        let se = factor * (m.stderr.powi(2) + (m.mean * rel_norm).powi(2)).sqrt();
        let est = EstimateWithCI::new(mean, se, n_reps, "normalized-neighbourhood");
        let errors: Vec<f64> = per_rep
            .iter()
            .filter(|v| v[k].particle_integral > 0.0)
            .map(|v| (v[k].value - v[k].particle_integral).abs() / v[k].particle_integral)
            .collect();
        let nonempty: Vec<&LebesgueValue> = per_rep.iter().map(|v| &v[k]).filter(|v| v.close_fraction > 0.0 || v.raw > 0.0).collect();
        let trusted_fraction = if nonempty.is_empty() {
            0.0
        } else {
            nonempty.iter().filter(|v| v.trusted).count() as f64 / nonempty.len() as f64
        };
        rows.push(LebesgueRow {
            eps,
            z: est.z_against(target),
            mean: est,
            target,
            median_relative_error: if errors.is_empty() { f64::NAN } else { stats::median(&errors)? },
            trusted_fraction,
            n_compared: errors.len(),
        });
    }
    Ok(rows)
}

fn check_multiplicity_window(dim: Dimension, eps: f64, h: f64) -> Result<()> {
    let ok = if dim.get() >= 3 { eps * eps / h <= 0.1 } else { eps / h <= 0.1 };
    if ok {
        Ok(())
    } else {
        domain(format!("multiplicity window violated for eps = {eps}, h = {h}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplicityRow {
    pub eps: f64,
    /// Ê(κ - 1)_+, κ the number of h-clusters hitting B_0^ε.
    pub overcount: EstimateWithCI,
    /// Ê(κ - 1)_+ / ε^{2(d-2)} for d ≥ 3.
    pub scaled: Option<EstimateWithCI>,
}

/// Ê(κ_h^ε - 1)_+ over an ε grid, sharing replications.
///
/// ξ is run to s = t - h and continued with lineages restarted, so particles
/// at time t carry the index of their ancestor at s; ancestors with surviving
/// descendants form the Cox ancestor process of intensity ξ_s/h.
pub fn multiplicity_table(
    mu: &DiscreteMeasure,
    t: f64,
    h: f64,
    eps_grid: &[f64],
    cfg: &SimConfig,
    n_reps: usize,
) -> Result<Vec<MultiplicityRow>> {
    check_config(cfg, mu.dim())?;
    check_time(t)?;
    check_grid(eps_grid, "epsilon")?;
    let dim = mu.dim();
    dim.require_at_least(2, "multiplicity")?;
    if !(h > 0.0 && h <= t) {
        return domain(format!("need 0 < h <= t, got h = {h}, t = {t}"));
    }
    for &e in eps_grid {
        check_multiplicity_window(dim, e, h)?;
    }
    if n_reps < 2 {
        return domain("multiplicity needs at least 2 replications");
    }
    let zero = origin(dim);
    let counts = replicate(cfg.seed, n_reps, |_, rng| {
        let early = simulate_dw(mu, t - h, cfg, rng)?;
        let late = evolve(&early, h, Lineage::Restart, cfg, rng)?;
        Ok(eps_grid
            .iter()
            .map(|&e| {
                let e2 = e * e;
                let mut ids: Vec<u64> = late
                    .points()
                    .zip(&late.founder_ids)
                    .filter(|(x, _)| squared_distance(x, &zero) < e2)
                    .map(|(_, &id)| id)
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                ids.len().saturating_sub(1) as f64
            })
            .collect::<Vec<f64>>())
    })?;
    let d = dim.get() as i32;
    eps_grid
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let values: Vec<f64> = counts.iter().map(|v| v[k]).collect();
            let mut overcount = mean_ci(&values)?;
            overcount.tag = "overcount".into();
            let scaled = (d >= 3).then(|| overcount.scaled(eps.powi(-2 * (d - 2))));
            Ok(MultiplicityRow { eps, overcount, scaled })
        })
        .collect()
}

/// Single-ε form of [`multiplicity_table`].
pub fn multiplicity_overcount(mu: &DiscreteMeasure, t: f64, h: f64, eps: f64, cfg: &SimConfig, n_reps: usize) -> Result<EstimateWithCI> {
    Ok(multiplicity_table(mu, t, h, &[eps], cfg, n_reps)?.remove(0).overcount)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtinctionRow {
    pub t: f64,
    pub hit: EstimateWithCI,
    /// 1 - exp(-‖μ‖/t): probability of survival, an upper envelope for hitting.
    pub survival: f64,
    /// (μ*p_t)(c) for d ≥ 3, (log t)^{-1}(μ*p_t)(c) for d = 2 and t > 1.
    pub companion: Option<f64>,
}

/// P̂{ξ_t B_c^r > 0} along a t grid, one trajectory per replication.
pub fn extinction_curve(
    mu: &DiscreteMeasure,
    center: &[f64],
    radius: f64,
    t_grid: &[f64],
    cfg: &SimConfig,
    n_reps: usize,
) -> Result<Vec<ExtinctionRow>> {
    check_config(cfg, mu.dim())?;
    check_grid(t_grid, "time")?;
    check_eps(radius)?;
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return domain("time grid must be strictly ascending");
    }
    if n_reps < 2 {
        return domain("extinction curve needs at least 2 replications");
    }
    let hits = replicate(cfg.seed, n_reps, |_, rng| {
        let path = simulate_path(mu, t_grid, cfg, rng)?;
        Ok(path.iter().map(|s| state_hits_ball(s, center, radius)).collect::<Vec<bool>>())
    })?;
    let d = mu.dim().get();
    t_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let h = hits.iter().filter(|v| v[k]).count() as u64;
            let density = mean_density(mu, center, t)?.value;
            let companion = match d {
                1 => None,
                2 => (t > 1.0).then(|| density / t.ln()),
                _ => Some(density),
            };
            Ok(ExtinctionRow {
                t,
                hit: proportion_ci(h, n_reps as u64)?,
                survival: 1.0 - kernels::extinction_probability(mu.total_mass(), t)?,
                companion,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub r: f64,
    pub ks_total_mass: TestReport,
    pub energy: TestReport,
    /// Mean mass in B_0^1 for the rescaled and direct arms.
    pub ball_mass_rescaled: EstimateWithCI,
    pub ball_mass_direct: EstimateWithCI,
    /// ∫_{B_0^1} (μ̃*p_t), μ̃ = r^{-2}μS_r.
    pub ball_mass_oracle: f64,
}

fn scaling_functionals(s: &ParticleState) -> (f64, Vec<f64>) {
    let zero = origin(s.dim);
    let m = s.particle_mass;
    let b1 = state_count_in_ball(s, &zero, 1.0) as f64 * m;
    let hit = if state_hits_ball(s, &zero, 0.2) { 1.0 } else { 0.0 };
    let b05 = state_count_in_ball(s, &zero, 0.5) as f64 * m;
    (s.total_mass(), vec![b1, hit, b05])
}

/// Compares r^{-2} ξ_{r²t} S_r under P_μ with ξ_t under P_{r^{-2}μS_r}.
///
/// The first arm runs at mass scale N/r², so after rescaling its particles
/// carry mass 1/N like the second arm; the two arms then agree in law exactly.
pub fn scaling_check(
    mu: &DiscreteMeasure,
    t: f64,
    r: f64,
    cfg: &SimConfig,
    n_reps: usize,
    n_permutations: usize,
) -> Result<ScalingReport> {
    check_config(cfg, mu.dim())?;
    check_time(t)?;
    if !(r > 0.0 && r.is_finite()) {
        return domain(format!("scale factor must be positive, got {r}"));
    }
    let scaled_n = cfg.mass_scale as f64 / (r * r);
    if (scaled_n - scaled_n.round()).abs() > 1e-9 * scaled_n || scaled_n.round() < 1.0 {
        return domain(format!("N/r² = {scaled_n} must be a positive integer"));
    }
    let cfg_a = cfg.clone().with_mass_scale(scaled_n.round() as u64);
    let mu_b = mu.rescaled(r)?;
    let arm_a = replicate(derive_seed(cfg.seed, 1), n_reps, |_, rng| {
        let s = simulate_dw(mu, r * r * t, &cfg_a, rng)?;
        Ok(scaling_functionals(&rescale_state(&s, r)?))
    })?;
    let arm_b = replicate(derive_seed(cfg.seed, 2), n_reps, |_, rng| Ok(scaling_functionals(&simulate_dw(&mu_b, t, cfg, rng)?)))?;
    let mass_a: Vec<f64> = arm_a.iter().map(|v| v.0).collect();
    let mass_b: Vec<f64> = arm_b.iter().map(|v| v.0).collect();
    let vec_a: Vec<Vec<f64>> = arm_a.iter().map(|v| v.1.clone()).collect();
    let vec_b: Vec<Vec<f64>> = arm_b.iter().map(|v| v.1.clone()).collect();
    let b1a: Vec<f64> = vec_a.iter().map(|v| v[0]).collect();
    let b1b: Vec<f64> = vec_b.iter().map(|v| v[0]).collect();
    Ok(ScalingReport {
        r,
        ks_total_mass: ks_two_sample(&mass_a, &mass_b)?,
        energy: energy_distance(&vec_a, &vec_b, n_permutations, derive_seed(cfg.seed, 3))?,
        ball_mass_rescaled: mean_ci(&b1a)?,
        ball_mass_direct: mean_ci(&b1b)?,
        ball_mass_oracle: kernels::ball_mass_expectation(&mu_b, &origin(mu.dim()), 1.0, t)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnulusRow {
    pub inner: f64,
    pub outer: f64,
    /// Mean of ξ_t S_ε(annulus)/ρ_t^ε at the size-biased particle.
    pub normalized_mass: EstimateWithCI,
    pub lebesgue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PalmProfile {
    pub eps: f64,
    pub annuli: Vec<AnnulusRow>,
    pub used_reps: usize,
    pub extinct_reps: usize,
    /// The Palm law is approximated by recentring at a mass-biased particle.
    pub note: String,
}

/// Local profile of ξ_t around a size-biased particle in d = 2, for each ε.
///
/// Each surviving replication contributes the average over `picks` uniformly
/// chosen particles, weighted by its total mass (a ratio estimator of the
/// mass-weighted recentring). `edges` are annulus radii from 0 to 1.
pub fn palm_local_profile(
    mu: &DiscreteMeasure,
    t: f64,
    eps_grid: &[f64],
    edges: &[f64],
    cfg: &SimConfig,
    n_reps: usize,
    picks: usize,
) -> Result<Vec<PalmProfile>> {
    check_config(cfg, mu.dim())?;
    mu.dim().require_exactly(2, "palm_local_profile")?;
    check_time(t)?;
    check_grid(eps_grid, "epsilon")?;
    if edges.len() < 2 || edges[0] != 0.0 || *edges.last().unwrap() != 1.0 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return domain("annulus edges must ascend from 0 to 1");
    }
    if picks == 0 || n_reps < 2 {
        return domain("palm profile needs picks >= 1 and at least 2 replications");
    }
    let width = eps_grid.iter().cloned().fold(0.0, f64::max);
    let na = edges.len() - 1;
    let ne = eps_grid.len();
    let per_rep = replicate(cfg.seed, n_reps, |_, rng| {
        let s = simulate_dw(mu, t, cfg, rng)?;
        if s.is_empty() {
            return Ok(None);
        }
        let index = build_index(s.dim, &s.positions, width)?;
        let mut acc = vec![0.0; ne * na];
        for _ in 0..picks {
            let y = s.position(rng.random_range(0..s.len())).to_vec();
            let dists = index.distances_within(&y, width)?;
            for (k, &e) in eps_grid.iter().enumerate() {
                let total = dists.iter().filter(|&&r| r < e).count() as f64;
                for a in 0..na {
                    let c = dists.iter().filter(|&&r| r >= edges[a] * e && r < edges[a + 1] * e).count() as f64;
                    acc[k * na + a] += PI * c / total;
                }
            }
        }
        for v in &mut acc {
            *v /= picks as f64;
        }
        Ok(Some((s.total_mass(), acc)))
    })?;
    let used: Vec<&(f64, Vec<f64>)> = per_rep.iter().flatten().collect();
    let extinct = per_rep.len() - used.len();
    if used.len() < 2 {
        return Err(Error::InsufficientData("fewer than 2 surviving replications".into()));
    }
    let n = used.len() as f64;
    let wbar = used.iter().map(|u| u.0).sum::<f64>() / n;
    let mut out = Vec::new();
    for (k, &eps) in eps_grid.iter().enumerate() {
        let mut annuli = Vec::new();
        for a in 0..na {
            let j = k * na + a;
            let ratio = used.iter().map(|u| u.0 * u.1[j]).sum::<f64>() / (n * wbar);
            let resid: Vec<f64> = used.iter().map(|u| u.0 * (u.1[j] - ratio) / wbar).collect();
            let se = mean_ci(&resid)?.stderr;
            annuli.push(AnnulusRow {
                inner: edges[a],
                outer: edges[a + 1],
                normalized_mass: EstimateWithCI::new(ratio, se, used.len(), "mass-weighted-ratio"),
                lebesgue: PI * (edges[a + 1].powi(2) - edges[a].powi(2)),
            });
        }
        out.push(PalmProfile {
            eps,
            annuli,
            used_reps: used.len(),
            extinct_reps: extinct,
            note: "size-biased particle recentring".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyRow {
    pub eps: f64,
    pub offset: Vec<f64>,
    pub h: f64,
    pub conditioned: usize,
    /// Frequency of ξ_t S_ε B_x^h = 0 given ξ_t B_0^ε > 0.
    pub miss: Option<EstimateWithCI>,
    pub low_power: bool,
}

fn occupancy_table(
    mu: &DiscreteMeasure,
    t: f64,
    eps_grid: &[f64],
    offsets: &[Vec<f64>],
    radii: &[f64],
    cfg: &SimConfig,
    n_reps: usize,
) -> Result<Vec<OccupancyRow>> {
    check_config(cfg, mu.dim())?;
    check_time(t)?;
    check_grid(eps_grid, "epsilon")?;
    check_grid(radii, "radius")?;
    if offsets.is_empty() {
        return domain("offset list must be nonempty");
    }
    for x in offsets {
        crate::measure::check_point(mu.dim(), x)?;
        if x.iter().all(|&c| c == 0.0) {
            return domain("offsets must be nonzero");
        }
    }
    let zero = origin(mu.dim());
    let combos: Vec<(usize, usize, usize)> = (0..eps_grid.len())
        .flat_map(|e| (0..offsets.len()).flat_map(move |o| (0..radii.len()).map(move |r| (e, o, r))))
        .collect();
    // Per replication: hit flags per ε, miss flags per combination.
    let per_rep = replicate(cfg.seed, n_reps, |_, rng| {
        let s = simulate_dw(mu, t, cfg, rng)?;
        let hit: Vec<bool> = eps_grid.iter().map(|&e| state_hits_ball(&s, &zero, e)).collect();
        let miss: Vec<bool> = combos
            .iter()
            .map(|&(e, o, r)| {
                if !hit[e] {
                    return false;
                }
                let eps = eps_grid[e];
                let c: Vec<f64> = offsets[o].iter().map(|v| v * eps).collect();
                !state_hits_ball(&s, &c, radii[r] * eps)
            })
            .collect();
        Ok((hit, miss))
    })?;
    let mut out = Vec::new();
    for (j, &(e, o, r)) in combos.iter().enumerate() {
        let conditioned = per_rep.iter().filter(|p| p.0[e]).count();
        let misses = per_rep.iter().filter(|p| p.1[j]).count();
        out.push(OccupancyRow {
            eps: eps_grid[e],
            offset: offsets[o].clone(),
            h: radii[r],
            conditioned,
            miss: if conditioned > 0 { Some(proportion_ci(misses as u64, conditioned as u64)?) } else { None },
            low_power: conditioned < MIN_CONDITIONED,
        });
    }
    Ok(out)
}

/// Conditional frequency that ξ_t S_ε misses B_x^h given ξ_t B_0^ε > 0, d ≥ 3.
pub fn occupancy_contrast(
    mu: &DiscreteMeasure,
    t: f64,
    eps_grid: &[f64],
    offsets: &[Vec<f64>],
    radii: &[f64],
    cfg: &SimConfig,
    n_reps: usize,
) -> Result<Vec<OccupancyRow>> {
    mu.dim().require_at_least(3, "occupancy_contrast")?;
    occupancy_table(mu, t, eps_grid, offsets, radii, cfg, n_reps)
}

/// The same conditional statistic in d = 2, where it stays bounded away from 1.
pub fn occupancy_contrast_planar(
    mu: &DiscreteMeasure,
    t: f64,
    eps_grid: &[f64],
    offsets: &[Vec<f64>],
    radii: &[f64],
    cfg: &SimConfig,
    n_reps: usize,
) -> Result<Vec<OccupancyRow>> {
    mu.dim().require_exactly(2, "planar occupancy companion")?;
    occupancy_table(mu, t, eps_grid, offsets, radii, cfg, n_reps)
}

/// Sub-balls (centre, radius) of B_0^1 whose rescaled masses form the battery:
/// four balls of radius 0.3 at distance 0.5 along ±e1, ±e2, then B_0^1 itself.
pub fn default_battery(dim: Dimension) -> Result<Vec<(Vec<f64>, f64)>> {
    dim.require_at_least(2, "functional battery")?;
    let d = dim.get();
    let mut balls = Vec::new();
    for (axis, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
        let mut c = vec![0.0; d];
        c[axis] = 0.5 * sign;
        balls.push((c, 0.3));
    }
    balls.push((vec![0.0; d], 1.0));
    Ok(balls)
}

/// ε^{-2} ξ_t(ε B) for each ball of the battery.
pub fn battery_values(state: &ParticleState, eps: f64, balls: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let scale = state.particle_mass / (eps * eps);
    balls
        .iter()
        .map(|(c, r)| {
            let centre: Vec<f64> = c.iter().map(|v| v * eps).collect();
            state_count_in_ball(state, &centre, r * eps) as f64 * scale
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub mu: DiscreteMeasure,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionedSample {
    pub label: String,
    pub eps: f64,
    pub values: Vec<Vec<f64>>,
    pub replications: u64,
    pub low_power: bool,
}

/// Battery vectors of ε^{-2}ξ_tS_ε under P_μ[· | ξ_t B_0^ε > 0], collected in
/// fixed-size batches until `target` samples or `max_reps` replications.
pub fn conditioned_battery(
    arm: &Arm,
    eps: f64,
    balls: &[(Vec<f64>, f64)],
    cfg: &SimConfig,
    seed: u64,
    target: usize,
    max_reps: u64,
    label: &str,
) -> Result<ConditionedSample> {
    check_config(cfg, arm.mu.dim())?;
    check_time(arm.t)?;
    check_eps(eps)?;
    const BATCH: u64 = 2048;
    let zero = origin(arm.mu.dim());
    let mut values = Vec::new();
    let mut done = 0u64;
    while values.len() < target && done < max_reps {
        let n = BATCH.min(max_reps - done);
        let batch = replicate(seed, n as usize, |i, _| {
            let mut rng = crate::rng::stream(seed, done + i);
            let s = simulate_dw(&arm.mu, arm.t, cfg, &mut rng)?;
            Ok(state_hits_ball(&s, &zero, eps).then(|| battery_values(&s, eps, balls)))
        })?;
        values.extend(batch.into_iter().flatten());
        done += n;
    }
    values.truncate(target);
    Ok(ConditionedSample {
        label: label.to_string(),
        eps,
        low_power: values.len() < target.min(MIN_CONDITIONED.max(target / 2)),
        values,
        replications: done,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceComparison {
    pub label: String,
    pub distance: TestReport,
    pub baseline: TestReport,
    /// (distance - baseline) / sqrt(sd_null² + sd_null_baseline²).
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniversalityReport {
    pub eps: f64,
    pub samples: Vec<ConditionedSample>,
    pub comparisons: Vec<DistanceComparison>,
    pub low_power: bool,
    /// The functional battery is a finite weakening of total variation on B_0^1.
    pub note: String,
}

fn compare(label: &str, a: &ConditionedSample, b: &ConditionedSample, base: &TestReport, perms: usize, seed: u64) -> Result<DistanceComparison> {
    let distance = energy_distance(&a.values, &b.values, perms, seed)?;
    let s = (distance.null_sd.unwrap_or(0.0).powi(2) + base.null_sd.unwrap_or(0.0).powi(2)).sqrt();
    Ok(DistanceComparison {
        label: label.to_string(),
        z: z_score(distance.statistic, s, base.statistic, 0.0),
        baseline: base.clone(),
        distance,
    })
}

/// Conditional local-law comparison across arms, d ≥ 3.
///
/// Every arm is compared with the first; the baseline is the distance between
/// two independent samples of the first arm. With `scale_pair = Some(r)` the
/// first arm at ε is also compared with itself at rε.
pub fn local_law_universality(
    arms: &[Arm],
    eps: f64,
    scale_pair: Option<f64>,
    cfg: &SimConfig,
    target: usize,
    max_reps: u64,
    n_permutations: usize,
) -> Result<UniversalityReport> {
    cfg.dim.require_at_least(3, "local_law_universality")?;
    if arms.len() < 2 {
        return Err(Error::Design("universality needs at least two arms".into()));
    }
    let balls = default_battery(cfg.dim)?;
    let mut samples = Vec::new();
    for (i, arm) in arms.iter().enumerate() {
        samples.push(conditioned_battery(arm, eps, &balls, cfg, derive_seed(cfg.seed, 10 + i as u64), target, max_reps, &format!("arm{i}"))?);
    }
    let split = conditioned_battery(&arms[0], eps, &balls, cfg, derive_seed(cfg.seed, 1), target, max_reps, "arm0-split")?;
    let baseline = energy_distance(&samples[0].values, &split.values, n_permutations, derive_seed(cfg.seed, 2))?;
    let mut comparisons = Vec::new();
    for i in 1..arms.len() {
        comparisons.push(compare(&format!("arm0-vs-arm{i}"), &samples[0], &samples[i], &baseline, n_permutations, derive_seed(cfg.seed, 3 + i as u64))?);
    }
    if let Some(r) = scale_pair {
        if !(r > 0.0 && r != 1.0) {
            return domain("scale pair factor must be positive and differ from 1");
        }
        let scaled = conditioned_battery(&arms[0], r * eps, &balls, cfg, derive_seed(cfg.seed, 100), target, max_reps, "arm0-scaled")?;
        comparisons.push(compare("arm0-scale-pair", &samples[0], &scaled, &baseline, n_permutations, derive_seed(cfg.seed, 101))?);
        samples.push(scaled);
    }
    samples.push(split);
    Ok(UniversalityReport {
        eps,
        low_power: samples.iter().any(|s| s.low_power),
        samples,
        comparisons,
        note: "functional battery of sub-ball masses; not a full total-variation comparison".into(),
    })
}
