//! Branching Brownian particle approximation of the DW-process.
//!
//! Particles carry mass 1/N, move as standard Brownian motions and undergo
//! critical binary branching at rate 2N (0 or 2 offspring, probability ½ each).
//! Founders are Poissonized: an atom of weight w starts Poisson(N·w) particles.
//!
//! Two exact samplers are provided. `EventDriven` follows every branching
//! event. `ReducedTree` samples only lineages that survive to the target time:
//! a particle survives a span τ with probability 1/(1+Nτ), and a surviving
//! lineage with remaining time r splits into two surviving lineages at rate
//! N/(1+Nr). Both produce the same law at the observation times; the reduced
//! tree costs O(particles at the end) instead of O(N² t) events.

use std::io::{self, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Geometric, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::measure::{check_point, Dimension, DiscreteMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    ReducedTree,
    EventDriven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dim: Dimension,
    /// Particles per unit mass.
    pub mass_scale: u64,
    pub seed: u64,
    pub max_particles: usize,
    pub rejection_budget: u64,
    #[serde(default)]
    pub scheme: Scheme,
}

impl SimConfig {
    pub const DEFAULT_MAX_PARTICLES: usize = 20_000_000;
    pub const DEFAULT_REJECTION_BUDGET: u64 = 100_000_000;

    pub fn new(dim: Dimension, mass_scale: u64, seed: u64) -> Result<Self> {
        let cfg = Self {
            dim,
            mass_scale,
            seed,
            max_particles: Self::DEFAULT_MAX_PARTICLES,
            rejection_budget: Self::DEFAULT_REJECTION_BUDGET,
            scheme: Scheme::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_max_particles(mut self, cap: usize) -> Self {
        self.max_particles = cap;
        self
    }

    pub fn with_rejection_budget(mut self, budget: u64) -> Self {
        self.rejection_budget = budget;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mass_scale(mut self, n: u64) -> Self {
        self.mass_scale = n;
        self
    }

    /// Branching events per particle per unit time; always 2N.
    pub fn branching_rate(&self) -> f64 {
        2.0 * self.mass_scale as f64
    }

    pub fn particle_mass(&self) -> f64 {
        1.0 / self.mass_scale as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.mass_scale == 0 {
            return domain("mass_scale must be at least 1");
        }
        if self.max_particles == 0 {
            return domain("max_particles must be positive");
        }
        if self.rejection_budget == 0 {
            return domain("rejection_budget must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub dim: Dimension,
    /// Flat coordinates, `dim` entries per particle.
    pub positions: Vec<f64>,
    pub particle_mass: f64,
    pub time: f64,
    /// Founding ancestor of each particle.
    pub founder_ids: Vec<u64>,
}

impl ParticleState {
    pub fn empty(dim: Dimension, particle_mass: f64, time: f64) -> Self {
        Self {
            dim,
            positions: Vec::new(),
            particle_mass,
            time,
            founder_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.founder_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.founder_ids.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.len() as f64 * self.particle_mass
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let d = self.dim.get();
        &self.positions[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.positions.chunks_exact(self.dim.get())
    }

    pub fn push(&mut self, x: &[f64], founder: u64) {
        self.positions.extend_from_slice(x);
        self.founder_ids.push(founder);
    }

    /// Number of distinct founder tags.
    pub fn founder_count(&self) -> usize {
        let mut ids = self.founder_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn to_measure(&self) -> DiscreteMeasure {
        let mut m = DiscreteMeasure::zero(self.dim);
        for x in self.points() {
            m.push(x, self.particle_mass).expect("particle positions are finite");
        }
        m
    }

    /// Writes one CSV record per particle: `rep_id,time,x0..x{d-1},mass,founder_id`.
    pub fn write_csv<W: Write>(&self, w: &mut W, rep_id: u64) -> io::Result<()> {
        for (x, id) in self.points().zip(&self.founder_ids) {
            write!(w, "{rep_id},{}", self.time)?;
            for c in x {
                write!(w, ",{c}")?;
            }
            writeln!(w, ",{},{id}", self.particle_mass)?;
        }
        Ok(())
    }

    pub fn csv_header(dim: Dimension) -> String {
        let mut h = String::from("rep_id,time");
        for k in 0..dim.get() {
            h.push_str(&format!(",x{k}"));
        }
        h.push_str(",mass,founder_id");
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSample {
    pub particles: ParticleState,
    pub root: Vec<f64>,
    pub age: f64,
    /// Founders run until one survived, including the accepted one.
    pub trials: u64,
}

fn check_time(t: f64, allow_zero: bool) -> Result<()> {
    let ok = t.is_finite() && (t > 0.0 || (allow_zero && t == 0.0));
    if ok {
        Ok(())
    } else {
        domain(format!("invalid time {t}"))
    }
}

fn check_dims(cfg: &SimConfig, dim: Dimension) -> Result<()> {
    cfg.validate()?;
    if cfg.dim != dim {
        return domain(format!("config dimension {} does not match input dimension {}", cfg.dim.get(), dim.get()));
    }
    Ok(())
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

/// Work stack shared by both tree samplers.
#[derive(Default)]
struct Stack {
    pos: Vec<f64>,
    rem: Vec<f64>,
    cur: Vec<f64>,
}

impl Stack {
    fn start(&mut self, x: &[f64], tau: f64) {
        self.pos.clear();
        self.rem.clear();
        self.pos.extend_from_slice(x);
        self.rem.push(tau);
        self.cur.resize(x.len(), 0.0);
    }

    fn pop(&mut self) -> Option<f64> {
        let rem = self.rem.pop()?;
        let d = self.cur.len();
        let base = self.pos.len() - d;
        self.cur.copy_from_slice(&self.pos[base..]);
        self.pos.truncate(base);
        Some(rem)
    }

    fn push_current(&mut self, rem: f64) {
        self.pos.extend_from_slice(&self.cur);
        self.rem.push(rem);
    }

    fn diffuse<R: Rng + ?Sized>(&mut self, rng: &mut R, span: f64) {
        let sd = span.sqrt();
        for c in &mut self.cur {
            let z: f64 = rng.sample(StandardNormal);
            *c += sd * z;
        }
    }
}

fn cap_error(count: usize, cap: usize) -> Error {
    Error::ParticleCap { count, cap }
}

/// Descendants at remaining time 0 of a lineage known to survive `tau`.
fn grow_reduced<R: Rng + ?Sized>(
    x: &[f64],
    tau: f64,
    n: f64,
    tag: u64,
    out: &mut ParticleState,
    cap: usize,
    stack: &mut Stack,
    rng: &mut R,
) -> Result<()> {
    stack.start(x, tau);
    while let Some(rem) = stack.pop() {
        let u: f64 = rng.random();
        // P(no split while remaining time runs from rem down to r) = (1+Nr)/(1+N rem).
        let split = ((1.0 + n * rem) * u - 1.0) / n;
        if split <= 0.0 {
            stack.diffuse(rng, rem);
            if out.len() >= cap {
                return Err(cap_error(out.len() + 1, cap));
            }
            out.push(&stack.cur, tag);
        } else {
            stack.diffuse(rng, rem - split);
            stack.push_current(split);
            stack.push_current(split);
        }
    }
    Ok(())
}

/// Full event-by-event evolution of one particle for time `tau`.
fn grow_events<R: Rng + ?Sized>(
    x: &[f64],
    tau: f64,
    rate: f64,
    tag: u64,
    out: &mut ParticleState,
    cap: usize,
    stack: &mut Stack,
    rng: &mut R,
) -> Result<()> {
    stack.start(x, tau);
    while let Some(rem) = stack.pop() {
        let u: f64 = rng.random();
        let life = -(1.0 - u).ln() / rate;
        if life >= rem {
            stack.diffuse(rng, rem);
            if out.len() >= cap {
                return Err(cap_error(out.len() + 1, cap));
            }
            out.push(&stack.cur, tag);
        } else {
            stack.diffuse(rng, life);
            if rng.random_bool(0.5) {
                if out.len() + stack.rem.len() + 2 > cap {
                    return Err(cap_error(out.len() + stack.rem.len() + 2, cap));
                }
                stack.push_current(rem - life);
                stack.push_current(rem - life);
            }
        }
    }
    Ok(())
}

/// Evolves one particle at `x` for `tau` and appends its descendants to `out`.
fn evolve_particle<R: Rng + ?Sized>(
    x: &[f64],
    tau: f64,
    cfg: &SimConfig,
    tag: u64,
    out: &mut ParticleState,
    stack: &mut Stack,
    rng: &mut R,
) -> Result<()> {
    let n = cfg.mass_scale as f64;
    match cfg.scheme {
        Scheme::ReducedTree => {
            if rng.random::<f64>() * (1.0 + n * tau) < 1.0 {
                grow_reduced(x, tau, n, tag, out, cfg.max_particles, stack, rng)?;
            }
            Ok(())
        }
        Scheme::EventDriven => grow_events(x, tau, cfg.branching_rate(), tag, out, cfg.max_particles, stack, rng),
    }
}

/// Particle approximation of ξ_t under P_μ.
pub fn simulate_dw<R: Rng + ?Sized>(mu: &DiscreteMeasure, t: f64, cfg: &SimConfig, rng: &mut R) -> Result<ParticleState> {
    check_dims(cfg, mu.dim())?;
    check_time(t, true)?;
    let n = cfg.mass_scale as f64;
    let expected = n * mu.total_mass();
    if expected > cfg.max_particles as f64 {
        return Err(cap_error(expected.ceil() as usize, cfg.max_particles));
    }
    let mut out = ParticleState::empty(mu.dim(), cfg.particle_mass(), t);
    let mut stack = Stack::default();
    let mut next_id = 0u64;
    for (u, w) in mu.atoms() {
        if t == 0.0 {
            let k = poisson(rng, n * w);
            if out.len() as u64 + k > cfg.max_particles as u64 {
                return Err(cap_error(out.len() + k as usize, cfg.max_particles));
            }
            for _ in 0..k {
                out.push(u, next_id);
                next_id += 1;
            }
            continue;
        }
        match cfg.scheme {
            Scheme::ReducedTree => {
                // Founders surviving to t are a thinned Poisson sample.
                let k = poisson(rng, n * w / (1.0 + n * t));
                for _ in 0..k {
                    grow_reduced(u, t, n, next_id, &mut out, cfg.max_particles, &mut stack, rng)?;
                    next_id += 1;
                }
            }
            Scheme::EventDriven => {
                let k = poisson(rng, n * w);
                for _ in 0..k {
                    grow_events(u, t, cfg.branching_rate(), next_id, &mut out, cfg.max_particles, &mut stack, rng)?;
                    next_id += 1;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lineage {
    /// Descendants inherit their parent's founder tag.
    Keep,
    /// Descendants are tagged by the index of their parent in the input state.
    Restart,
}

/// Markov continuation of `state` over a further time `dt`.
pub fn evolve<R: Rng + ?Sized>(
    state: &ParticleState,
    dt: f64,
    lineage: Lineage,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<ParticleState> {
    check_dims(cfg, state.dim)?;
    check_time(dt, true)?;
    if (state.particle_mass * cfg.mass_scale as f64 - 1.0).abs() > 1e-9 {
        return domain("state particle mass does not match the configured mass scale");
    }
    let mut out = ParticleState::empty(state.dim, state.particle_mass, state.time + dt);
    if dt == 0.0 {
        out.positions = state.positions.clone();
        out.founder_ids = match lineage {
            Lineage::Keep => state.founder_ids.clone(),
            Lineage::Restart => (0..state.len() as u64).collect(),
        };
        return Ok(out);
    }
    let mut stack = Stack::default();
    for (i, (x, &id)) in state.points().zip(&state.founder_ids).enumerate() {
        let tag = match lineage {
            Lineage::Keep => id,
            Lineage::Restart => i as u64,
        };
        evolve_particle(x, dt, cfg, tag, &mut out, &mut stack, rng)?;
    }
    Ok(out)
}

/// One trajectory observed at ascending `times`.
pub fn simulate_path<R: Rng + ?Sized>(
    mu: &DiscreteMeasure,
    times: &[f64],
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Vec<ParticleState>> {
    if times.is_empty() {
        return domain("times must be nonempty");
    }
    if times.windows(2).any(|w| !(w[1] >= w[0])) {
        return domain("times must be ascending");
    }
    let mut out = Vec::with_capacity(times.len());
    let mut current = simulate_dw(mu, times[0], cfg, rng)?;
    for w in times.windows(2) {
        let next = evolve(&current, w[1] - w[0], Lineage::Keep, cfg, rng)?;
        out.push(std::mem::replace(&mut current, next));
    }
    out.push(current);
    Ok(out)
}

/// A single founder of mass 1/N run from `x` for time `t`, without conditioning.
pub fn run_founder<R: Rng + ?Sized>(x: &[f64], t: f64, cfg: &SimConfig, rng: &mut R) -> Result<ParticleState> {
    check_point(cfg.dim, x)?;
    cfg.validate()?;
    check_time(t, false)?;
    let mut out = ParticleState::empty(cfg.dim, cfg.particle_mass(), t);
    let mut stack = Stack::default();
    evolve_particle(x, t, cfg, 0, &mut out, &mut stack, rng)?;
    Ok(out)
}

/// A cluster of age `t` rooted at `x`: one founder conditioned to survive to `t`.
///
/// Under `EventDriven` founders are rerun until one survives. Under
/// `ReducedTree` the number of rejected founders is drawn from its geometric
/// law and the survivor is sampled directly from the reduced tree, which has
/// the same joint law as the rejection loop.
pub fn sample_cluster<R: Rng + ?Sized>(x: &[f64], t: f64, cfg: &SimConfig, rng: &mut R) -> Result<ClusterSample> {
    check_point(cfg.dim, x)?;
    cfg.validate()?;
    check_time(t, false)?;
    let n = cfg.mass_scale as f64;
    let mut out = ParticleState::empty(cfg.dim, cfg.particle_mass(), t);
    let mut stack = Stack::default();
    let trials = match cfg.scheme {
        Scheme::ReducedTree => {
            let survival = 1.0 / (1.0 + n * t);
            let failures = Geometric::new(survival)
                .map_err(|e| Error::Domain(format!("survival probability {survival}: {e}")))?
                .sample(rng);
            if failures >= cfg.rejection_budget {
                return Err(Error::RejectionBudget {
                    budget: cfg.rejection_budget,
                    accepted: 0,
                    frequency: 0.0,
                });
            }
            grow_reduced(x, t, n, 0, &mut out, cfg.max_particles, &mut stack, rng)?;
            failures + 1
        }
        Scheme::EventDriven => {
            let mut trials = 0;
            loop {
                if trials == cfg.rejection_budget {
                    return Err(Error::RejectionBudget {
                        budget: cfg.rejection_budget,
                        accepted: 0,
                        frequency: 0.0,
                    });
                }
                trials += 1;
                grow_events(x, t, cfg.branching_rate(), 0, &mut out, cfg.max_particles, &mut stack, rng)?;
                if !out.is_empty() {
                    break trials;
                }
            }
        }
    };
    Ok(ClusterSample {
        particles: out,
        root: x.to_vec(),
        age: t,
        trials,
    })
}

/// Poisson(‖μ‖/t) clusters of age t with roots drawn from μ/‖μ‖.
pub fn poisson_forest<R: Rng + ?Sized>(
    mu: &DiscreteMeasure,
    t: f64,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Vec<ClusterSample>> {
    check_dims(cfg, mu.dim())?;
    check_time(t, false)?;
    if mu.is_empty() {
        return domain("poisson_forest needs a nonzero initial measure");
    }
    let weights: Vec<f64> = mu.atoms().map(|(_, w)| w).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Domain(e.to_string()))?;
    let k = poisson(rng, mu.total_mass() / t);
    let mut out = Vec::with_capacity(k as usize);
    let mut total = 0usize;
    for _ in 0..k {
        let root = mu.position(pick.sample(rng));
        let c = sample_cluster(root, t, cfg, rng)?;
        total += c.particles.len();
        if total > cfg.max_particles {
            return Err(cap_error(total, cfg.max_particles));
        }
        out.push(c);
    }
    Ok(out)
}

/// Superposition of clusters, tagged by cluster index.
pub fn superpose(dim: Dimension, clusters: &[ClusterSample], particle_mass: f64, time: f64) -> ParticleState {
    let mut out = ParticleState::empty(dim, particle_mass, time);
    for (k, c) in clusters.iter().enumerate() {
        out.positions.extend_from_slice(&c.particles.positions);
        out.founder_ids.extend(std::iter::repeat_n(k as u64, c.particles.len()));
    }
    out
}

/// Cox ancestor sample with intensity (state measure)/h: each particle
/// contributes Poisson(mass/h) unit atoms at its site.
pub fn ancestors<R: Rng + ?Sized>(state: &ParticleState, h: f64, rng: &mut R) -> Result<DiscreteMeasure> {
    if !(h > 0.0 && h.is_finite()) {
        return domain(format!("look-back horizon must be positive, got {h}"));
    }
    let mean = state.particle_mass / h;
    let mut m = DiscreteMeasure::zero(state.dim);
    for x in state.points() {
        let k = poisson(rng, mean);
        if k > 0 {
            m.push(x, k as f64)?;
        }
    }
    Ok(m)
}

/// The state r^{-2} ξ S_r: positions divided by r, masses and time by r².
pub fn rescale_state(state: &ParticleState, r: f64) -> Result<ParticleState> {
    if !(r > 0.0 && r.is_finite()) {
        return domain(format!("scale factor must be positive, got {r}"));
    }
    Ok(ParticleState {
        dim: state.dim,
        positions: state.positions.iter().map(|x| x / r).collect(),
        particle_mass: state.particle_mass / (r * r),
        time: state.time / (r * r),
        founder_ids: state.founder_ids.clone(),
    })
}
