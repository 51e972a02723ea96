//! Experiment spec files: parsing, defaults and pre-flight validation.

use std::path::PathBuf;

use dwsim::kernels::bound_times;
use dwsim::measure::MAX_DIMENSION;
use dwsim::{Dimension, DiscreteMeasure, Scheme, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SUBCOMMANDS: [&str; 13] = [
    "moments",
    "hit",
    "sandwich",
    "cd",
    "m-table",
    "lebesgue",
    "multiplicity",
    "extinction",
    "scaling",
    "palm",
    "contrast",
    "universality",
    "forest-check",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub x: Vec<f64>,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub t: f64,
    #[serde(default)]
    pub atoms: Option<Vec<Atom>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub subcommand: String,
    pub dimension: usize,
    pub seed: Option<u64>,
    /// Particle mass scale N.
    pub mass_scale: Option<u64>,
    pub reps: Option<usize>,
    pub t: Option<f64>,
    pub times: Option<Vec<f64>>,
    pub epsilon: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
    /// Initial measure; δ_0 when omitted.
    pub atoms: Option<Vec<Atom>>,
    /// Evaluation points or ball centres; the origin when omitted.
    pub points: Option<Vec<Vec<f64>>>,
    pub arms: Option<Vec<ArmSpec>>,
    pub scheme: Option<Scheme>,
    pub max_particles: Option<usize>,
    pub rejection_budget: Option<u64>,
    /// Hit mode: "direct" or "cluster".
    pub mode: Option<String>,
    pub clusters: Option<usize>,
    pub roots_per_cluster: Option<usize>,
    /// Ball radius (extinction) or truncation radius R (m-table, lebesgue in d = 2).
    pub radius: Option<f64>,
    pub cross_check_reps: Option<usize>,
    /// Half side of the box whose indicator is integrated (lebesgue).
    pub box_half: Option<f64>,
    /// Given normalizer (ĉ_d for d ≥ 3); estimated when omitted.
    pub normalizer_value: Option<f64>,
    pub normalizer_stderr: Option<f64>,
    pub normalizer_reps: Option<usize>,
    pub delta_fraction: Option<f64>,
    /// Scale factor r (scaling, universality scale pair).
    pub scale: Option<f64>,
    pub permutations: Option<usize>,
    pub picks: Option<usize>,
    pub edges: Option<Vec<f64>>,
    pub offsets: Option<Vec<Vec<f64>>>,
    pub target: Option<usize>,
    pub max_reps: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, key: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            key: key.into(),
            message: message.into(),
        });
    }
}

/// A parsed spec together with the SHA-256 of its source text.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub spec: ExperimentSpec,
    pub hash: String,
}

pub fn parse_spec(text: &str) -> Result<LoadedSpec, CliError> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| CliError::Validation(format!("spec parse error: {e}")))?;
    Ok(LoadedSpec {
        spec,
        hash: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

fn d_check(r: &mut ValidationReport, key: &str, v: &[f64], d: usize) {
    if v.len() != d {
        r.push(key, format!("expected {d} coordinates, got {}", v.len()));
    }
    if v.iter().any(|c| !c.is_finite()) {
        r.push(key, "coordinates must be finite");
    }
}

fn positive_grid(r: &mut ValidationReport, key: &str, g: Option<&Vec<f64>>) -> Option<Vec<f64>> {
    match g {
        None => {
            r.push(key, "missing");
            None
        }
        Some(g) if g.is_empty() => {
            r.push(key, "grid is empty");
            None
        }
        Some(g) => {
            for (i, v) in g.iter().enumerate() {
                if !(*v > 0.0 && v.is_finite()) {
                    r.push(format!("{key}[{i}]"), format!("must be positive and finite, got {v}"));
                }
            }
            Some(g.clone())
        }
    }
}

fn atoms_check(r: &mut ValidationReport, key: &str, atoms: &[Atom], d: usize) {
    if atoms.is_empty() {
        r.push(key, "initial measure has no atoms");
    }
    for (i, a) in atoms.iter().enumerate() {
        d_check(r, &format!("{key}[{i}].x"), &a.x, d);
        if !(a.w > 0.0 && a.w.is_finite()) {
            r.push(format!("{key}[{i}].w"), format!("weight must be positive, got {}", a.w));
        }
    }
}

fn min_dim(r: &mut ValidationReport, d: usize, min: usize, sub: &str) {
    if d < min {
        r.push("dimension", format!("`{sub}` needs d >= {min}, got d = {d}"));
    }
}

fn exact_dim(r: &mut ValidationReport, d: usize, want: usize, sub: &str) {
    if d != want {
        r.push("dimension", format!("`{sub}` needs d = {want}, got d = {d}"));
    }
}

impl ExperimentSpec {
    pub fn dim(&self) -> Result<Dimension, CliError> {
        Dimension::new(self.dimension).map_err(|e| CliError::Validation(format!("dimension: {e}")))
    }

    pub fn mu(&self) -> Result<DiscreteMeasure, CliError> {
        measure_from(self.dim()?, self.atoms.as_deref())
    }

    pub fn eps(&self) -> Vec<f64> {
        self.epsilon.clone().unwrap_or_default()
    }

    pub fn time(&self) -> f64 {
        self.t.unwrap_or(1.0)
    }

    pub fn points_or_origin(&self) -> Vec<Vec<f64>> {
        self.points.clone().unwrap_or_else(|| vec![vec![0.0; self.dimension]])
    }

    pub fn sim_config(&self, seed: u64) -> Result<SimConfig, CliError> {
        let mut c = SimConfig::new(self.dim()?, self.mass_scale.unwrap_or(1000), seed)?;
        if let Some(s) = self.scheme {
            c = c.with_scheme(s);
        }
        if let Some(m) = self.max_particles {
            c = c.with_max_particles(m);
        }
        if let Some(b) = self.rejection_budget {
            c = c.with_rejection_budget(b);
        }
        Ok(c)
    }

    /// Schema, dimension gating and regime-guard checks; runs no simulation.
    pub fn validate(&self, seed_override: Option<u64>) -> ValidationReport {
        let mut r = ValidationReport::default();
        let sub = self.subcommand.as_str();
        if !SUBCOMMANDS.contains(&sub) {
            r.push("subcommand", format!("unknown subcommand `{sub}`"));
        }
        if self.seed.is_none() && seed_override.is_none() {
            r.push("seed", "missing; seeds are mandatory");
        }
        let d = self.dimension;
        if d == 0 || d > MAX_DIMENSION {
            r.push("dimension", format!("must lie in 1..={MAX_DIMENSION}, got {d}"));
            return r;
        }
        if self.mass_scale == Some(0) {
            r.push("mass_scale", "must be positive");
        }
        if let Some(a) = &self.atoms {
            atoms_check(&mut r, "atoms", a, d);
        }
        if let Some(p) = &self.points {
            if p.is_empty() {
                r.push("points", "list is empty");
            }
            for (i, x) in p.iter().enumerate() {
                d_check(&mut r, &format!("points[{i}]"), x, d);
            }
        }
        if let Some(t) = self.t {
            if !(t > 0.0 && t.is_finite()) {
                r.push("t", format!("must be positive, got {t}"));
            }
        }
        if let Some(a) = &self.arms {
            for (i, arm) in a.iter().enumerate() {
                if !(arm.t > 0.0 && arm.t.is_finite()) {
                    r.push(format!("arms[{i}].t"), format!("must be positive, got {}", arm.t));
                }
                if let Some(at) = &arm.atoms {
                    atoms_check(&mut r, &format!("arms[{i}].atoms"), at, d);
                }
            }
        }
        let t = self.time();
        let reps_at_least = |r: &mut ValidationReport, min: usize| {
            if let Some(n) = self.reps {
                if n < min {
                    r.push("reps", format!("must be at least {min}, got {n}"));
                }
            }
        };
        match sub {
            "moments" => {
                positive_grid(&mut r, "times", self.times.as_ref().or(Some(&vec![t])));
            }
            "hit" => {
                positive_grid(&mut r, "epsilon", self.epsilon.as_ref());
                reps_at_least(&mut r, 100);
                if let Some(m) = &self.mode {
                    if m != "direct" && m != "cluster" {
                        r.push("mode", format!("must be `direct` or `cluster`, got `{m}`"));
                    }
                }
            }
            "sandwich" => {
                min_dim(&mut r, d, 2, sub);
                if let Some(g) = positive_grid(&mut r, "epsilon", self.epsilon.as_ref()) {
                    if d >= 2 {
                        for (i, e) in g.iter().enumerate() {
                            if bound_times(t, *e, Dimension::new(d).expect("checked")).is_err() {
                                r.push(format!("epsilon[{i}]"), format!("outside the bound window for t = {t}"));
                            }
                        }
                    }
                }
            }
            "cd" => {
                min_dim(&mut r, d, 3, sub);
                reps_at_least(&mut r, 100);
                if let Some(g) = positive_grid(&mut r, "epsilon", self.epsilon.as_ref()) {
                    let times: Vec<f64> = match &self.arms {
                        Some(a) => a.iter().map(|a| a.t).collect(),
                        None => vec![t],
                    };
                    for (i, e) in g.iter().enumerate() {
                        for tt in &times {
                            if *e >= tt.sqrt() {
                                r.push(format!("epsilon[{i}]"), format!("must be below sqrt(t) = {}", tt.sqrt()));
                            }
                        }
                    }
                    let npts = self.points.as_ref().map_or(1, |p| p.len());
                    let mut distinct_t = times.clone();
                    distinct_t.sort_by(f64::total_cmp);
                    distinct_t.dedup();
                    if npts * distinct_t.len() < 2 {
                        r.push("points", "constancy needs at least two distinct (x, t) pairs");
                    }
                }
            }
            "m-table" => {
                exact_dim(&mut r, d, 2, sub);
                if let Some(g) = positive_grid(&mut r, "epsilon", self.epsilon.as_ref()) {
                    if g.iter().any(|e| *e >= 0.5) {
                        r.push("epsilon", "m(eps) needs eps < 1/2");
                    }
                    if g.windows(2).any(|w| !(w[1] < w[0])) {
                        r.push("epsilon", "grid must be strictly descending");
                    }
                }
                if self.radius.is_some_and(|x| x < 4.0) {
                    r.push("radius", "truncation radius must be at least 4");
                }
            }
            "lebesgue" => {
                min_dim(&mut r, d, 2, sub);
                positive_grid(&mut r, "epsilon", self.epsilon.as_ref());
                if self.box_half.is_some_and(|b| !(b > 0.0)) {
                    r.push("box_half", "must be positive");
                }
                if self.normalizer_value.is_some() && d == 2 {
                    r.push("normalizer_value", "d = 2 normalizers are estimated per epsilon; remove this key");
                }
                if self.delta_fraction.is_some_and(|q| !(q > 0.0 && q <= 0.25)) {
                    r.push("delta_fraction", "must lie in (0, 1/4]");
                }
            }
            "multiplicity" => {
                min_dim(&mut r, d, 2, sub);
                let e = positive_grid(&mut r, "epsilon", self.epsilon.as_ref());
                let h = positive_grid(&mut r, "h", self.h.as_ref());
                if let (Some(e), Some(h)) = (e, h) {
                    for (j, hv) in h.iter().enumerate() {
                        if *hv > t {
                            r.push(format!("h[{j}]"), format!("must not exceed t = {t}"));
                        }
                        for (i, ev) in e.iter().enumerate() {
                            let (ratio, rule) = if d >= 3 { (ev * ev / hv, "eps^2/h") } else { (ev / hv, "eps/h") };
                            if ratio > 0.1 {
                                r.push(
                                    format!("epsilon[{i}]"),
                                    format!("regime guard {rule} <= 0.1 violated at h[{j}] = {hv}: {rule} = {ratio}"),
                                );
                            }
                        }
                    }
                }
            }
            "extinction" => {
                if let Some(g) = positive_grid(&mut r, "times", self.times.as_ref()) {
                    if g.windows(2).any(|w| !(w[1] > w[0])) {
                        r.push("times", "grid must be strictly ascending");
                    }
                }
                if self.radius.is_some_and(|x| !(x > 0.0)) {
                    r.push("radius", "must be positive");
                }
            }
            "scaling" => {
                let s = self.scale.unwrap_or(0.5);
                if !(s > 0.0 && s.is_finite()) {
                    r.push("scale", "must be positive");
                } else {
                    let n = self.mass_scale.unwrap_or(1000) as f64 / (s * s);
                    if (n - n.round()).abs() > 1e-9 * n || n.round() < 1.0 {
                        r.push("scale", format!("mass_scale / scale^2 = {n} must be a positive integer"));
                    }
                }
                reps_at_least(&mut r, 20);
            }
            "palm" => {
                exact_dim(&mut r, d, 2, sub);
                positive_grid(&mut r, "epsilon", self.epsilon.as_ref());
                if let Some(e) = &self.edges {
                    if e.len() < 2 || e[0] != 0.0 || *e.last().unwrap() != 1.0 || e.windows(2).any(|w| !(w[1] > w[0])) {
                        r.push("edges", "annulus edges must ascend from 0 to 1");
                    }
                }
            }
            "contrast" => {
                min_dim(&mut r, d, 2, sub);
                positive_grid(&mut r, "epsilon", self.epsilon.as_ref());
                positive_grid(&mut r, "h", self.h.as_ref());
                match &self.offsets {
                    Some(o) if !o.is_empty() => {
                        for (i, x) in o.iter().enumerate() {
                            d_check(&mut r, &format!("offsets[{i}]"), x, d);
                            if x.iter().all(|c| *c == 0.0) {
                                r.push(format!("offsets[{i}]"), "offset must be nonzero");
                            }
                        }
                    }
                    _ => r.push("offsets", "missing or empty"),
                }
            }
            "universality" => {
                min_dim(&mut r, d, 3, sub);
                match positive_grid(&mut r, "epsilon", self.epsilon.as_ref()) {
                    Some(g) if g.len() != 1 => r.push("epsilon", "universality takes a single epsilon"),
                    _ => {}
                }
                if self.arms.as_ref().is_none_or(|a| a.len() < 2) {
                    r.push("arms", "at least two arms are required");
                }
            }
            "forest-check" => reps_at_least(&mut r, 20),
            _ => {}
        }
        r
    }
}

pub fn measure_from(dim: Dimension, atoms: Option<&[Atom]>) -> Result<DiscreteMeasure, CliError> {
    match atoms {
        None => Ok(DiscreteMeasure::unit_at_origin(dim)),
        Some(a) => Ok(DiscreteMeasure::from_atoms(dim, a.iter().map(|a| (a.x.as_slice(), a.w)))?),
    }
}
