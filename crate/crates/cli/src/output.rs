//! Result rows, CSV/JSON artifacts, schema documentation and plot scripts.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Record {
    pub arm: String,
    pub quantity: String,
    pub epsilon: Option<f64>,
    pub t: Option<f64>,
    pub h: Option<f64>,
    pub x: Option<Vec<f64>>,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub n_reps: Option<usize>,
    pub flags: Vec<String>,
}

impl Record {
    pub fn new(quantity: &str, estimate: f64) -> Self {
        Self {
            arm: "main".into(),
            quantity: quantity.into(),
            estimate,
            ..Default::default()
        }
    }

    pub fn arm(mut self, arm: impl Into<String>) -> Self {
        self.arm = arm.into();
        self
    }

    pub fn eps(mut self, e: f64) -> Self {
        self.epsilon = Some(e);
        self
    }

    pub fn t(mut self, t: f64) -> Self {
        self.t = Some(t);
        self
    }

    pub fn h(mut self, h: f64) -> Self {
        self.h = Some(h);
        self
    }

    pub fn x(mut self, x: &[f64]) -> Self {
        self.x = Some(x.to_vec());
        self
    }

    pub fn se(mut self, se: f64, n: usize) -> Self {
        self.stderr = Some(se);
        self.n_reps = Some(n);
        self
    }

    pub fn reps(mut self, n: usize) -> Self {
        self.n_reps = Some(n);
        self
    }

    pub fn flag(mut self, on: bool, name: &str) -> Self {
        if on {
            self.flags.push(name.into());
        }
        self
    }

    pub fn est(quantity: &str, e: &dwsim::EstimateWithCI) -> Self {
        Self::new(quantity, e.mean).se(e.stderr, e.n_reps)
    }
}

pub const LOW_POWER: &str = "low-power";

const BASE_COLUMNS: [(&str, &str); 6] = [
    ("experiment_id", "subcommand that produced the row"),
    ("arm", "experiment arm or comparison label"),
    ("quantity", "name of the estimated or evaluated quantity"),
    ("epsilon", "ball radius epsilon, blank when not applicable"),
    ("t", "time, blank when not applicable"),
    ("h", "secondary radius or look-back horizon, blank when not applicable"),
];

const TAIL_COLUMNS: [(&str, &str); 6] = [
    ("estimate", "point estimate or exact value"),
    ("stderr", "standard error, blank for exact values"),
    ("n_reps", "number of replications behind the estimate"),
    ("flags", "semicolon-separated flags: upper-bound-only, untrusted, low-power, fail"),
    ("seed", "root seed of the run"),
    ("spec_hash", "SHA-256 of the spec file text"),
];

pub fn columns(dim: usize) -> Vec<String> {
    let mut c: Vec<String> = BASE_COLUMNS.iter().map(|(n, _)| n.to_string()).collect();
    c.extend((0..dim).map(|k| format!("x{k}")));
    c.extend(TAIL_COLUMNS.iter().map(|(n, _)| n.to_string()));
    c
}

/// Quantities each subcommand can emit.
pub fn quantities(sub: &str) -> &'static [&'static str] {
    match sub {
        "moments" => &["heat_kernel", "mean_density", "covariance_total_integral", "laplace_total_mass", "extinction_probability"],
        "hit" => &["hit_probability", "cluster_hit_probability"],
        "sandwich" => &["cluster_hit", "normalized_hit", "ratio_t", "ratio_t_eps", "band"],
        "cd" => &["hit_probability", "ratio", "c_hat", "c_tilde", "max_abs_z", "dispersion"],
        "m-table" => &["m_hat", "m_tilde", "tail_bound", "normalized_hit", "target"],
        "lebesgue" => &["normalizer", "normalized_mean", "target", "z", "median_relative_error", "trusted_fraction"],
        "multiplicity" => &["overcount", "overcount_scaled"],
        "extinction" => &["hit_probability", "survival", "companion"],
        "scaling" => &["ks_statistic", "ks_p_value", "energy_statistic", "energy_p_value", "ball_mass_rescaled", "ball_mass_direct", "ball_mass_oracle"],
        "palm" => &["annulus_mass", "annulus_area", "extinct_reps"],
        "contrast" => &["miss_frequency", "conditioned"],
        "universality" => &["energy_distance", "baseline", "z", "conditioned"],
        "forest-check" => &["ks_statistic", "ks_p_value", "mean_mass_forest", "mean_mass_direct"],
        _ => &[],
    }
}

pub fn schema(sub: &str, dim: usize) -> Value {
    let mut cols: Vec<Value> = BASE_COLUMNS.iter().map(|(n, d)| json!({"name": n, "description": d})).collect();
    for k in 0..dim {
        cols.push(json!({"name": format!("x{k}"), "description": format!("coordinate {k} of the evaluation point or offset")}));
    }
    cols.extend(TAIL_COLUMNS.iter().map(|(n, d)| json!({"name": n, "description": d})));
    json!({
        "schema_version": 1,
        "subcommand": sub,
        "file": "results.csv",
        "columns": cols,
        "quantities": quantities(sub),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv(path: &Path, sub: &str, dim: usize, seed: u64, hash: &str, rows: &[Record]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_record(columns(dim)).map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        let mut f = vec![sub.to_string(), r.arm.clone(), r.quantity.clone(), opt(r.epsilon), opt(r.t), opt(r.h)];
        for k in 0..dim {
            f.push(opt(r.x.as_ref().and_then(|x| x.get(k).copied())));
        }
        f.push(r.estimate.to_string());
        f.push(opt(r.stderr));
        f.push(r.n_reps.map(|n| n.to_string()).unwrap_or_default());
        f.push(r.flags.join(";"));
        f.push(seed.to_string());
        f.push(hash.to_string());
        w.write_record(&f).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Gnuplot script plotting every quantity of results.csv against epsilon
/// (or t when the epsilon column is blank), one PNG per quantity.
pub fn write_plot_script(path: &Path, sub: &str, dim: usize) -> Result<(), CliError> {
    let cols = columns(dim);
    let idx = |name: &str| cols.iter().position(|c| c == name).expect("known column") + 1;
    let mut f = fs::File::create(path).map_err(|e| CliError::Io(e.to_string()))?;
    let q = quantities(sub);
    let mut s = String::new();
    s.push_str("#!/usr/bin/env gnuplot\n");
    s.push_str(&format!("# Plots for the `{sub}` experiment; run from the output directory.\n"));
    s.push_str("set datafile separator ','\nset terminal pngcairo size 800,600\nset key left top\nset logscale x\n");
    for name in q {
        s.push_str(&format!(
            "set output '{sub}_{name}.png'\nset title '{name}'\nplot 'results.csv' every ::1 using (strcol({qc}) eq '{name}' ? (strcol({ec}) ne '' ? ${ec} : ${tc}) : 1/0):{vc}:(strcol({sc}) ne '' ? ${sc} : 0) with yerrorbars title '{name}'\n",
            qc = idx("quantity"),
            ec = idx("epsilon"),
            tc = idx("t"),
            vc = idx("estimate"),
            sc = idx("stderr"),
        ));
    }
    f.write_all(s.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}
