//! Finite atomic measures on ℝ^d and the dimension newtype shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub const MAX_DIMENSION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Dimension(usize);

impl Dimension {
    pub fn new(d: usize) -> Result<Self> {
        if (1..=MAX_DIMENSION).contains(&d) {
            Ok(Self(d))
        } else {
            domain(format!("dimension {d} outside 1..={MAX_DIMENSION}"))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Rejects dimensions below `min`; used by results that only hold for d ≥ 2 or d ≥ 3.
    pub fn require_at_least(self, min: usize, what: &str) -> Result<()> {
        if self.0 >= min {
            Ok(())
        } else {
            domain(format!("{what} requires d >= {min}, got d = {}", self.0))
        }
    }

    pub fn require_exactly(self, d: usize, what: &str) -> Result<()> {
        if self.0 == d {
            Ok(())
        } else {
            domain(format!("{what} requires d = {d}, got d = {}", self.0))
        }
    }
}

impl TryFrom<usize> for Dimension {
    type Error = crate::Error;

    fn try_from(d: usize) -> Result<Self> {
        Dimension::new(d)
    }
}

impl From<Dimension> for usize {
    fn from(d: Dimension) -> usize {
        d.0
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn check_point(dim: Dimension, x: &[f64]) -> Result<()> {
    if x.len() != dim.get() {
        return domain(format!("point has {} coordinates, expected {}", x.len(), dim.get()));
    }
    if x.iter().any(|c| !c.is_finite()) {
        return domain("point coordinates must be finite");
    }
    Ok(())
}

/// A finite measure Σ w_i δ_{u_i} with strictly positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    dim: Dimension,
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn zero(dim: Dimension) -> Self {
        Self {
            dim,
            positions: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn dirac(position: &[f64], weight: f64) -> Result<Self> {
        let dim = Dimension::new(position.len())?;
        let mut m = Self::zero(dim);
        m.push(position, weight)?;
        Ok(m)
    }

    /// Unit point mass at the origin of ℝ^d.
    pub fn unit_at_origin(dim: Dimension) -> Self {
        Self::dirac(&vec![0.0; dim.get()], 1.0).expect("origin is a valid atom")
    }

    pub fn from_atoms<'a, I>(dim: Dimension, atoms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], f64)>,
    {
        let mut m = Self::zero(dim);
        for (x, w) in atoms {
            m.push(x, w)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, position: &[f64], weight: f64) -> Result<()> {
        check_point(self.dim, position)?;
        if !(weight > 0.0 && weight.is_finite()) {
            return domain(format!("atom weight must be positive and finite, got {weight}"));
        }
        self.positions.extend_from_slice(position);
        self.weights.push(weight);
        Ok(())
    }

    pub fn dim(&self) -> Dimension {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let d = self.dim.get();
        &self.positions[i * d..(i + 1) * d]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.positions
            .chunks_exact(self.dim.get())
            .zip(self.weights.iter().copied())
    }

    /// The measure r^{-2} μ S_r: atoms move to u/r and weights scale by r^{-2}.
    pub fn rescaled(&self, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return domain(format!("scale factor must be positive, got {r}"));
        }
        Ok(Self {
            dim: self.dim,
            positions: self.positions.iter().map(|x| x / r).collect(),
            weights: self.weights.iter().map(|w| w / (r * r)).collect(),
        })
    }

    /// Sum of two measures on the same space.
    pub fn plus(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return domain("cannot add measures of different dimensions");
        }
        let mut out = self.clone();
        out.positions.extend_from_slice(&other.positions);
        out.weights.extend_from_slice(&other.weights);
        Ok(out)
    }
}
