//! Support geometry: fixed-radius hash-grid queries, ε-neighbourhood
//! rasterization and ball masses.

use std::collections::HashMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::measure::{check_point, squared_distance, Dimension, MAX_DIMENSION};
use crate::simulate::ParticleState;

/// Cap on rasterized cells; larger grids are rejected rather than allocated.
pub const MAX_GRID_CELLS: usize = 400_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Window {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let dim = Dimension::new(lo.len())?;
        check_point(dim, &hi)?;
        check_point(dim, &lo)?;
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return domain("window needs lo < hi on every axis");
        }
        Ok(Self { lo, hi })
    }

    /// The cube [-half, half]^d.
    pub fn cube(dim: Dimension, half: f64) -> Result<Self> {
        Self::new(vec![-half; dim.get()], vec![half; dim.get()])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(c, (a, b))| *a <= *c && *c <= *b)
    }

    /// The window grown by `margin` on every side.
    pub fn dilated(&self, margin: f64) -> Result<Self> {
        Self::new(
            self.lo.iter().map(|a| a - margin).collect(),
            self.hi.iter().map(|b| b + margin).collect(),
        )
    }

    pub fn translated(&self, v: &[f64]) -> Result<Self> {
        Self::new(
            self.lo.iter().zip(v).map(|(a, s)| a + s).collect(),
            self.hi.iter().zip(v).map(|(b, s)| b + s).collect(),
        )
    }
}

type CellKey = [i32; MAX_DIMENSION];

fn cell_key(x: &[f64], width: f64) -> Option<CellKey> {
    let mut key = [0i32; MAX_DIMENSION];
    for (k, c) in key.iter_mut().zip(x) {
        let v = (c / width).floor();
        if v.abs() > (1u32 << 30) as f64 {
            return None;
        }
        *k = v as i32;
    }
    Some(key)
}

/// Uniform hash grid over a point set; exact for query radii up to the bucket width.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    dim: Dimension,
    width: f64,
    points: Vec<f64>,
    buckets: HashMap<CellKey, Vec<u32>>,
}

/// Builds an index over flat coordinates (`dim` entries per point).
pub fn build_index(dim: Dimension, points: &[f64], bucket_width: f64) -> Result<SpatialIndex> {
    if !(bucket_width > 0.0 && bucket_width.is_finite()) {
        return domain(format!("bucket width must be positive, got {bucket_width}"));
    }
    let d = dim.get();
    if points.len() % d != 0 {
        return domain("coordinate buffer is not a whole number of points");
    }
    if points.len() / d > u32::MAX as usize {
        return domain("too many points for the spatial index");
    }
    let mut buckets: HashMap<CellKey, Vec<u32>> = HashMap::new();
    for (i, x) in points.chunks_exact(d).enumerate() {
        check_point(dim, x)?;
        let Some(key) = cell_key(x, bucket_width) else {
            return domain("point too far from the origin for this bucket width");
        };
        buckets.entry(key).or_default().push(i as u32);
    }
    Ok(SpatialIndex {
        dim,
        width: bucket_width,
        points: points.to_vec(),
        buckets,
    })
}

impl SpatialIndex {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim.get()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bucket_width(&self) -> f64 {
        self.width
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim.get();
        &self.points[i * d..(i + 1) * d]
    }

    /// Calls `visit(i, squared distance)` for every point with |x_i - x| < r;
    /// stops early when `visit` returns false.
    fn scan<F: FnMut(usize, f64) -> bool>(&self, x: &[f64], r: f64, mut visit: F) -> Result<()> {
        check_point(self.dim, x)?;
        if !(r > 0.0) {
            return domain(format!("query radius must be positive, got {r}"));
        }
        if r > self.width {
            return domain(format!("query radius {r} exceeds bucket width {}", self.width));
        }
        if self.is_empty() {
            return Ok(());
        }
        let Some(base) = cell_key(x, self.width) else {
            return Ok(());
        };
        let d = self.dim.get();
        let r2 = r * r;
        let mut offset = [-1i32; MAX_DIMENSION];
        loop {
            let mut key = base;
            for k in 0..d {
                key[k] += offset[k];
            }
            if let Some(bucket) = self.buckets.get(&key) {
                for &i in bucket {
                    let dist2 = squared_distance(self.point(i as usize), x);
                    if dist2 < r2 && !visit(i as usize, dist2) {
                        return Ok(());
                    }
                }
            }
            // Odometer over {-1, 0, 1}^d.
            let mut k = 0;
            loop {
                if k == d {
                    return Ok(());
                }
                offset[k] += 1;
                if offset[k] <= 1 {
                    break;
                }
                offset[k] = -1;
                k += 1;
            }
        }
    }

    /// True iff some indexed point lies strictly within distance `eps` of `center`.
    pub fn hits_ball(&self, center: &[f64], eps: f64) -> Result<bool> {
        let mut hit = false;
        self.scan(center, eps, |_, _| {
            hit = true;
            false
        })?;
        Ok(hit)
    }

    /// True iff some point other than point `i` lies strictly within `r` of point `i`.
    pub fn has_neighbour(&self, i: usize, r: f64) -> Result<bool> {
        let x = self.point(i).to_vec();
        let mut found = false;
        self.scan(&x, r, |j, _| {
            if j != i {
                found = true;
            }
            !found
        })?;
        Ok(found)
    }

    /// Number of points strictly within `r` of `center`.
    pub fn count_within(&self, center: &[f64], r: f64) -> Result<usize> {
        let mut n = 0;
        self.scan(center, r, |_, _| {
            n += 1;
            true
        })?;
        Ok(n)
    }

    /// Distances of all points strictly within `r` of `center`, in no particular order.
    pub fn distances_within(&self, center: &[f64], r: f64) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.scan(center, r, |_, d2| {
            out.push(d2.sqrt());
            true
        })?;
        Ok(out)
    }
}

/// Convenience wrapper over [`SpatialIndex::hits_ball`].
pub fn hits_ball(index: &SpatialIndex, center: &[f64], eps: f64) -> Result<bool> {
    index.hits_ball(center, eps)
}

/// Rasterized restriction of Lebesgue measure to an ε-neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    pub window: Window,
    pub delta: f64,
    pub eps: f64,
    pub shape: Vec<usize>,
    occupied: Vec<bool>,
}

#[derive(Serialize)]
struct GridHeader<'a> {
    window: &'a Window,
    delta: f64,
    eps: f64,
    shape: &'a [usize],
}

impl GridMeasure {
    pub fn cell_volume(&self) -> f64 {
        self.delta.powi(self.shape.len() as i32)
    }

    pub fn occupied_cells(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn total(&self) -> f64 {
        self.occupied_cells() as f64 * self.cell_volume()
    }

    pub fn is_occupied(&self, flat: usize) -> bool {
        self.occupied[flat]
    }

    pub fn cell_count(&self) -> usize {
        self.occupied.len()
    }

    fn unflatten(&self, mut flat: usize, idx: &mut [usize]) {
        for (k, n) in self.shape.iter().enumerate().rev() {
            idx[k] = flat % n;
            flat /= n;
        }
    }

    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.shape.len()];
        self.unflatten(flat, &mut idx);
        idx.iter()
            .zip(&self.window.lo)
            .map(|(&i, a)| a + (i as f64 + 0.5) * self.delta)
            .collect()
    }

    /// Σ over occupied cells of f(cell centre)·δ^d.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        let d = self.shape.len();
        let mut idx = vec![0; d];
        let mut x = vec![0.0; d];
        let mut sum = 0.0;
        for (flat, &occ) in self.occupied.iter().enumerate() {
            if !occ {
                continue;
            }
            self.unflatten(flat, &mut idx);
            for k in 0..d {
                x[k] = self.window.lo[k] + (idx[k] as f64 + 0.5) * self.delta;
            }
            sum += f(&x);
        }
        sum * self.cell_volume()
    }

    /// JSON header line followed by `cell_index[0..d-1],occupied` CSV rows for occupied cells.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let header = GridHeader {
            window: &self.window,
            delta: self.delta,
            eps: self.eps,
            shape: &self.shape,
        };
        writeln!(w, "# {}", serde_json::to_string(&header).map_err(io::Error::other)?)?;
        let d = self.shape.len();
        let cols: Vec<String> = (0..d).map(|k| format!("i{k}")).collect();
        writeln!(w, "{},occupied", cols.join(","))?;
        let mut idx = vec![0; d];
        for (flat, &occ) in self.occupied.iter().enumerate() {
            if occ {
                self.unflatten(flat, &mut idx);
                for i in &idx {
                    write!(w, "{i},")?;
                }
                writeln!(w, "1")?;
            }
        }
        Ok(())
    }
}

/// Midpoint rasterization of the ε-neighbourhood of a point set: a cell of
/// side δ is occupied iff its centre lies within ε of some point.
pub fn neighborhood_measure(dim: Dimension, points: &[f64], eps: f64, window: &Window, delta: f64) -> Result<GridMeasure> {
    let d = dim.get();
    if window.dim() != d {
        return domain("window dimension does not match the points");
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return domain(format!("epsilon must be positive, got {eps}"));
    }
    if !(delta > 0.0 && delta <= eps / 4.0) {
        return domain(format!("cell size must lie in (0, eps/4], got {delta} for eps {eps}"));
    }
    if points.len() % d != 0 {
        return domain("coordinate buffer is not a whole number of points");
    }
    let mut shape = Vec::with_capacity(d);
    let mut cells: usize = 1;
    for k in 0..d {
        let n = ((window.hi[k] - window.lo[k]) / delta).ceil() as usize;
        shape.push(n.max(1));
        cells = cells.saturating_mul(n.max(1));
    }
    if cells > MAX_GRID_CELLS {
        return domain(format!("grid of {cells} cells exceeds the cap of {MAX_GRID_CELLS}"));
    }
    for x in points.chunks_exact(d) {
        check_point(dim, x)?;
        let inside = (0..d).all(|k| x[k] - eps >= window.lo[k] && x[k] + eps <= window.hi[k]);
        if !inside {
            return domain(format!("window does not contain the eps-ball around point {x:?}"));
        }
    }

    let mut occupied = vec![false; cells];
    let eps2 = eps * eps;
    let mut strides = vec![1usize; d];
    for k in (0..d.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let mut lo_idx = vec![0usize; d];
    let mut hi_idx = vec![0usize; d];
    let mut idx = vec![0usize; d];
    for x in points.chunks_exact(d) {
        for k in 0..d {
            // Cells whose centres can be within eps along axis k.
            let a = ((x[k] - eps - window.lo[k]) / delta - 0.5).ceil().max(0.0) as usize;
            let b = ((x[k] + eps - window.lo[k]) / delta - 0.5).floor();
            if b < 0.0 {
                lo_idx[k] = 1;
                hi_idx[k] = 0;
            } else {
                lo_idx[k] = a;
                hi_idx[k] = (b as usize).min(shape[k] - 1);
            }
        }
        if (0..d).any(|k| lo_idx[k] > hi_idx[k]) {
            continue;
        }
        idx.copy_from_slice(&lo_idx);
        'cells: loop {
            let mut r2 = 0.0;
            let mut flat = 0;
            for k in 0..d {
                let c = window.lo[k] + (idx[k] as f64 + 0.5) * delta;
                r2 += (c - x[k]) * (c - x[k]);
                flat += idx[k] * strides[k];
            }
            if r2 < eps2 {
                occupied[flat] = true;
            }
            let mut k = d;
            loop {
                if k == 0 {
                    break 'cells;
                }
                k -= 1;
                if idx[k] < hi_idx[k] {
                    idx[k] += 1;
                    break;
                }
                idx[k] = lo_idx[k];
            }
        }
    }
    Ok(GridMeasure {
        window: window.clone(),
        delta,
        eps,
        shape,
        occupied,
    })
}

/// Rasterization starting at δ = ε/10 and halving until the total changes by
/// less than 0.5% (at most `max_halvings` times).
pub fn neighborhood_measure_refined(
    dim: Dimension,
    points: &[f64],
    eps: f64,
    window: &Window,
    max_halvings: usize,
) -> Result<GridMeasure> {
    let mut delta = eps / 10.0;
    let mut grid = neighborhood_measure(dim, points, eps, window, delta)?;
    for _ in 0..max_halvings {
        delta *= 0.5;
        let next = neighborhood_measure(dim, points, eps, window, delta)?;
        let change = (next.total() - grid.total()).abs();
        grid = next;
        if change <= 0.005 * grid.total() {
            break;
        }
    }
    Ok(grid)
}

/// Total mass of particles strictly inside the ball B_center^r.
pub fn ball_mass(state: &ParticleState, center: &[f64], r: f64) -> Result<f64> {
    check_point(state.dim, center)?;
    if !(r > 0.0) {
        return domain(format!("ball radius must be positive, got {r}"));
    }
    Ok(state_count_in_ball(state, center, r) as f64 * state.particle_mass)
}

/// True iff some particle lies strictly within `eps` of `center` (linear scan).
pub fn state_hits_ball(state: &ParticleState, center: &[f64], eps: f64) -> bool {
    let e2 = eps * eps;
    state.points().any(|x| squared_distance(x, center) < e2)
}

/// Number of particles strictly within `r` of `center` (linear scan).
pub fn state_count_in_ball(state: &ParticleState, center: &[f64], r: f64) -> usize {
    let r2 = r * r;
    state.points().filter(|x| squared_distance(x, center) < r2).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dim(d: usize) -> Dimension {
        Dimension::new(d).unwrap()
    }

    #[test]
    fn empty_index_never_hits() {
        let idx = build_index(dim(2), &[], 0.5).unwrap();
        assert!(!idx.hits_ball(&[0.0, 0.0], 0.5).unwrap());
    }

    #[test]
    fn open_ball_convention() {
        let idx = build_index(dim(2), &[0.5, 0.0], 1.0).unwrap();
        assert!(!idx.hits_ball(&[0.0, 0.0], 0.5).unwrap());
        assert!(idx.hits_ball(&[0.0, 0.0], 0.500_001).unwrap());
        assert!(idx.hits_ball(&[0.5, 0.0], 1e-9).unwrap());
        assert!(idx.hits_ball(&[0.0, 0.0], 2.0).is_err());
    }

    #[test]
    fn neighbour_query_excludes_self() {
        let idx = build_index(dim(1), &[0.0, 0.3, 5.0], 0.5).unwrap();
        assert!(idx.has_neighbour(0, 0.5).unwrap());
        assert!(!idx.has_neighbour(2, 0.5).unwrap());
        assert_eq!(idx.count_within(&[0.1], 0.5).unwrap(), 2);
    }

    #[test]
    fn single_disc_area() {
        let w = Window::cube(dim(2), 1.0).unwrap();
        let g = neighborhood_measure(dim(2), &[0.0, 0.0], 0.5, &w, 0.005).unwrap();
        assert!((g.total() - PI / 4.0).abs() < 0.01 * PI / 4.0);
        let fine = neighborhood_measure(dim(2), &[0.0, 0.0], 0.5, &w, 0.0025).unwrap();
        assert!((fine.total() - PI / 4.0).abs() <= (g.total() - PI / 4.0).abs() + 1e-4);
    }

    #[test]
    fn disjoint_discs_add() {
        let w = Window::cube(dim(2), 2.0).unwrap();
        let g = neighborhood_measure(dim(2), &[-1.0, 0.0, 1.0, 0.0], 0.5, &w, 0.005).unwrap();
        assert!((g.total() - 2.0 * PI * 0.25).abs() < 0.01 * 2.0 * PI * 0.25);
    }

    #[test]
    fn window_too_small_is_rejected() {
        let w = Window::cube(dim(2), 1.0).unwrap();
        assert!(neighborhood_measure(dim(2), &[0.8, 0.0], 0.5, &w, 0.01).is_err());
        assert!(neighborhood_measure(dim(2), &[0.0, 0.0], 0.5, &w, 0.2).is_err());
    }

    #[test]
    fn no_points_zero_measure() {
        let w = Window::cube(dim(3), 1.0).unwrap();
        let g = neighborhood_measure(dim(3), &[], 0.2, &w, 0.05).unwrap();
        assert_eq!(g.total(), 0.0);
        assert_eq!(g.integrate(|_| 1.0), 0.0);
    }

    #[test]
    fn integrate_half_window() {
        // One disc covering the whole window.
        let w = Window::cube(dim(2), 0.25).unwrap();
        let big = Window::cube(dim(2), 2.0).unwrap();
        let g = neighborhood_measure(dim(2), &[0.0, 0.0], 1.5, &big, 0.01).unwrap();
        let inside = |x: &[f64]| if w.contains(x) { 1.0 } else { 0.0 };
        let vol = g.integrate(inside);
        assert!((vol - w.volume()).abs() < 4.0 * 0.5 * 0.01 + 1e-12);
        let half = g.integrate(|x| if x[0] < 0.0 { 1.0 } else { 0.0 });
        assert!((half - 0.5 * g.total()).abs() < 3.0 * 0.01);
        assert_eq!(g.integrate(|_| 0.0), 0.0);
        assert!((g.integrate(|_| 1.0) - g.total()).abs() < 1e-9);
    }

    #[test]
    fn csv_export() {
        let w = Window::cube(dim(1), 1.0).unwrap();
        let g = neighborhood_measure(dim(1), &[0.0], 0.2, &w, 0.05).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# {"));
        assert_eq!(lines[1], "i0,occupied");
        assert_eq!(lines.len() - 2, g.occupied_cells());
    }

    #[test]
    fn ball_mass_cases() {
        let mut s = ParticleState::empty(dim(2), 0.25, 1.0);
        assert_eq!(ball_mass(&s, &[0.0, 0.0], 1.0).unwrap(), 0.0);
        s.push(&[0.1, 0.0], 0);
        s.push(&[0.0, -0.2], 1);
        s.push(&[1.0, 0.0], 2);
        assert_eq!(ball_mass(&s, &[0.0, 0.0], 1.0).unwrap(), 0.5);
        assert_eq!(ball_mass(&s, &[0.0, 0.0], 5.0).unwrap(), s.total_mass());
    }
}
