//! Radial meshes on `[0, 1]` and ball-average quadrature.
//!
//! Every node owns the dual cell bounded by the midpoints to its neighbours
//! (`0` and `1` close the first and last cells). The quadrature weight of a
//! node is the exact `N r^(N-1) dr` measure of its cell, so the weights are
//! nonnegative, sum to one, and match the flux form of the radial Laplacian
//! in [`crate::operators`]: the discrete Laplacian of any field averages to
//! zero under these weights.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_INTERVALS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    dim: u32,
    gamma: f64,
    nodes: Vec<f64>,
    faces: Vec<f64>,
    weights: Vec<f64>,
    lap_lower: Vec<f64>,
    lap_upper: Vec<f64>,
}

/// `hi^n - lo^n` without cancellation when `hi` and `lo` are close.
fn power_difference(hi: f64, lo: f64, n: u32) -> f64 {
    let mut sum = 0.0;
    let mut hp = 1.0;
    // sum_k hi^k lo^(n-1-k), Horner in lo
    for _ in 0..n {
        sum = sum * lo + hp;
        hp *= hi;
    }
    (hi - lo) * sum
}

/// Builds a mesh with `m` intervals, nodes `r_i = (i/m)^gamma`, in dimension `n`.
pub fn build_grid(m: usize, gamma: f64, n: u32) -> Result<RadialGrid> {
    if m < MIN_INTERVALS {
        return Err(Error::TooCoarse(m));
    }
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(Error::InvalidGrid(format!("grading exponent must be >= 1, got {gamma}")));
    }
    if n < 3 {
        return Err(Error::InvalidGrid(format!("dimension must be >= 3, got {n}")));
    }
    let mut nodes: Vec<f64> = (0..=m)
        .map(|i| (i as f64 / m as f64).powf(gamma))
        .collect();
    nodes[0] = 0.0;
    nodes[m] = 1.0;
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("nodes are not strictly increasing".into()));
    }
    RadialGrid::from_nodes_unchecked(nodes, gamma, n)
}

impl RadialGrid {
    /// Mesh from explicit nodes; they must start at 0, end at 1 and increase.
    pub fn from_nodes(nodes: Vec<f64>, n: u32) -> Result<Self> {
        if nodes.len() < MIN_INTERVALS + 1 {
            return Err(Error::TooCoarse(nodes.len().saturating_sub(1)));
        }
        if nodes[0] != 0.0 || *nodes.last().unwrap() != 1.0 {
            return Err(Error::InvalidGrid("nodes must start at 0 and end at 1".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("nodes are not strictly increasing".into()));
        }
        if n < 3 {
            return Err(Error::InvalidGrid(format!("dimension must be >= 3, got {n}")));
        }
        Self::from_nodes_unchecked(nodes, f64::NAN, n)
    }

    fn from_nodes_unchecked(nodes: Vec<f64>, gamma: f64, n: u32) -> Result<Self> {
        let m = nodes.len() - 1;
        let mut faces = Vec::with_capacity(m + 2);
        faces.push(0.0);
        for w in nodes.windows(2) {
            faces.push(0.5 * (w[0] + w[1]));
        }
        faces.push(1.0);

        let weights: Vec<f64> = (0..=m)
            .map(|i| power_difference(faces[i + 1], faces[i], n))
            .collect();

        let nf = n as f64;
        let mut lap_lower = vec![0.0; m + 1];
        let mut lap_upper = vec![0.0; m + 1];
        for i in 0..=m {
            if i < m {
                let h = nodes[i + 1] - nodes[i];
                lap_upper[i] = nf * faces[i + 1].powi(n as i32 - 1) / (h * weights[i]);
            }
            if i > 0 {
                let h = nodes[i] - nodes[i - 1];
                lap_lower[i] = nf * faces[i].powi(n as i32 - 1) / (h * weights[i]);
            }
        }
        Ok(Self {
            dim: n,
            gamma,
            nodes,
            faces,
            weights,
            lap_lower,
            lap_upper,
        })
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }
    /// Grading exponent; NaN for meshes built from explicit nodes.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    /// Number of intervals `M` (the grid has `M + 1` nodes).
    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn h_min(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
    pub fn h_max(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Coefficients of the three-point radial Laplacian:
    /// `(Lf)_i = upper_i (f_{i+1} - f_i) - lower_i (f_i - f_{i-1})`.
    pub(crate) fn laplacian_coefficients(&self) -> (&[f64], &[f64]) {
        (&self.lap_lower, &self.lap_upper)
    }

    /// Nodes inside `[0, r]`.
    pub fn count_nodes_below(&self, r: f64) -> usize {
        self.nodes.partition_point(|&x| x <= r)
    }

    /// Index of the node closest to `r`.
    pub fn nearest_node(&self, r: f64) -> usize {
        let j = self.nodes.partition_point(|&x| x < r);
        if j == 0 {
            0
        } else if j >= self.nodes.len() {
            self.nodes.len() - 1
        } else if r - self.nodes[j - 1] <= self.nodes[j] - r {
            j - 1
        } else {
            j
        }
    }

    /// Tolerance for second-order discretization comparisons, `10 h_max^2`.
    pub fn discretization_tolerance(&self) -> f64 {
        10.0 * self.h_max() * self.h_max()
    }

    /// Field of `f(r_i)`.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.nodes.iter().map(|&r| f(r)).collect())
    }

    /// Linear interpolation of `field` at radius `r`.
    pub fn interpolate(&self, field: &Field, r: f64) -> f64 {
        assert_eq!(field.len(), self.len());
        let r = r.clamp(0.0, 1.0);
        let j = self.nodes.partition_point(|&x| x < r);
        if j == 0 {
            return field[0];
        }
        let (r0, r1) = (self.nodes[j - 1], self.nodes[j]);
        let s = (r - r0) / (r1 - r0);
        field[j - 1] + s * (field[j] - field[j - 1])
    }
}

/// Nodal values `u(r_i)` at one time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Field(pub Vec<f64>);

impl Field {
    pub fn zeros(len: usize) -> Self {
        Field(vec![0.0; len])
    }
    pub fn constant(len: usize, value: f64) -> Self {
        Field(vec![value; len])
    }
    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
    /// First non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.0.iter().copied().enumerate().find(|(_, v)| !v.is_finite())
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.0.iter().map(|&v| f(v)).collect())
    }
}

impl Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Field {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Field {
    fn from(v: Vec<f64>) -> Self {
        Field(v)
    }
}

/// Ball average `N int_0^1 r^(N-1) f dr`.
pub fn ball_average(grid: &RadialGrid, f: &[f64]) -> f64 {
    assert_eq!(f.len(), grid.len(), "field does not live on this grid");
    grid.weights.iter().zip(f).map(|(w, v)| w * v).sum()
}

/// `N int_lo^hi r^(N-1) f dr`, with each node's value held over the part of its
/// cell that falls inside the window. Not divided by the window volume.
pub fn restricted_average(grid: &RadialGrid, f: &[f64], r_lo: f64, r_hi: f64) -> Result<f64> {
    assert_eq!(f.len(), grid.len(), "field does not live on this grid");
    if !(r_lo >= 0.0 && r_hi <= 1.0 && r_lo < r_hi) {
        return Err(Error::EmptyWindow { lo: r_lo, hi: r_hi });
    }
    let n = grid.dim;
    let mut total = 0.0;
    for (i, &v) in f.iter().enumerate() {
        let (a, b) = (grid.faces[i], grid.faces[i + 1]);
        if b <= r_lo || a >= r_hi {
            continue;
        }
        let w = if a >= r_lo && b <= r_hi {
            grid.weights[i]
        } else {
            power_difference(b.min(r_hi), a.max(r_lo), n)
        };
        total += w * v;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn power_difference_matches_direct() {
        for (hi, lo, n) in [(0.7f64, 0.2f64, 3u32), (1.0, 0.999, 5), (1e-3, 0.0, 4)] {
            let direct = hi.powi(n as i32) - lo.powi(n as i32);
            assert_relative_eq!(power_difference(hi, lo, n), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn weights_normalised_and_nonnegative() {
        for (m, gamma, n) in [(2048, 1.0, 3), (1024, 2.0, 4), (16, 3.0, 7)] {
            let g = build_grid(m, gamma, n).unwrap();
            let total: f64 = g.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "sum = {total}");
            assert!(g.weights().iter().all(|&w| w >= 0.0));
            assert_eq!(g.nodes()[0], 0.0);
            assert_eq!(*g.nodes().last().unwrap(), 1.0);
            assert_eq!(g.len(), m + 1);
        }
    }

    #[test]
    fn graded_grid_concentrates_near_origin() {
        let g = build_grid(1024, 2.0, 4).unwrap();
        let first = g.nodes()[1] - g.nodes()[0];
        let last = 1.0 - g.nodes()[1023];
        assert!(first < last * 1e-3);
    }

    #[test]
    fn too_coarse() {
        assert_eq!(build_grid(8, 1.0, 3).unwrap_err(), Error::TooCoarse(8));
        assert!(build_grid(64, 0.5, 3).is_err());
        assert!(build_grid(64, 1.0, 2).is_err());
    }

    #[test]
    fn average_of_constant_and_square() {
        let g = build_grid(2048, 1.0, 3).unwrap();
        let one = Field::constant(g.len(), 1.0);
        assert_relative_eq!(ball_average(&g, &one), 1.0, max_relative = 1e-13);
        let sq = g.sample(|r| r * r);
        assert!((ball_average(&g, &sq) - 0.6).abs() < 1.0 / (2048.0f64 * 2048.0));
    }

    #[test]
    fn quadrature_is_second_order() {
        for (gamma, n) in [(1.0, 3u32), (2.0, 4)] {
            let exact = n as f64 / (n as f64 + 2.0);
            let err = |m| {
                let g = build_grid(m, gamma, n).unwrap();
                (ball_average(&g, &g.sample(|r| r * r)) - exact).abs()
            };
            let ratio = err(256) / err(512);
            assert!((3.5..=4.5).contains(&ratio), "gamma {gamma}: ratio {ratio}");
        }
    }

    #[test]
    fn restricted_examples() {
        let g = build_grid(2048, 1.0, 3).unwrap();
        let one = Field::constant(g.len(), 1.0);
        assert_relative_eq!(restricted_average(&g, &one, 0.0, 1.0).unwrap(), 1.0, max_relative = 1e-13);
        assert_relative_eq!(restricted_average(&g, &one, 0.0, 0.5).unwrap(), 0.125, max_relative = 1e-13);
        let inv = g.sample(|r| if r > 0.0 { 1.0 / r } else { 0.0 });
        let v = restricted_average(&g, &inv, 0.1, 1.0).unwrap();
        assert!((v - 1.485).abs() < 1e-5, "{v}");
    }

    #[test]
    fn restricted_rejects_empty_window() {
        let g = build_grid(64, 1.0, 3).unwrap();
        let one = Field::constant(g.len(), 1.0);
        assert!(matches!(
            restricted_average(&g, &one, 0.5, 0.5),
            Err(Error::EmptyWindow { .. })
        ));
        assert!(restricted_average(&g, &one, 0.5, 1.5).is_err());
    }

    #[test]
    fn interpolation_hits_nodes() {
        let g = build_grid(64, 2.0, 3).unwrap();
        let f = g.sample(|r| 3.0 * r + 1.0);
        assert_relative_eq!(g.interpolate(&f, 0.5), 2.5, max_relative = 1e-14);
        assert_eq!(g.interpolate(&f, 0.0), 1.0);
        assert_eq!(g.interpolate(&f, 1.0), 4.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nonnegative_fields_average_nonnegative(
                vals in proptest::collection::vec(0.0f64..1e6, 65),
                gamma in 1.0f64..3.0,
                n in 3u32..8,
            ) {
                let g = build_grid(64, gamma, n).unwrap();
                prop_assert!(ball_average(&g, &vals) >= 0.0);
            }

            #[test]
            fn full_window_equals_ball_average(
                vals in proptest::collection::vec(-1e3f64..1e3, 129),
                gamma in 1.0f64..3.0,
            ) {
                let g = build_grid(128, gamma, 4).unwrap();
                let a = ball_average(&g, &vals);
                let b = restricted_average(&g, &vals, 0.0, 1.0).unwrap();
                let scale: f64 = vals.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
                prop_assert!((a - b).abs() <= 1e-14 * scale);
            }
        }
    }
}
