//! Spiky initial data `u0 = lambda * phi_delta` and user-supplied profiles.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, RadialGrid};
use crate::model::ModelParams;
use crate::operators::radial_laplacian;
use crate::quadrature::integrate_unit;

/// `phi_delta(r) = r^-a` on `[delta, 1]`, capped by a parabola on `[0, delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpikeProfile {
    pub n: u32,
    pub p: f64,
    pub a: f64,
    pub delta: f64,
    pub lambda: f64,
}

impl SpikeProfile {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            n: params.n(),
            p: params.p(),
            a: params.a(),
            delta: params.delta(),
            lambda: params.lambda(),
        }
    }

    /// Evaluates `phi_delta` (without the amplitude `lambda`).
    pub fn eval_phi(&self, r: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::OutOfDomain(r));
        }
        Ok(self.phi(r))
    }

    fn phi(&self, r: f64) -> f64 {
        let (a, d) = (self.a, self.delta);
        if r >= d {
            r.powf(-a)
        } else {
            d.powf(-a) * (1.0 + 0.5 * a) - 0.5 * a * d.powf(-(a + 2.0)) * r * r
        }
    }

    /// `phi_delta'(r)`.
    pub fn dphi(&self, r: f64) -> f64 {
        let (a, d) = (self.a, self.delta);
        if r >= d {
            -a * r.powf(-a - 1.0)
        } else {
            -a * d.powf(-(a + 2.0)) * r
        }
    }

    /// Peak value `u0(0) = lambda delta^-a (1 + a/2)`.
    pub fn peak(&self) -> f64 {
        self.lambda * self.phi(0.0)
    }

    /// Exact ball average of `phi_delta^zeta`.
    pub fn power_average(&self, zeta: f64) -> f64 {
        phi_power_average(self.n, self.a, self.delta, zeta)
    }

    /// Nodal values of `lambda * phi_delta`.
    pub fn build_u0(&self, grid: &RadialGrid) -> Field {
        grid.sample(|r| self.lambda * self.phi(r))
    }
}

/// `N int_0^1 r^(N-1) phi_delta(r)^zeta dr` by splitting at `delta`.
///
/// The outer piece is closed form; the inner piece reduces, with `r = delta s`,
/// to `N delta^(N - a zeta) int_0^1 s^(N-1) ((1 + a/2) - (a/2) s^2)^zeta ds`,
/// whose smooth integrand is integrated with a 64-point Gauss rule.
pub fn phi_power_average(n: u32, a: f64, delta: f64, zeta: f64) -> f64 {
    let nf = n as f64;
    let e = nf - a * zeta;
    let outer = if e.abs() < 1e-14 {
        -nf * delta.ln()
    } else {
        nf * (1.0 - delta.powf(e)) / e
    };
    let (c0, c1) = (1.0 + 0.5 * a, 0.5 * a);
    let inner_unit = integrate_unit(|s| s.powi(n as i32 - 1) * (c0 - c1 * s * s).powf(zeta));
    outer + nf * delta.powf(e) * inner_unit
}

/// Tabulated radial profile `(r, u)` with monotone cubic interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct TableProfile {
    r: Vec<f64>,
    u: Vec<f64>,
    slopes: Vec<f64>,
}

impl TableProfile {
    pub fn new(r: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        if r.len() != u.len() || r.len() < 2 {
            return Err(Error::InvalidInitialData(
                "need at least two (r, u) pairs of equal length".into(),
            ));
        }
        if r[0] != 0.0 || *r.last().unwrap() != 1.0 {
            return Err(Error::InvalidInitialData("radii must cover 0 and 1".into()));
        }
        if r.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInitialData("radii must be strictly increasing".into()));
        }
        if u.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInitialData("values must be finite and nonnegative".into()));
        }
        let slopes = pchip_slopes(&r, &u);
        Ok(Self { r, u, slopes })
    }

    /// Parses whitespace- or comma-separated `r u` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Vec::new();
        let mut u = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(Error::InvalidInitialData(format!(
                    "line {}: expected two columns, found {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| {
                    Error::InvalidInitialData(format!("line {}: {e}", lineno + 1))
                })
            };
            r.push(parse(cols[0])?);
            u.push(parse(cols[1])?);
        }
        Self::new(r, u)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        let j = self.r.partition_point(|&v| v <= x).clamp(1, self.r.len() - 1);
        let (x0, x1) = (self.r[j - 1], self.r[j]);
        let h = x1 - x0;
        let t = (x - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.u[j - 1] + h10 * h * self.slopes[j - 1] + h01 * self.u[j] + h11 * h * self.slopes[j]
    }
}

/// Fritsch-Carlson slopes: the interpolant is monotone wherever the data is.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    if n == 2 {
        return vec![del[0]; 2];
    }
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        if del[i - 1] * del[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(h[0], h[1], del[0], del[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    d
}

/// Initial condition for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    Spike(SpikeProfile),
    Constant(f64),
    Table(TableProfile),
}

impl InitialData {
    pub fn build(&self, grid: &RadialGrid) -> Field {
        match self {
            InitialData::Spike(s) => s.build_u0(grid),
            InitialData::Constant(c) => Field::constant(grid.len(), *c),
            InitialData::Table(t) => grid.sample(|r| t.eval(r)),
        }
    }
}

/// Outcome of a pointwise inequality check on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InequalityReport {
    /// Smallest scaled margin over the checked nodes (negative means violated).
    pub min_margin: f64,
    pub worst_radius: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn inequality_report(grid: &RadialGrid, margins: impl Iterator<Item = (usize, f64)>) -> InequalityReport {
    let tolerance = 10.0 * grid.h_min();
    let (worst, min_margin) = margins
        .fold((0, f64::INFINITY), |acc, (i, m)| if m < acc.1 { (i, m) } else { acc });
    InequalityReport {
        min_margin,
        worst_radius: grid.nodes()[worst],
        tolerance,
        passed: min_margin >= -tolerance,
    }
}

/// Checks `Delta_r phi_delta >= -N a phi_delta^p` at the grid nodes.
///
/// The margin at node `i` is `(Delta phi + N a phi^p) / (N a phi^p)`; the
/// boundary node `r = 1` is skipped because `phi_delta` does not satisfy the
/// Neumann condition there.
pub fn check_deltaphi_bound(profile: &SpikeProfile, grid: &RadialGrid) -> Result<InequalityReport> {
    let inside = grid.count_nodes_below(profile.delta);
    if inside < 8 {
        return Err(Error::UnresolvedSpike { inside });
    }
    let phi = grid.sample(|r| profile.phi(r));
    let lap = radial_laplacian(grid, &phi);
    let na = grid.dim() as f64 * profile.a;
    let m = grid.intervals();
    Ok(inequality_report(
        grid,
        (0..m).map(|i| {
            let reaction = na * phi[i].powf(profile.p);
            (i, (lap[i] + reaction) / reaction)
        }),
    ))
}

/// Checks `Delta_r u0 + (d/lambda) u0^p >= 2 u0^p` node by node, scaled by the
/// magnitude of the terms involved. `d_over_lambda` is the constant `D`.
pub fn check_supercritical(grid: &RadialGrid, u0: &Field, p: f64, d_over_lambda: f64) -> InequalityReport {
    let lap = radial_laplacian(grid, u0);
    let m = grid.intervals();
    inequality_report(
        grid,
        (0..m).map(|i| {
            let up = u0[i].max(0.0).powf(p);
            let margin = lap[i] + d_over_lambda * up - 2.0 * up;
            let scale = lap[i].abs() + (d_over_lambda.abs() + 2.0) * up;
            (i, if scale > 0.0 { margin / scale } else { 0.0 })
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ball_average, build_grid};
    use crate::model::{validate_params, RawParams};
    use approx::assert_relative_eq;

    fn profile(n: u32, p: f64, delta: f64, lambda: f64) -> SpikeProfile {
        SpikeProfile {
            n,
            p,
            a: 2.0 / (p - 1.0),
            delta,
            lambda,
        }
    }

    /// Adaptive Simpson on `[a, b]`, kept independent of the Gauss rule.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    fn oracle_average(s: &SpikeProfile, zeta: f64) -> f64 {
        let nf = s.n as f64;
        let g = |r: f64| nf * r.powi(s.n as i32 - 1) * s.phi(r).powf(zeta);
        simpson(&g, 0.0, s.delta, 1e-14) + simpson(&g, s.delta, 1.0, 1e-14)
    }

    #[test]
    fn eval_phi_examples() {
        let s = profile(3, 3.0, 0.5, 1.0);
        assert_relative_eq!(s.eval_phi(0.75).unwrap(), 4.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(s.eval_phi(0.5).unwrap(), 2.0, max_relative = 1e-15);
        assert_relative_eq!(s.eval_phi(0.0).unwrap(), 3.0, max_relative = 1e-15);
        assert!(matches!(s.eval_phi(1.5), Err(Error::OutOfDomain(_))));
        assert!(s.eval_phi(-0.1).is_err());
    }

    #[test]
    fn phi_is_c1_at_delta() {
        for (p, delta) in [(3.0, 0.5), (2.0, 0.05), (5.0, 0.2)] {
            let s = profile(4, p, delta, 1.0);
            let a = s.a;
            let below = s.delta * (1.0 - 1e-15);
            // both branches evaluated at delta
            let inner = delta.powf(-a) * (1.0 + 0.5 * a) - 0.5 * a * delta.powf(-(a + 2.0)) * delta * delta;
            assert_relative_eq!(inner, delta.powf(-a), max_relative = 1e-13);
            let d_inner = -a * delta.powf(-(a + 2.0)) * delta;
            let d_outer = -a * delta.powf(-a - 1.0);
            assert!(((d_inner - d_outer) / d_outer).abs() < 1e-10);
            assert!(((s.dphi(below) - s.dphi(delta)) / s.dphi(delta)).abs() < 1e-10);
        }
    }

    #[test]
    fn phi_strictly_decreasing_with_max_at_origin() {
        let s = profile(4, 3.0, 0.05, 1.0);
        let mut prev = s.phi(0.0);
        assert_relative_eq!(prev, 0.05f64.powf(-1.0) * 1.5, max_relative = 1e-15);
        for i in 1..=1000 {
            let v = s.phi(i as f64 / 1000.0);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn exact_average_matches_spec_value() {
        // outer 3(1 - 0.01)/2 = 1.485, inner 0.01 (1.5 - 3/10) = 0.012
        let v = phi_power_average(3, 1.0, 0.1, 1.0);
        assert_relative_eq!(v, 1.497, max_relative = 1e-14);
    }

    #[test]
    fn exact_average_matches_simpson_oracle() {
        for (n, p, delta, zeta) in [
            (3u32, 3.0, 0.1, 1.0),
            (4, 3.0, 0.05, 2.0),
            (4, 3.0, 0.05, 3.0),
            (5, 3.0, 0.2, 3.0),
            (5, 2.5, 0.01, 1.7),
            (6, 4.0, 0.3, 0.5),
        ] {
            let s = profile(n, p, delta, 1.0);
            let exact = s.power_average(zeta);
            let oracle = oracle_average(&s, zeta);
            assert_relative_eq!(exact, oracle, max_relative = 1e-10);
        }
    }

    #[test]
    fn build_u0_examples() {
        let params = validate_params(&RawParams {
            n: 4,
            p: 3.0,
            beta: 2.0,
            sigma: 1.0,
            lambda: 0.05,
            delta: 0.05,
        })
        .unwrap();
        let s = SpikeProfile::new(&params);
        let g = build_grid(2048, 2.0, 4).unwrap();
        let u0 = s.build_u0(&g);
        assert_relative_eq!(u0[0], 1.5, max_relative = 1e-14);
        assert!(u0.windows(2).all(|w| w[1] <= w[0]));
        assert!(u0.iter().all(|&v| v >= 0.0));
        // avg(u0^2) against the exact piecewise integral
        let avg = ball_average(&g, &u0.map(|v| v * v));
        let exact = 0.05f64.powi(2) * oracle_average(&s, 2.0);
        assert_relative_eq!(avg, exact, max_relative = 1e-5);

        let zero = SpikeProfile { lambda: 0.0, ..s };
        assert!(zero.build_u0(&g).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_approaches_limit_as_delta_shrinks() {
        // avg(phi^zeta) = N/(N - a zeta) + O(delta^(N - a zeta))
        let (n, p, zeta) = (4u32, 3.0, 2.0);
        let limit = 4.0 / (4.0 - 2.0);
        let errs: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&d| (phi_power_average(n, 2.0 / (p - 1.0), d, zeta) - limit).abs())
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2]);
        let order = (errs[0] / errs[1]).log2();
        assert!((order - 2.0).abs() < 0.2 * 2.0, "order {order}");
    }

    #[test]
    fn deltaphi_bound_inner_region_is_tight_at_delta() {
        // on [0, delta) the margin is N a (phi^p - delta^-(a+2)) >= 0, zero at delta
        let s = profile(4, 3.0, 0.05, 1.0);
        let g = build_grid(2048, 2.0, 4).unwrap();
        let rep = check_deltaphi_bound(&s, &g).unwrap();
        assert!(rep.passed, "{rep:?}");
        // the stencil is exact on the quadratic cap, so nodes whose stencil
        // stays inside [0, delta) carry the analytic margin
        let phi = g.sample(|r| s.phi(r));
        let lap = radial_laplacian(&g, &phi);
        let nodes = g.nodes();
        for i in 0..g.intervals() {
            if nodes[i + 1] >= s.delta {
                break;
            }
            let phi_p = phi[i].powf(s.p);
            let analytic = 4.0 * s.a * (phi_p - s.delta.powf(-(s.a + 2.0)));
            let discrete = lap[i] + 4.0 * s.a * phi_p;
            assert!((discrete - analytic).abs() <= 1e-9 * 4.0 * s.a * phi_p, "node {i}");
        }
        assert!(rep.min_margin < 0.02);
    }

    #[test]
    fn deltaphi_bound_symbolic_outer_margin() {
        // Delta r^-a = a(a + 2 - N) r^-(a+2); adding N a r^-ap = N a r^-(a+2)
        // leaves a(a + 2) r^-(a+2) > 0 for every N and p.
        for (n, p) in [(4u32, 3.0), (3, 2.0), (3, 1.5), (5, 1.2)] {
            let a = 2.0 / (p - 1.0);
            for r in [0.3, 0.5, 0.9] {
                let h = 1e-4;
                let f = |x: f64| x.powf(-a);
                let second = (f(r + h) - 2.0 * f(r) + f(r - h)) / (h * h);
                let first = (f(r + h) - f(r - h)) / (2.0 * h);
                let lap = second + (n as f64 - 1.0) / r * first;
                let symbolic = a * (a + 2.0 - n as f64) * r.powf(-a - 2.0);
                assert_relative_eq!(lap, symbolic, max_relative = 1e-5);
                let margin = symbolic + n as f64 * a * r.powf(-a * p);
                assert_relative_eq!(margin, a * (a + 2.0) * r.powf(-a - 2.0), max_relative = 1e-12);
                assert!(margin > 0.0);
            }
        }
    }

    #[test]
    fn deltaphi_bound_holds_below_critical_exponent() {
        // N = 3, p = 2 sits below N/(N-2) = 3 yet the inequality still holds
        let s = profile(3, 2.0, 0.1, 1.0);
        let g = build_grid(2048, 2.0, 3).unwrap();
        let rep = check_deltaphi_bound(&s, &g).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn deltaphi_bound_needs_resolved_spike() {
        let s = profile(4, 3.0, 0.001, 1.0);
        let g = build_grid(64, 1.0, 4).unwrap();
        assert!(matches!(check_deltaphi_bound(&s, &g), Err(Error::UnresolvedSpike { .. })));
    }

    #[test]
    fn supercritical_zero_data_passes() {
        let g = build_grid(256, 1.0, 4).unwrap();
        let rep = check_supercritical(&g, &Field::zeros(g.len()), 3.0, 0.9);
        assert!(rep.passed);
    }

    #[test]
    fn supercritical_fails_for_spike_data() {
        // On [0, delta) Delta u0 = -lambda N a delta^-(a+2) < 0 while
        // (D - 2) u0^p < 0 for any D <= 1, so the inequality fails for every
        // lambda > 0, small or large.
        let g = build_grid(2048, 2.0, 4).unwrap();
        for lambda in [1e-3, 0.05, 1.0] {
            let s = profile(4, 3.0, 0.05, lambda);
            let u0 = s.build_u0(&g);
            let d_over_lambda = 1.0 - 2.0 * lambda * lambda;
            let rep = check_supercritical(&g, &u0, 3.0, d_over_lambda);
            assert!(!rep.passed, "lambda {lambda}: {rep:?}");
            assert!(rep.worst_radius < 0.05 + 1e-12);
        }
    }

    #[test]
    fn table_profile_parses_and_interpolates_monotonically() {
        let text = "# r u\n0 2.0\n0.25, 1.5\n0.5 1.0\n1.0 0.2\n";
        let t = TableProfile::parse(text).unwrap();
        assert_eq!(t.eval(0.0), 2.0);
        assert_relative_eq!(t.eval(0.5), 1.0, max_relative = 1e-15);
        let mut prev = t.eval(0.0);
        for i in 1..=200 {
            let v = t.eval(i as f64 / 200.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn table_profile_rejects_bad_input() {
        assert!(TableProfile::parse("0 1\n0.5 1\n").is_err());
        assert!(TableProfile::parse("0.1 1\n1 1\n").is_err());
        assert!(TableProfile::parse("0 1\n0.5 1\n0.5 1\n1 1\n").is_err());
        assert!(TableProfile::parse("0 1 2\n1 1\n").is_err());
        assert!(TableProfile::parse("0 x\n1 1\n").is_err());
        assert!(TableProfile::parse("0 -1\n1 1\n").is_err());
    }
}
