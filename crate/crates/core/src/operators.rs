//! Discrete radial Laplacian and the non-local functionals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ball_average, Field, RadialGrid};
use crate::model::{unit_ball_volume, ModelParams};

/// `Δ_r f` with zero flux at both ends.
///
/// Each node owns the shell between the midpoints to its neighbours; the
/// stencil is the flux balance over that shell, so it is second order on
/// graded meshes, reduces to `2N (f_1 - f_0)/r_1^2` at the origin and sums to
/// zero against the quadrature weights.
pub fn radial_laplacian(grid: &RadialGrid, f: &[f64]) -> Field {
    let mut out = vec![0.0; f.len()];
    laplacian_into(grid, f, &mut out);
    Field(out)
}

pub(crate) fn laplacian_into(grid: &RadialGrid, f: &[f64], out: &mut [f64]) {
    assert_eq!(f.len(), grid.len());
    let (lower, upper) = grid.laplacian_coefficients();
    let m = f.len() - 1;
    out[0] = upper[0] * (f[1] - f[0]);
    for i in 1..m {
        out[i] = upper[i] * (f[i + 1] - f[i]) - lower[i] * (f[i] - f[i - 1]);
    }
    out[m] = -lower[m] * (f[m] - f[m - 1]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlocalState {
    /// `⨍ u^β`
    pub m_beta_avg: f64,
    /// `∫ u^β`, the average times the unit-ball volume
    pub m_beta_int: f64,
    pub ubar: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub sup_u: f64,
}

pub fn nonlocal_state(grid: &RadialGrid, u: &[f64], params: &ModelParams) -> NonlocalState {
    let beta = params.beta();
    let powered: Vec<f64> = u.iter().map(|&v| v.max(0.0).powf(beta)).collect();
    let m_beta_avg = ball_average(grid, &powered);
    NonlocalState {
        m_beta_avg,
        m_beta_int: m_beta_avg * unit_ball_volume(params.n()),
        ubar: ball_average(grid, u),
        k: 1.0 - params.sigma() * m_beta_avg,
        sup_u: u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `Δ_r u + K u^p` with `K` taken from the same field.
pub fn rhs(grid: &RadialGrid, u: &[f64], params: &ModelParams) -> Result<Field> {
    if let Some((node, &value)) = u.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteField { node, value });
    }
    let k = nonlocal_state(grid, u, params).k;
    let mut out = radial_laplacian(grid, u);
    let p = params.p();
    for (o, &v) in out.iter_mut().zip(u) {
        *o += k * v.max(0.0).powf(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::initdata::{phi_power_average, SpikeProfile};
    use crate::model::{validate_params, RawParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(n: i64, p: f64, beta: f64, sigma: f64, lambda: f64, delta: f64) -> ModelParams {
        validate_params(&RawParams { n, p, beta, sigma, lambda, delta }).unwrap()
    }

    #[test]
    fn r_squared_gives_two_n_everywhere_but_the_wall() {
        for gamma in [1.0, 2.0] {
            let g = build_grid(128, gamma, 3).unwrap();
            let lap = radial_laplacian(&g, &g.sample(|r| r * r));
            for &v in &lap[..g.intervals()] {
                assert_relative_eq!(v, 6.0, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn constants_are_annihilated() {
        let g = build_grid(300, 2.0, 5).unwrap();
        let lap = radial_laplacian(&g, &vec![3.7; g.len()]);
        assert!(lap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn r_fourth_converges_at_second_order() {
        // Δ_r r^4 = 4(N+2) r^2; compare away from the wall, where r^4 breaks
        // the Neumann condition
        let err = |m: usize| {
            let g = build_grid(m, 1.0, 3).unwrap();
            let lap = radial_laplacian(&g, &g.sample(|r| r.powi(4)));
            g.nodes()
                .iter()
                .zip(lap.iter())
                .filter(|(r, _)| **r <= 0.5)
                .map(|(r, v)| (v - 20.0 * r * r).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(128) / err(256);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        let g = build_grid(512, 1.0, 3).unwrap();
        let lap = radial_laplacian(&g, &g.sample(|r| r.powi(4)));
        assert!(lap[0].abs() < 1e-4);
    }

    #[test]
    fn green_identity_for_flux_free_field() {
        // cos(πr) has f'(0) = f'(1) = 0
        for m in [64, 256] {
            let g = build_grid(m, 2.0, 4).unwrap();
            let f = g.sample(|r| (std::f64::consts::PI * r).cos());
            let avg = ball_average(&g, &radial_laplacian(&g, &f));
            assert!(avg.abs() < 1e-12, "{avg}");
        }
    }

    #[test]
    fn equilibrium_state() {
        let prm = params(4, 3.0, 2.0, 4.0, 0.05, 0.05);
        let g = build_grid(64, 1.0, 4).unwrap();
        let u = vec![prm.equilibrium(); g.len()];
        let s = nonlocal_state(&g, &u, &prm);
        assert!(s.k.abs() < 1e-14);
        assert!(rhs(&g, &u, &prm).unwrap().iter().all(|v| v.abs() < 1e-12));

        let z = nonlocal_state(&g, &vec![0.0; g.len()], &prm);
        assert_eq!((z.k, z.ubar), (1.0, 0.0));
    }

    #[test]
    fn sub_equilibrium_constant_grows() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(64, 1.0, 4).unwrap();
        let c: f64 = 0.5;
        let out = rhs(&g, &vec![c; g.len()], &prm).unwrap();
        for v in out.iter() {
            assert_relative_eq!(*v, c.powi(3) * (1.0 - c * c), max_relative = 1e-12);
        }
    }

    #[test]
    fn spike_state_matches_exact_average() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(2048, 2.0, 4).unwrap();
        let u0 = SpikeProfile::new(&prm).build_u0(&g);
        let s = nonlocal_state(&g, &u0, &prm);
        let exact = 1.0 - 0.05f64.powi(2) * phi_power_average(4, 1.0, 0.05, 2.0);
        assert_relative_eq!(s.k, exact, max_relative = 1e-7);
        assert!((s.k - 0.995).abs() < 1e-3);
        assert_eq!(s.sup_u, u0[0]);
        assert_relative_eq!(s.m_beta_int, s.m_beta_avg * std::f64::consts::PI.powi(2) / 2.0, max_relative = 1e-14);
        // Δ_r u0(0) = -λ N a δ^-(a+2) = -1600 outweighs the reaction at the peak
        let f0 = rhs(&g, &u0, &prm).unwrap()[0];
        assert_relative_eq!(f0, -1600.0 + exact * 1.5f64.powi(3), max_relative = 1e-9);
        assert!(f0 < 0.0);
    }

    #[test]
    fn rhs_rejects_non_finite() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(32, 1.0, 4).unwrap();
        let mut u = vec![1.0; g.len()];
        u[5] = f64::NAN;
        assert!(matches!(rhs(&g, &u, &prm), Err(Error::NonFiniteField { node: 5, .. })));
    }

    proptest! {
        #[test]
        fn laplacian_is_conservative(vals in prop::collection::vec(0.0f64..10.0, 33), gamma in 1.0f64..3.0) {
            let g = build_grid(32, gamma, 4).unwrap();
            let lap = radial_laplacian(&g, &vals);
            let scale: f64 = vals.iter().map(|v| v.abs()).sum::<f64>() / g.h_min().powi(2);
            prop_assert!(ball_average(&g, &lap).abs() <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn nonlocal_state_is_consistent(vals in prop::collection::vec(0.0f64..5.0, 33), sigma in 0.1f64..3.0) {
            let prm = params(4, 3.0, 2.0, sigma, 0.05, 0.05);
            let g = build_grid(32, 1.5, 4).unwrap();
            let s = nonlocal_state(&g, &vals, &prm);
            prop_assert_eq!(s.k, 1.0 - sigma * s.m_beta_avg);
            prop_assert!(s.ubar >= 0.0 && s.m_beta_avg >= 0.0);
            prop_assert!(s.ubar <= s.sup_u * (1.0 + 1e-12));
        }
    }
}
