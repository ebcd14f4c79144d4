//! Model parameters, regime classification and the closed-form constants of
//! the blow-up argument.
//!
//! All integrals are expressed as ball averages, so the unit-ball volume only
//! appears where an un-normalised `m_beta` is requested.

use serde::{Deserialize, Serialize};

use crate::batch::{self, Execution};
use crate::error::{Error, Result};
use crate::initdata::phi_power_average;

/// Relative tolerance for the critical case `p = beta = N/(N-2)`.
pub const CRITICAL_RTOL: f64 = 1e-12;

/// Unvalidated parameter tuple, as read from a config file or the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawParams {
    #[serde(rename = "N")]
    pub n: i64,
    pub p: f64,
    pub beta: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub delta: f64,
}

/// Validated parameters `(N, p, beta, sigma, lambda, delta)` with `a = 2/(p-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    #[serde(rename = "N")]
    n: u32,
    p: f64,
    beta: f64,
    sigma: f64,
    lambda: f64,
    delta: f64,
    a: f64,
}

impl ModelParams {
    pub fn n(&self) -> u32 {
        self.n
    }
    pub fn dim(&self) -> f64 {
        self.n as f64
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    /// Spike exponent `a = 2/(p-1)`.
    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn raw(&self) -> RawParams {
        RawParams {
            n: self.n as i64,
            p: self.p,
            beta: self.beta,
            sigma: self.sigma,
            lambda: self.lambda,
            delta: self.delta,
        }
    }

    /// Homogeneous steady state `sigma^(-1/beta)`.
    pub fn equilibrium(&self) -> f64 {
        self.sigma.powf(-1.0 / self.beta)
    }

    /// Blow-up time of the comparison problem started from `lambda * phi_delta`,
    /// `(1/(p-1)) [lambda (1 + a/2)]^(1-p) delta^2`.
    pub fn blowup_time_bound(&self) -> f64 {
        let peak = self.lambda * (1.0 + 0.5 * self.a);
        peak.powf(1.0 - self.p) * self.delta * self.delta / (self.p - 1.0)
    }

    pub fn regime(&self) -> Regime {
        // validated parameters always satisfy the classifier's domain
        classify_regime(self.n, self.p, self.beta).expect("validated parameters")
    }
}

/// Checks a raw tuple and computes `a`.
pub fn validate_params(raw: &RawParams) -> Result<ModelParams> {
    let RawParams {
        n,
        p,
        beta,
        sigma,
        lambda,
        delta,
    } = *raw;
    for (name, v) in [
        ("p", p),
        ("beta", beta),
        ("sigma", sigma),
        ("lambda", lambda),
        ("delta", delta),
    ] {
        if !v.is_finite() {
            return Err(Error::InvalidDomain(format!("{name} must be finite, got {v}")));
        }
    }
    if beta <= 1.0 {
        return Err(Error::InvalidExponents(format!("beta > 1 required, got {beta}")));
    }
    if p < beta {
        return Err(Error::InvalidExponents(format!(
            "p >= beta required, got p = {p}, beta = {beta}"
        )));
    }
    if n < 3 {
        return Err(Error::InvalidDomain(format!("N >= 3 required, got {n}")));
    }
    if n > u32::MAX as i64 {
        return Err(Error::InvalidDomain(format!("N = {n} out of range")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidDomain(format!("delta in (0, 1) required, got {delta}")));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidDomain(format!("sigma > 0 required, got {sigma}")));
    }
    if lambda <= 0.0 {
        return Err(Error::InvalidDomain(format!("lambda > 0 required, got {lambda}")));
    }
    Ok(ModelParams {
        n: n as u32,
        p,
        beta,
        sigma,
        lambda,
        delta,
        a: 2.0 / (p - 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegimeTag {
    Global,
    Undetermined,
    Critical,
    BlowupCapable,
}

impl std::fmt::Display for RegimeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RegimeTag::Global => "Global",
            RegimeTag::Undetermined => "Undetermined",
            RegimeTag::Critical => "Critical",
            RegimeTag::BlowupCapable => "BlowupCapable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regime {
    pub tag: RegimeTag,
    /// `1 + (1 - 2/q) beta`: global existence below this exponent.
    pub bound_global: f64,
    /// `N/(N-2)`: blow-up is possible above this exponent.
    pub bound_blowup: f64,
    pub q: f64,
}

/// Classifies `(N, p, beta)` against the global-existence and blow-up
/// thresholds.
///
/// Only `N >= 3`, `p > 1` and `beta >= 1` are required; `p < beta` is allowed
/// here so that the global-existence side can be explored on its own.
pub fn classify_regime(n: u32, p: f64, beta: f64) -> Result<Regime> {
    if n < 3 {
        return Err(Error::InvalidDomain(format!("N >= 3 required, got {n}")));
    }
    if !(p.is_finite() && beta.is_finite()) || p <= 1.0 || beta < 1.0 {
        return Err(Error::InvalidExponents(format!(
            "p > 1 and beta >= 1 required, got p = {p}, beta = {beta}"
        )));
    }
    let nf = n as f64;
    let q = 2.0 * nf / (nf - 2.0);
    let bound_global = 1.0 + (1.0 - 2.0 / q) * beta;
    let bound_blowup = nf / (nf - 2.0);
    let close = |x: f64, y: f64| (x - y).abs() <= CRITICAL_RTOL * x.abs().max(y.abs());
    let tag = if p < bound_global {
        RegimeTag::Global
    } else if close(p, beta) && close(p, bound_blowup) {
        RegimeTag::Critical
    } else if p > bound_blowup {
        RegimeTag::BlowupCapable
    } else {
        RegimeTag::Undetermined
    };
    Ok(Regime {
        tag,
        bound_global,
        bound_blowup,
        q,
    })
}

/// Geometric sampling of `delta` used to approximate the sup/inf over `(0, 1)`:
/// `delta_i = 2^(-i/per_octave)` for `i = 1..=octaves*per_octave`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSampling {
    pub octaves: u32,
    pub per_octave: u32,
}

impl Default for AlphaSampling {
    fn default() -> Self {
        Self {
            octaves: 20,
            per_octave: 1,
        }
    }
}

impl AlphaSampling {
    pub fn deltas(&self) -> Vec<f64> {
        let per = self.per_octave.max(1);
        (1..=self.octaves * per)
            .map(|i| (-(i as f64) / per as f64).exp2())
            .collect()
    }
}

/// Constants of the blow-up argument for one parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisConstants {
    pub k: f64,
    pub ell: f64,
    pub mu: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(rename = "Lambda1")]
    pub lambda1: f64,
    pub d: f64,
    #[serde(rename = "D")]
    pub big_d: f64,
    #[serde(rename = "T_tilde")]
    pub t_tilde: f64,
}

impl AnalysisConstants {
    /// `A_1 = lambda^(p-mu) alpha1` and `A_2 = lambda^(p-mu) alpha2`, the
    /// constants of the two-sided `L^p` estimate.
    pub fn lp_constants(&self, params: &ModelParams) -> (f64, f64) {
        let s = params.lambda().powf(params.p() - self.mu);
        (s * self.alpha1, s * self.alpha2)
    }
}

/// Ratio `avg(phi^p) / avg(phi)^mu` for one `delta`.
fn initial_ratio(n: u32, a: f64, p: f64, mu: f64, delta: f64) -> (f64, f64) {
    let avg = phi_power_average(n, a, delta, 1.0);
    let avg_p = phi_power_average(n, a, delta, p);
    (avg_p / avg.powf(mu), avg)
}

/// Picks `k`, `ell`, evaluates `alpha1`, `alpha2`, `Lambda1` on the sampled
/// `delta` grid, and derives `d`, `D` and the explicit blow-up time bound.
pub fn compute_constants(params: &ModelParams, sampling: &AlphaSampling) -> Result<AnalysisConstants> {
    compute_constants_with(params, sampling, Execution::default())
}

pub fn compute_constants_with(
    params: &ModelParams,
    sampling: &AlphaSampling,
    exec: Execution,
) -> Result<AnalysisConstants> {
    let regime = params.regime();
    if regime.tag != RegimeTag::BlowupCapable {
        return Err(Error::InfeasibleConstants(format!(
            "regime is {}, constants need p > N/(N-2)",
            regime.tag
        )));
    }
    let nf = params.dim();
    let p = params.p();
    let k_lo = 1.0 + 2.0 * p / nf;
    let k_hi = p;
    if k_lo >= k_hi {
        return Err(Error::InfeasibleConstants(format!(
            "k interval ({k_lo}, {k_hi}) is empty"
        )));
    }
    let k = 0.5 * (k_lo + k_hi);
    let ell_lo = k - 1.0;
    let ell_hi = nf * (p - 1.0) / (2.0 * p);
    if ell_lo >= ell_hi {
        return Err(Error::InfeasibleConstants(format!(
            "ell interval ({ell_lo}, {ell_hi}) is empty for N = {}, p = {p}",
            params.n()
        )));
    }
    let ell = 0.5 * (ell_lo + ell_hi);
    let mu = p * ell / (k - 1.0);

    let deltas = sampling.deltas();
    if deltas.is_empty() {
        return Err(Error::InfeasibleConstants("empty delta sampling".into()));
    }
    let (n, a) = (params.n(), params.a());
    let samples = batch::map(&deltas, exec, |&delta| initial_ratio(n, a, p, mu, delta));
    let mut alpha1 = f64::NEG_INFINITY;
    let mut alpha2 = f64::INFINITY;
    let mut lambda1 = f64::NEG_INFINITY;
    for &(ratio, avg) in &samples {
        alpha1 = alpha1.max(ratio);
        alpha2 = alpha2.min(ratio);
        lambda1 = lambda1.max(avg);
    }

    let (beta, sigma, lambda) = (params.beta(), params.sigma(), params.lambda());
    let factor = sigma
        * (beta * (mu + 1.0) / p).exp2()
        * alpha1.powf(beta / p)
        * lambda1.powf(beta * mu / p);
    let big_d = 1.0 - factor * lambda.powf(beta);
    let d = lambda * big_d;

    Ok(AnalysisConstants {
        k,
        ell,
        mu,
        alpha1,
        alpha2,
        lambda1,
        d,
        big_d,
        t_tilde: params.blowup_time_bound(),
    })
}

/// Volume of the unit ball in `R^N`.
pub fn unit_ball_volume(n: u32) -> f64 {
    use std::f64::consts::PI;
    let mut v = if n.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if n.is_multiple_of(2) { 2 } else { 3 };
    while k <= n {
        v *= 2.0 * PI / k as f64;
        k += 2;
    }
    v
}
