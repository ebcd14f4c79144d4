//! Blow-up time extrapolation, rate and profile fits, and invariant audits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RadialGrid;
use crate::model::{AnalysisConstants, ModelParams};
use crate::solver::{FieldDiagnostic, Status, TraceRecord};

/// Records below this amplitude are transient and excluded from fits.
pub const ASYMPTOTIC_SUP: f64 = 1e3;
/// Smallest number of asymptotic records accepted by the time and rate fits.
pub const MIN_FIT_RECORDS: usize = 10;
/// Profile fits need a late snapshot.
pub const PROFILE_SUP: f64 = 1e6;
pub const MIN_PROFILE_NODES: usize = 8;

/// Weighted straight-line fit `y = a + b x`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LineFit {
    intercept: f64,
    slope: f64,
    se_intercept: f64,
    se_slope: f64,
    cov: f64,
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> LineFit {
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((xi, yi), wi) in x.iter().zip(y).zip(w) {
        sxx += wi * (xi - xm) * (xi - xm);
        sxy += wi * (xi - xm) * (yi - ym);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let n = x.len() as f64;
    let rss: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((xi, yi), wi)| wi * (yi - intercept - slope * xi).powi(2))
        .sum();
    // residual variance, normalised so the weights only fix relative scale
    let s2 = if n > 2.0 { rss / (n - 2.0) } else { 0.0 };
    let var_slope = s2 / sxx;
    let var_int = s2 * (1.0 / sw + xm * xm / sxx);
    LineFit {
        intercept,
        slope,
        se_intercept: var_int.sqrt(),
        se_slope: var_slope.sqrt(),
        cov: -xm * var_slope,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupTimeFit {
    pub t_est: f64,
    /// Standard error of `t_est` from the residual scatter.
    pub se: f64,
    pub records_used: usize,
}

fn asymptotic(records: &[TraceRecord]) -> Vec<&TraceRecord> {
    records.iter().filter(|r| r.sup_u >= ASYMPTOTIC_SUP).collect()
}

/// Extrapolates the blow-up time from `sup^-(p-1)`, which is affine in `t`
/// for type-I growth.
///
/// The fit is weighted by `1/y^2` so every record contributes its relative
/// residual; otherwise the early, large `y` values swamp the late ones.
pub fn estimate_blowup_time(records: &[TraceRecord], p: f64) -> Result<BlowupTimeFit> {
    let recs = asymptotic(records);
    if recs.len() < MIN_FIT_RECORDS {
        return Err(Error::InsufficientData(format!(
            "{} records with sup_u >= {ASYMPTOTIC_SUP:e}, {MIN_FIT_RECORDS} required",
            recs.len()
        )));
    }
    // shift the origin to the last record for conditioning
    let t_ref = recs.last().unwrap().t;
    let x: Vec<f64> = recs.iter().map(|r| r.t - t_ref).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.sup_u.powf(1.0 - p)).collect();
    let w: Vec<f64> = y.iter().map(|v| 1.0 / (v * v)).collect();
    let fit = weighted_line(&x, &y, &w);
    if !(fit.slope < 0.0) {
        return Err(Error::NonDecaying(fit.slope));
    }
    let root = -fit.intercept / fit.slope;
    // delta method for -a/b
    let (a, b) = (fit.intercept, fit.slope);
    let var = (fit.se_intercept / b).powi(2) + (a * fit.se_slope / (b * b)).powi(2)
        - 2.0 * a / (b * b * b) * fit.cov;
    Ok(BlowupTimeFit {
        // the extrapolated time can never precede data already observed
        t_est: t_ref + root.max(0.0),
        se: var.max(0.0).sqrt(),
        records_used: recs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub exponent: f64,
    /// Twice the standard error of the slope.
    pub half_width: f64,
    pub records_used: usize,
}

/// Slope of `log sup_u` against `-log(T - t)`.
///
/// Records closer to `T` than the time estimate can resolve are dropped:
/// there the gap `T - t` is dominated by the uncertainty in `T` itself.
pub fn fit_rate_exponent(records: &[TraceRecord], blowup: &BlowupTimeFit) -> Result<RateFit> {
    let t_est = blowup.t_est;
    let min_gap = (1e-6 * t_est.abs()).max(100.0 * blowup.se);
    let recs: Vec<&TraceRecord> = asymptotic(records)
        .into_iter()
        .filter(|r| t_est - r.t > min_gap)
        .collect();
    if recs.len() < MIN_FIT_RECORDS {
        return Err(Error::InsufficientData(format!(
            "{} resolvable records for the rate fit, {MIN_FIT_RECORDS} required",
            recs.len()
        )));
    }
    let x: Vec<f64> = recs.iter().map(|r| -(t_est - r.t).ln()).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.sup_u.ln()).collect();
    let fit = weighted_line(&x, &y, &vec![1.0; x.len()]);
    Ok(RateFit {
        exponent: fit.slope,
        half_width: 2.0 * fit.se_slope,
        records_used: recs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileFit {
    /// `d log u / d log r`
    pub slope: f64,
    /// Slope of `log u` against `log(|log r| / r^2)`.
    pub log_corrected_slope: f64,
    pub nodes_used: usize,
    pub window: (f64, f64),
}

/// Default fit window: clear of the smoothed core, inside the spike region.
pub fn default_profile_window(h_min: f64) -> (f64, f64) {
    (30.0 * h_min, 0.2)
}

/// Log-log fits of a radial profile over `window`.
pub fn fit_profile_slope(nodes: &[f64], values: &[f64], window: (f64, f64)) -> Result<ProfileFit> {
    let (lo, hi) = window;
    if !(lo > 0.0 && hi > lo && hi < 1.0) {
        return Err(Error::EmptyWindow { lo, hi });
    }
    let pts: Vec<(f64, f64)> = nodes
        .iter()
        .zip(values)
        .filter(|(r, u)| **r >= lo && **r <= hi && **u > 0.0)
        .map(|(r, u)| (*r, *u))
        .collect();
    if pts.len() < MIN_PROFILE_NODES {
        return Err(Error::WindowTooNarrow(pts.len()));
    }
    let ones = vec![1.0; pts.len()];
    let y: Vec<f64> = pts.iter().map(|(_, u)| u.ln()).collect();
    let plain: Vec<f64> = pts.iter().map(|(r, _)| r.ln()).collect();
    let corrected: Vec<f64> = pts.iter().map(|(r, _)| (r.ln().abs() / (r * r)).ln()).collect();
    Ok(ProfileFit {
        slope: weighted_line(&plain, &y, &ones).slope,
        log_corrected_slope: weighted_line(&corrected, &y, &ones).slope,
        nodes_used: pts.len(),
        window,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub name: String,
    /// False when the premise of the invariant does not hold for this run.
    pub applicable: bool,
    pub passed: bool,
    /// Worst observed value of the audited quantity.
    pub worst: Option<f64>,
    pub bound: Option<f64>,
}

impl AuditEntry {
    fn check(name: &str, worst: f64, bound: f64, passed: bool) -> Self {
        Self {
            name: name.into(),
            applicable: true,
            passed,
            worst: worst.is_finite().then_some(worst),
            bound: Some(bound),
        }
    }

    fn not_applicable(name: &str) -> Self {
        Self {
            name: name.into(),
            applicable: false,
            passed: true,
            worst: None,
            bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuditTable {
    pub entries: Vec<AuditEntry>,
}

impl AuditTable {
    pub fn get(&self, name: &str) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

pub const POSITIVITY_FLOOR: f64 = -1e-12;
pub const K_FLOOR: f64 = -1e-10;
/// Relative slack for the nondecreasing average, covering summation rounding.
pub const AVERAGE_SLACK: f64 = 1e-12;
pub const K_DECADE_VARIATION: f64 = 0.2;

/// Options for the audits that need more than the trace.
#[derive(Debug, Clone, Copy, Default)]
pub struct AuditOptions<'a> {
    pub constants: Option<&'a AnalysisConstants>,
    /// Slack `ε_h` on the lower `K` corridor.
    pub tolerance: f64,
}

/// Invariants that can be checked from the scalar trace alone.
pub fn audit_invariants(records: &[TraceRecord], params: &ModelParams, opts: &AuditOptions<'_>) -> AuditTable {
    let mut entries = Vec::new();
    if records.is_empty() {
        return AuditTable { entries };
    }

    let min_u = records.iter().map(|r| r.min_u).fold(f64::INFINITY, f64::min);
    entries.push(AuditEntry::check("positivity", min_u, POSITIVITY_FLOOR, min_u >= POSITIVITY_FLOOR));

    if records[0].m_beta_avg < 1.0 / params.sigma() {
        let k_min = records.iter().map(|r| r.k).fold(f64::INFINITY, f64::min);
        entries.push(AuditEntry::check("m_beta_threshold", k_min, K_FLOOR, k_min > K_FLOOR));
    } else {
        entries.push(AuditEntry::not_applicable("m_beta_threshold"));
    }

    // relative change of ubar between records that start with K >= 0
    let worst_avg = records
        .windows(2)
        .filter(|w| w[0].k >= 0.0)
        .map(|w| (w[1].ubar - w[0].ubar) / w[0].ubar.abs().max(f64::MIN_POSITIVE))
        .fold(f64::INFINITY, f64::min);
    if worst_avg.is_finite() {
        entries.push(AuditEntry::check(
            "monotone_average",
            worst_avg,
            -AVERAGE_SLACK,
            worst_avg >= -AVERAGE_SLACK,
        ));
    } else {
        entries.push(AuditEntry::not_applicable("monotone_average"));
    }

    let nonzero: Vec<&TraceRecord> = records.iter().filter(|r| r.ubar > 0.0).collect();
    let k_max = nonzero.iter().map(|r| r.k).fold(f64::NEG_INFINITY, f64::max);
    if nonzero.is_empty() {
        entries.push(AuditEntry::not_applicable("k_below_one"));
    } else {
        entries.push(AuditEntry::check("k_below_one", k_max, 1.0, k_max < 1.0));
    }

    match opts.constants {
        Some(c) => {
            let k_min = records.iter().map(|r| r.k).fold(f64::INFINITY, f64::min);
            let floor = c.big_d - opts.tolerance;
            entries.push(AuditEntry::check("k_above_d", k_min, floor, k_min > floor));
        }
        None => entries.push(AuditEntry::not_applicable("k_above_d")),
    }

    // K over the last decade of sup growth; only meaningful once sup has
    // grown by more than a decade
    let sup_last = records.last().unwrap().sup_u;
    let sup_first = records[0].sup_u;
    if sup_last >= 10.0 * sup_first && sup_last >= ASYMPTOTIC_SUP {
        let ks: Vec<f64> = records
            .iter()
            .filter(|r| r.sup_u >= 0.1 * sup_last)
            .map(|r| r.k)
            .collect();
        let hi = ks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = ks.iter().copied().fold(f64::INFINITY, f64::min);
        let variation = if hi.abs() > 0.0 { (hi - lo) / hi.abs() } else { f64::INFINITY };
        entries.push(AuditEntry::check(
            "k_final_decade",
            variation,
            K_DECADE_VARIATION,
            variation < K_DECADE_VARIATION,
        ));
    } else {
        entries.push(AuditEntry::not_applicable("k_final_decade"));
    }

    let all_monotone = records.iter().all(|r| r.monotone_ok);
    entries.push(AuditEntry {
        name: "spatial_monotonicity".into(),
        applicable: records[0].monotone_ok,
        passed: !records[0].monotone_ok || all_monotone,
        worst: None,
        bound: None,
    });

    let increasing = records.windows(2).all(|w| w[1].t > w[0].t);
    let finite = records.iter().all(|r| r.sup_u.is_finite());
    entries.push(AuditEntry {
        name: "trace_well_formed".into(),
        applicable: true,
        passed: increasing && finite,
        worst: None,
        bound: None,
    });

    AuditTable { entries }
}

pub const CLIP_FRACTION: f64 = 1e-8;

/// Invariants that need field-level diagnostics from the solver.
pub fn audit_fields(
    diagnostics: &[FieldDiagnostic],
    records: &[TraceRecord],
    params: &ModelParams,
    grid: &RadialGrid,
    constants: Option<&AnalysisConstants>,
    lp_cutoff: f64,
) -> AuditTable {
    let mut entries = Vec::new();
    if diagnostics.is_empty() {
        return AuditTable { entries };
    }
    let eps = grid.discretization_tolerance();
    let excess = diagnostics
        .iter()
        .map(|d| d.point_bound_excess)
        .fold(f64::NEG_INFINITY, f64::max);
    entries.push(AuditEntry::check("point_bound", excess, eps, excess <= eps));

    let clip_ratio = diagnostics
        .iter()
        .zip(records)
        .map(|(d, r)| if r.ubar > 0.0 { d.clip_total / r.ubar } else { d.clip_total })
        .fold(0.0, f64::max);
    entries.push(AuditEntry::check("clip_total", clip_ratio, CLIP_FRACTION, clip_ratio < CLIP_FRACTION));

    // away from the origin the solution stays bounded: the outer average may
    // not grow by more than the single-point ratio bound
    let outer0 = diagnostics[0].outer_average;
    let outer_max = diagnostics.iter().map(|d| d.outer_average).fold(f64::NEG_INFINITY, f64::max);
    let ratio = if outer0 > 0.0 { outer_max / outer0 } else { f64::INFINITY };
    entries.push(AuditEntry::check(
        "outer_average_bounded",
        ratio,
        SINGLEPOINT_BOUND,
        ratio.is_finite() && ratio < SINGLEPOINT_BOUND,
    ));

    // informational: two-sided Lp bound at early times
    match constants {
        Some(c) => {
            let (a1, a2) = c.lp_constants(params);
            let ratios: Vec<f64> = diagnostics
                .iter()
                .zip(records)
                .filter(|(d, r)| d.t <= lp_cutoff && r.ubar > 0.0)
                .map(|(d, r)| d.avg_u_p / r.ubar.powf(c.mu))
                .collect();
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let below = lo < 0.5 * a2;
            entries.push(AuditEntry {
                name: "lp_estimate_informational".into(),
                applicable: !ratios.is_empty(),
                // never a hard failure: the time window of the estimate is unquantified
                passed: true,
                worst: Some(if below { lo } else { hi }).filter(|v| v.is_finite()),
                bound: Some(if below { 0.5 * a2 } else { 2.0 * a1 }),
            });
        }
        None => entries.push(AuditEntry::not_applicable("lp_estimate_informational")),
    }
    AuditTable { entries }
}

/// Ceiling on `u(0.5, t_final) / u(0.5, 0)` taken as single-point evidence.
pub const SINGLEPOINT_BOUND: f64 = 10.0;

/// Summary of one run, in a stable field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupReport {
    pub status: Status,
    pub t_final: f64,
    #[serde(rename = "T_est")]
    pub t_est: Option<f64>,
    #[serde(rename = "T_tilde")]
    pub t_tilde: f64,
    pub rate_exponent: Option<f64>,
    pub rate_target: f64,
    pub profile_slope: Option<f64>,
    pub profile_target: f64,
    pub singlepoint_ratio: Option<f64>,
    #[serde(rename = "K_final")]
    pub k_final: f64,
    pub audit: AuditTable,
    /// Why an estimate is missing, and supplementary fit details.
    pub notes: Vec<String>,
}

/// Final radial profile used for the slope fit.
#[derive(Debug, Clone, Copy)]
pub struct ProfileInput<'a> {
    pub nodes: &'a [f64],
    pub values: &'a [f64],
}

/// Builds the report from the trace and, when present, the final profile.
///
/// Only trace-level data enters, so re-analysing a persisted trace gives the
/// same report.
pub fn build_report(
    status: Status,
    records: &[TraceRecord],
    params: &ModelParams,
    profile: Option<ProfileInput<'_>>,
) -> Result<BlowupReport> {
    let last = records
        .last()
        .ok_or_else(|| Error::InsufficientData("empty trace".into()))?;
    let p = params.p();
    let mut notes = Vec::new();

    let (t_est, rate_exponent) = match estimate_blowup_time(records, p) {
        Ok(fit) => {
            notes.push(format!("T_est standard error {:e} from {} records", fit.se, fit.records_used));
            let rate = match fit_rate_exponent(records, &fit) {
                Ok(r) => {
                    notes.push(format!(
                        "rate exponent half-width {:e} from {} records",
                        r.half_width, r.records_used
                    ));
                    Some(r.exponent)
                }
                Err(e) => {
                    notes.push(format!("rate_exponent: {e}"));
                    None
                }
            };
            (Some(fit.t_est), rate)
        }
        Err(e) => {
            notes.push(format!("T_est: {e}"));
            (None, None)
        }
    };

    let profile_slope = match profile {
        Some(prof) => {
            let sup = prof.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if sup < PROFILE_SUP {
                notes.push(format!(
                    "profile_slope: final sup_u {sup:e} below {PROFILE_SUP:e}, profile not asymptotic"
                ));
                None
            } else {
                let h_min = prof
                    .nodes
                    .windows(2)
                    .map(|w| w[1] - w[0])
                    .fold(f64::INFINITY, f64::min);
                match fit_profile_slope(prof.nodes, prof.values, default_profile_window(h_min)) {
                    Ok(fit) => {
                        notes.push(format!(
                            "profile log-corrected slope {} over {} nodes in [{:e}, {:e}]",
                            fit.log_corrected_slope, fit.nodes_used, fit.window.0, fit.window.1
                        ));
                        Some(fit.slope)
                    }
                    Err(e) => {
                        notes.push(format!("profile_slope: {e}"));
                        None
                    }
                }
            }
        }
        None => {
            notes.push("profile_slope: no final snapshot available".into());
            None
        }
    };

    let u_half0 = records[0].u_at_half;
    let singlepoint_ratio = (u_half0 > 0.0).then(|| last.u_at_half / u_half0);

    Ok(BlowupReport {
        status,
        t_final: last.t,
        t_est,
        t_tilde: params.blowup_time_bound(),
        rate_exponent,
        rate_target: 1.0 / (p - 1.0),
        profile_slope,
        profile_target: -2.0 / (p - 1.0),
        singlepoint_ratio,
        k_final: last.k,
        audit: audit_invariants(records, params, &AuditOptions::default()),
        notes,
    })
}
