//! Time integration into blow-up, plus the homogeneous ODE and the local
//! comparison problem with a frozen reaction coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ball_average, restricted_average, Field, RadialGrid};
use crate::model::ModelParams;
use crate::operators::{laplacian_into, nonlocal_state};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Backward-Euler diffusion, explicit reaction.
    #[default]
    Imex,
    /// Explicit two-stage midpoint; diffusion-limited by `cfl_coeff`.
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepControl {
    pub dt_init: f64,
    /// Largest step; `None` means `t_end / 100`.
    pub dt_max: Option<f64>,
    pub safety: f64,
    pub cfl_coeff: f64,
    pub u_max: f64,
    pub t_end: f64,
    pub max_steps: usize,
    /// Collapse threshold relative to the reaction timescale `1/(p sup^(p-1))`.
    pub dt_min: f64,
    pub rtol: f64,
    pub atol: f64,
    pub scheme: Scheme,
    /// Record every `stride`-th accepted step (the last step is always kept).
    pub stride: usize,
    pub snapshot_levels: Vec<f64>,
    pub snapshot_times: Vec<f64>,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            dt_init: 1e-8,
            dt_max: None,
            safety: 0.1,
            cfl_coeff: 0.9,
            u_max: 1e8,
            t_end: 1.0,
            max_steps: 5_000_000,
            dt_min: 1e-14,
            rtol: 1e-3,
            atol: 1e-10,
            scheme: Scheme::Imex,
            stride: 1,
            snapshot_levels: (2..=8).map(|k| 10f64.powi(k)).collect(),
            snapshot_times: Vec::new(),
        }
    }
}

impl StepControl {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidControl(msg));
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return bad(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.dt_init > 0.0) {
            return bad(format!("dt_init must be positive, got {}", self.dt_init));
        }
        if let Some(m) = self.dt_max {
            if !(m > 0.0) {
                return bad(format!("dt_max must be positive, got {m}"));
            }
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return bad(format!("safety must lie in (0, 1), got {}", self.safety));
        }
        if !(self.cfl_coeff > 0.0) {
            return bad(format!("cfl_coeff must be positive, got {}", self.cfl_coeff));
        }
        if !(self.u_max > 0.0) {
            return bad(format!("u_max must be positive, got {}", self.u_max));
        }
        if !(self.dt_min > 0.0) || !(self.rtol > 0.0) || !(self.atol >= 0.0) {
            return bad("dt_min and rtol must be positive, atol nonnegative".into());
        }
        if self.stride == 0 || self.max_steps == 0 {
            return bad("stride and max_steps must be at least 1".into());
        }
        Ok(())
    }

    fn dt_cap(&self) -> f64 {
        self.dt_max.unwrap_or(self.t_end / 100.0)
    }
}

/// Reaction coefficient driving a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    /// `K(t) = 1 - σ ⨍ u^β`, recomputed at every stage.
    NonLocal,
    /// Constant coefficient `D`.
    Frozen(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    ReachedHorizon,
    BlowupDetected,
    StepCollapse,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::ReachedHorizon => "ReachedHorizon",
            Status::BlowupDetected => "BlowupDetected",
            Status::StepCollapse => "StepCollapse",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Status {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ReachedHorizon" => Ok(Status::ReachedHorizon),
            "BlowupDetected" => Ok(Status::BlowupDetected),
            "StepCollapse" => Ok(Status::StepCollapse),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub dt: f64,
    pub sup_u: f64,
    pub m_beta_avg: f64,
    pub ubar: f64,
    #[serde(rename = "K")]
    pub k: f64,
    /// Smallest nodal value before clipping.
    pub min_u: f64,
    pub u_at_half: f64,
    pub monotone_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Field-level quantities that do not fit in the scalar trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldDiagnostic {
    pub t: f64,
    /// `max_i r_i^N u_i - ū`
    pub point_bound_excess: f64,
    /// Mass added by clipping since the start of the run.
    pub clip_total: f64,
    /// `N ∫_{1/4}^1 r^(N-1) u dr`
    pub outer_average: f64,
    /// `⨍ u^p`
    pub avg_u_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SnapshotKind {
    Initial,
    Level(f64),
    Time(f64),
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub kind: SnapshotKind,
    pub t: f64,
    pub field: Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub status: Status,
    pub t_final: f64,
    pub trace: Trace,
    pub diagnostics: Vec<FieldDiagnostic>,
    pub snapshots: Vec<Snapshot>,
    pub steps: usize,
    pub rejected: usize,
}

impl SimulationOutcome {
    pub fn final_field(&self) -> &Field {
        &self
            .snapshots
            .iter()
            .rev()
            .find(|s| s.kind == SnapshotKind::Final)
            .expect("every outcome carries its final field")
            .field
    }

    pub fn initial_field(&self) -> &Field {
        &self.snapshots[0].field
    }

    /// Snapshot taken exactly at time `t`, if one was configured.
    pub fn field_at(&self, t: f64) -> Option<&Field> {
        self.snapshots
            .iter()
            .find(|s| s.kind == SnapshotKind::Time(t) || (s.t == t && s.kind == SnapshotKind::Initial))
            .map(|s| &s.field)
    }
}

/// Everything a step needs besides the field itself.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub params: &'a ModelParams,
    pub grid: &'a RadialGrid,
    pub coupling: Coupling,
}

impl Problem<'_> {
    fn coefficient(&self, u: &[f64]) -> f64 {
        match self.coupling {
            Coupling::NonLocal => nonlocal_state(self.grid, u, self.params).k,
            Coupling::Frozen(d) => d,
        }
    }

    fn check_finite(u: &[f64]) -> Result<()> {
        match u.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            Some((node, &value)) => Err(Error::NonFiniteField { node, value }),
            None => Ok(()),
        }
    }

    /// Right-hand side `Δ_r u + K u^p` for the current coupling.
    fn rhs(&self, u: &[f64], out: &mut [f64]) {
        let k = self.coefficient(u);
        laplacian_into(self.grid, u, out);
        let p = self.params.p();
        for (o, &v) in out.iter_mut().zip(u) {
            *o += k * v.max(0.0).powf(p);
        }
    }

    fn substep(&self, scheme: Scheme, u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let out = match scheme {
            Scheme::Imex => self.imex(u, dt),
            Scheme::Midpoint => self.midpoint(u, dt),
        };
        Self::check_finite(&out)?;
        Ok(out)
    }

    fn midpoint(&self, u: &[f64], dt: f64) -> Vec<f64> {
        let mut f = vec![0.0; u.len()];
        self.rhs(u, &mut f);
        let half: Vec<f64> = u.iter().zip(&f).map(|(v, g)| v + 0.5 * dt * g).collect();
        self.rhs(&half, &mut f);
        u.iter().zip(&f).map(|(v, g)| v + dt * g).collect()
    }

    /// `(I - dt L) w = dt (L u + K u^p)` for the increment `w = u' - u`,
    /// solved with the Thomas algorithm. Solving for the increment keeps
    /// spatially constant states constant to rounding of `w`, not of `u`.
    fn imex(&self, u: &[f64], dt: f64) -> Vec<f64> {
        let k = self.coefficient(u);
        let p = self.params.p();
        let (lower, upper) = self.grid.laplacian_coefficients();
        let n = u.len();
        let mut x = vec![0.0; n];
        laplacian_into(self.grid, u, &mut x);
        for (xi, &v) in x.iter_mut().zip(u) {
            *xi = dt * (*xi + k * v.max(0.0).powf(p));
        }
        // forward sweep; sub-diagonal -dt lower_i, super-diagonal -dt upper_i
        let mut c = vec![0.0; n];
        let mut denom = 1.0 + dt * upper[0];
        c[0] = -dt * upper[0] / denom;
        x[0] /= denom;
        for i in 1..n {
            let a = -dt * lower[i];
            let diag = 1.0 + dt * (lower[i] + upper[i]);
            denom = diag - a * c[i - 1];
            c[i] = -dt * upper[i] / denom;
            x[i] = (x[i] - a * x[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x.iter_mut().zip(u).for_each(|(w, v)| *w += v);
        x
    }
}

/// Result of one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub field: Field,
    pub dt: f64,
    /// Weighted mass added by clipping negative values.
    pub clipped: f64,
    /// Smallest value before clipping.
    pub min_before_clip: f64,
    /// Scaled step-doubling error estimate (accepted when `<= 1`).
    pub error: f64,
}

/// Largest step allowed by the stability and reaction bounds at `sup`.
pub fn step_bound(control: &StepControl, params: &ModelParams, grid: &RadialGrid, sup: f64) -> f64 {
    let p = params.p();
    let mut bound = if sup > 0.0 {
        control.safety / (p * sup.powf(p - 1.0))
    } else {
        f64::INFINITY
    };
    if control.scheme == Scheme::Midpoint {
        let h = grid.h_min();
        bound = bound.min(control.cfl_coeff * h * h / (2.0 * params.dim()));
    }
    bound
}

fn clip(grid: &RadialGrid, u: &mut [f64]) -> (f64, f64) {
    let min = u.iter().copied().fold(f64::INFINITY, f64::min);
    let mut added = 0.0;
    for (v, w) in u.iter_mut().zip(grid.weights()) {
        if *v < 0.0 {
            added -= *v * w;
            *v = 0.0;
        }
    }
    (min, added)
}

/// One step of size `min(dt, bounds)` with a step-doubling error estimate.
///
/// For the IMEX scheme the result is the Richardson combination of one full
/// and two half steps; the midpoint scheme keeps the two half steps.
pub fn advance(u: &Field, dt: f64, problem: &Problem<'_>, control: &StepControl) -> Result<StepOutcome> {
    Problem::check_finite(u)?;
    let dt = dt.min(step_bound(control, problem.params, problem.grid, u.max()));
    let full = problem.substep(control.scheme, u, dt)?;
    let mid = problem.substep(control.scheme, u, 0.5 * dt)?;
    let two = problem.substep(control.scheme, &mid, 0.5 * dt)?;
    let error = two
        .iter()
        .zip(&full)
        .zip(u.iter())
        .map(|((a, b), v)| (a - b).abs() / (control.atol + control.rtol * a.abs().max(v.abs())))
        .fold(0.0, f64::max);
    let mut next: Vec<f64> = match control.scheme {
        // local extrapolation lifts the first-order pair to second order
        Scheme::Imex => two.iter().zip(&full).map(|(a, b)| 2.0 * a - b).collect(),
        Scheme::Midpoint => two,
    };
    let (min_before_clip, clipped) = clip(problem.grid, &mut next);
    Ok(StepOutcome {
        field: Field(next),
        dt,
        clipped,
        min_before_clip,
        error,
    })
}

fn is_monotone(u: &[f64], sup: f64) -> bool {
    let tol = 1e-10 * sup.abs();
    u.windows(2).all(|w| w[1] <= w[0] + tol)
}

fn record(grid: &RadialGrid, problem: &Problem<'_>, u: &Field, t: f64, dt: f64, min_u: f64) -> TraceRecord {
    let s = nonlocal_state(grid, u, problem.params);
    TraceRecord {
        t,
        dt,
        sup_u: s.sup_u,
        m_beta_avg: s.m_beta_avg,
        ubar: s.ubar,
        k: match problem.coupling {
            Coupling::NonLocal => s.k,
            Coupling::Frozen(d) => d,
        },
        min_u,
        u_at_half: grid.interpolate(u, 0.5),
        monotone_ok: is_monotone(u, s.sup_u),
    }
}

fn diagnostic(grid: &RadialGrid, params: &ModelParams, u: &Field, t: f64, ubar: f64, clip_total: f64) -> FieldDiagnostic {
    let n = params.n() as i32;
    let point = grid
        .nodes()
        .iter()
        .zip(u.iter())
        .map(|(r, v)| r.powi(n) * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let p = params.p();
    FieldDiagnostic {
        t,
        point_bound_excess: point - ubar,
        clip_total,
        outer_average: restricted_average(grid, u, 0.25, 1.0).unwrap_or(f64::NAN),
        avg_u_p: ball_average(grid, &u.map(|v| v.max(0.0).powf(p))),
    }
}

/// Integrates the non-local problem from `u0`.
pub fn run(params: &ModelParams, grid: &RadialGrid, u0: &Field, control: &StepControl) -> Result<SimulationOutcome> {
    integrate(
        &Problem {
            params,
            grid,
            coupling: Coupling::NonLocal,
        },
        u0,
        control,
    )
}

/// Same stepper with `K` frozen at `d`, `0 <= d <= 1`.
pub fn run_local_comparison(
    params: &ModelParams,
    grid: &RadialGrid,
    u0: &Field,
    d: f64,
    control: &StepControl,
) -> Result<SimulationOutcome> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidControl(format!("frozen coefficient must lie in [0, 1], got {d}")));
    }
    integrate(
        &Problem {
            params,
            grid,
            coupling: Coupling::Frozen(d),
        },
        u0,
        control,
    )
}

/// Two-sum of `(hi, lo) + dt`, renormalised.
fn compensated_add(hi: f64, lo: f64, dt: f64) -> (f64, f64) {
    let s = hi + dt;
    let b = s - hi;
    let err = (hi - (s - b)) + (dt - b);
    let lo = lo + err;
    let out = s + lo;
    (out, lo - (out - s))
}

/// Appends a record, replacing the previous one when the rounded times agree
/// so the trace stays strictly increasing in `t`.
fn push_record(trace: &mut Trace, diagnostics: &mut Vec<FieldDiagnostic>, rec: TraceRecord, diag: FieldDiagnostic) {
    if trace.last().is_some_and(|last| last.t >= rec.t) && trace.len() > 1 {
        trace.records.pop();
        diagnostics.pop();
    }
    trace.records.push(rec);
    diagnostics.push(diag);
}

pub fn integrate(problem: &Problem<'_>, u0: &Field, control: &StepControl) -> Result<SimulationOutcome> {
    control.validate()?;
    let grid = problem.grid;
    if u0.len() != grid.len() {
        return Err(Error::InvalidInitialData(format!(
            "field has {} values, grid has {} nodes",
            u0.len(),
            grid.len()
        )));
    }
    Problem::check_finite(u0)?;
    if u0.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInitialData("initial data must be nonnegative".into()));
    }
    let params = problem.params;
    let p = params.p();

    let mut times: Vec<f64> = control
        .snapshot_times
        .iter()
        .copied()
        .filter(|&s| s > 0.0 && s < control.t_end)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times.push(control.t_end);
    let mut next_time = 0;
    let mut levels: Vec<f64> = control.snapshot_levels.clone();
    levels.sort_by(f64::total_cmp);
    let mut next_level = levels.partition_point(|&l| l <= u0.max());

    let mut u = u0.clone();
    // t + t_lo carries the time exactly enough to keep advancing once dt drops
    // below the spacing of doubles near t
    let mut t = 0.0;
    let mut t_lo = 0.0;
    let mut dt = control.dt_init;
    let mut clip_total = 0.0;
    let first = record(grid, problem, &u, 0.0, 0.0, u.min());
    let mut trace = Trace {
        records: vec![first],
    };
    let mut diagnostics = vec![diagnostic(grid, params, &u, 0.0, first.ubar, 0.0)];
    let mut snapshots = vec![Snapshot {
        kind: SnapshotKind::Initial,
        t: 0.0,
        field: u.clone(),
    }];
    let mut steps = 0usize;
    let mut rejected = 0usize;
    let mut pending = false;

    let status = loop {
        let sup = u.max();
        if sup >= control.u_max {
            break Status::BlowupDetected;
        }
        if steps >= control.max_steps {
            break Status::StepCollapse;
        }
        let target = times[next_time];
        let bound = step_bound(control, params, grid, sup);
        dt = dt.min(bound).min(control.dt_cap());
        let remaining = (target - t) - t_lo;
        let lands = dt >= remaining;
        if lands {
            dt = remaining;
        }
        let tau = if sup > 0.0 {
            1.0 / (p * sup.powf(p - 1.0))
        } else {
            f64::INFINITY
        };
        let collapsed = !(dt >= control.dt_min * tau.min(control.t_end));
        if collapsed {
            break if sup > 0.1 * control.u_max {
                Status::BlowupDetected
            } else {
                Status::StepCollapse
            };
        }
        let step = match advance(&u, dt, problem, control) {
            Ok(s) => s,
            Err(Error::NonFiniteField { .. }) => {
                rejected += 1;
                dt *= 0.25;
                continue;
            }
            Err(e) => return Err(e),
        };
        if step.error > 1.0 {
            rejected += 1;
            dt *= (0.9 * step.error.powf(-0.5)).clamp(0.2, 1.0);
            continue;
        }
        steps += 1;
        if lands {
            (t, t_lo) = (target, 0.0);
        } else {
            (t, t_lo) = compensated_add(t, t_lo, step.dt);
        }
        clip_total += step.clipped;
        u = step.field;
        let grow = if step.error > 0.0 {
            (0.9 * step.error.powf(-0.5)).clamp(0.2, 2.0)
        } else {
            2.0
        };
        dt = step.dt * grow;

        let sup = u.max();
        let at_time = lands && next_time + 1 < times.len();
        let mut crossed = false;
        while next_level < levels.len() && sup >= levels[next_level] {
            next_level += 1;
            crossed = true;
        }
        let done = sup >= control.u_max || t >= control.t_end;
        pending = true;
        if steps.is_multiple_of(control.stride) || done || at_time || crossed {
            let rec = record(grid, problem, &u, t, step.dt, step.min_before_clip);
            let diag = diagnostic(grid, params, &u, t, rec.ubar, clip_total);
            push_record(&mut trace, &mut diagnostics, rec, diag);
            pending = false;
        }
        if at_time {
            snapshots.push(Snapshot {
                kind: SnapshotKind::Time(target),
                t,
                field: u.clone(),
            });
            next_time += 1;
        }
        if crossed {
            snapshots.push(Snapshot {
                kind: SnapshotKind::Level(levels[next_level - 1]),
                t,
                field: u.clone(),
            });
        }
        if sup >= control.u_max {
            break Status::BlowupDetected;
        }
        if t >= control.t_end {
            break Status::ReachedHorizon;
        }
    };
    if pending {
        let rec = record(grid, problem, &u, t, trace.last().map_or(0.0, |r| r.dt), u.min());
        let diag = diagnostic(grid, params, &u, t, rec.ubar, clip_total);
        push_record(&mut trace, &mut diagnostics, rec, diag);
    }
    snapshots.push(Snapshot {
        kind: SnapshotKind::Final,
        t,
        field: u,
    });
    Ok(SimulationOutcome {
        status,
        t_final: t,
        trace,
        diagnostics,
        snapshots,
        steps,
        rejected,
    })
}

/// Pointwise comparison of two runs at the times where both stored a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: f64,
    /// `min_i (u_i - ũ_i)`
    pub min_difference: f64,
    /// `max(sup u, sup ũ)` at that time
    pub scale: f64,
    pub worst_radius: f64,
}

/// Compares `upper` against `lower` at every shared snapshot time.
pub fn compare_runs(grid: &RadialGrid, upper: &SimulationOutcome, lower: &SimulationOutcome) -> Vec<ComparisonRow> {
    upper
        .snapshots
        .iter()
        .filter(|s| matches!(s.kind, SnapshotKind::Initial | SnapshotKind::Time(_)))
        .filter_map(|s| {
            let other = lower.snapshots.iter().find(|o| o.kind == s.kind)?;
            let (idx, diff) = s
                .field
                .iter()
                .zip(other.field.iter())
                .map(|(a, b)| a - b)
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
            Some(ComparisonRow {
                t: s.t,
                min_difference: diff,
                scale: s.field.max().max(other.field.max()),
                worst_radius: grid.nodes()[idx],
            })
        })
        .collect()
}

/// Trajectory of the homogeneous ODE `U' = U^p (1 - σ U^β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `|U(t_end) - σ^(-1/β)|`, or infinity when `σ = 0`.
    pub limit_gap: f64,
    /// The solution exceeded `u_max` before `t_end`.
    pub blew_up: bool,
}

impl OdeTrajectory {
    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

fn ode_rhs(p: f64, beta: f64, sigma: f64, u: f64) -> f64 {
    let u = u.max(0.0);
    u.powf(p) * (1.0 - sigma * u.powf(beta))
}

/// Adaptive Dormand-Prince 5(4) integration of the homogeneous ODE.
pub fn run_homogeneous_ode(p: f64, beta: f64, sigma: f64, u0: f64, t_end: f64) -> Result<OdeTrajectory> {
    run_homogeneous_ode_with(p, beta, sigma, u0, t_end, 1e-12, 1e8)
}

pub fn run_homogeneous_ode_with(
    p: f64,
    beta: f64,
    sigma: f64,
    u0: f64,
    t_end: f64,
    tol: f64,
    u_max: f64,
) -> Result<OdeTrajectory> {
    if !(u0 >= 0.0 && u0.is_finite()) {
        return Err(Error::InvalidInitialData(format!("U0 must be finite and nonnegative, got {u0}")));
    }
    if !(t_end > 0.0) || !(sigma >= 0.0) || !(p > 1.0) {
        return Err(Error::InvalidControl("need t_end > 0, sigma >= 0, p > 1".into()));
    }
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let f = |u: f64| ode_rhs(p, beta, sigma, u);
    let equilibrium = (sigma > 0.0).then(|| sigma.powf(-1.0 / beta));
    let mut times = vec![0.0];
    let mut values = vec![u0];
    let (mut t, mut u) = (0.0, u0);
    let mut h = (t_end * 1e-3).min(0.1);
    let mut blew_up = false;
    while t < t_end {
        if u >= u_max {
            blew_up = true;
            break;
        }
        let last = h >= t_end - t;
        if last {
            h = t_end - t;
        }
        let mut k = [0.0; 7];
        for s in 0..7 {
            let ui = u + h * (0..s).map(|j| A[s][j] * k[j]).sum::<f64>();
            k[s] = f(ui);
        }
        let u5 = u + h * (0..7).map(|j| B5[j] * k[j]).sum::<f64>();
        let u4 = u + h * (0..7).map(|j| B4[j] * k[j]).sum::<f64>();
        let err = (u5 - u4).abs() / (tol * (1.0 + u.abs().max(u5.abs())));
        if !u5.is_finite() || err > 1.0 {
            h *= if u5.is_finite() { (0.9 * err.powf(-0.2)).max(0.1) } else { 0.1 };
            if t + h == t {
                blew_up = true;
                break;
            }
            continue;
        }
        t = if last { t_end } else { t + h };
        // trajectories never cross the steady state and move monotonically
        // towards it; project out overshoots at the tolerance level
        u = match equilibrium {
            Some(eq) if u < eq => u5.clamp(u, eq),
            Some(eq) if u > eq => u5.clamp(eq, u),
            Some(eq) => eq,
            None => u5.max(u),
        };
        times.push(t);
        values.push(u);
        h *= if err > 0.0 { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) } else { 5.0 };
    }
    let limit_gap = if sigma > 0.0 {
        (u - sigma.powf(-1.0 / beta)).abs()
    } else {
        f64::INFINITY
    };
    Ok(OdeTrajectory {
        times,
        values,
        limit_gap,
        blew_up,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::initdata::SpikeProfile;
    use crate::model::{validate_params, RawParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(n: i64, p: f64, beta: f64, sigma: f64, lambda: f64, delta: f64) -> ModelParams {
        validate_params(&RawParams { n, p, beta, sigma, lambda, delta }).unwrap()
    }

    /// Classical RK4 with step halving until two successive results agree.
    fn rk4_oracle(p: f64, beta: f64, sigma: f64, u0: f64, t_end: f64) -> f64 {
        let f = |u: f64| u.powf(p) * (1.0 - sigma * u.powf(beta));
        let solve = |n: usize| {
            let h = t_end / n as f64;
            let mut u = u0;
            for _ in 0..n {
                let k1 = f(u);
                let k2 = f(u + 0.5 * h * k1);
                let k3 = f(u + 0.5 * h * k2);
                let k4 = f(u + h * k3);
                u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            u
        };
        let mut n = 1000;
        let mut prev = solve(n);
        loop {
            n *= 2;
            let next = solve(n);
            if (next - prev).abs() < 1e-13 || n > 1 << 22 {
                return next;
            }
            prev = next;
        }
    }

    #[test]
    fn ode_fixed_points_are_constant() {
        let eq = run_homogeneous_ode(3.0, 2.0, 4.0, 0.5, 10.0).unwrap();
        assert!(eq.values.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let zero = run_homogeneous_ode(3.0, 2.0, 4.0, 0.0, 10.0).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ode_matches_step_halving_oracle() {
        for u0 in [0.25, 0.5, 2.0] {
            let traj = run_homogeneous_ode(2.0, 2.0, 1.0, u0, 20.0).unwrap();
            let oracle = rk4_oracle(2.0, 2.0, 1.0, u0, 20.0);
            assert!((traj.terminal() - oracle).abs() < 1e-9, "{u0}: {} vs {oracle}", traj.terminal());
            assert!(traj.limit_gap < 1e-6);
            let increasing = u0 < 1.0;
            assert!(traj
                .values
                .windows(2)
                .all(|w| if increasing { w[1] >= w[0] - 1e-14 } else { w[1] <= w[0] + 1e-14 }));
        }
    }

    #[test]
    fn ode_without_saturation_blows_up_at_exact_time() {
        // U' = U^2 from 2 blows up at 0.5
        let traj = run_homogeneous_ode(2.0, 2.0, 0.0, 2.0, 1.0).unwrap();
        assert!(traj.blew_up);
        let t = *traj.times.last().unwrap();
        assert!((t - 0.5).abs() < 1e-6, "{t}");
    }

    #[test]
    fn equilibrium_and_zero_fields_stay_put() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(64, 1.0, 4).unwrap();
        let control = StepControl {
            t_end: 1.0,
            ..Default::default()
        };
        for c in [1.0, 0.0] {
            let out = run(&prm, &g, &Field::constant(g.len(), c), &control).unwrap();
            assert_eq!(out.status, Status::ReachedHorizon);
            assert_eq!(out.t_final, 1.0);
            for r in &out.trace.records {
                assert!((r.sup_u - c).abs() < 1e-8, "{}", r.sup_u);
            }
        }
    }

    #[test]
    fn single_step_from_spike_follows_rhs_at_origin() {
        // Δ_r u0(0) = -λ N a δ^-(a+2) = -1600 dominates K u0(0)^p ≈ 3.36, so
        // the peak first drops
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(2048, 2.0, 4).unwrap();
        let u0 = SpikeProfile::new(&prm).build_u0(&g);
        let f0 = crate::operators::rhs(&g, &u0, &prm).unwrap()[0];
        let k0 = 1.0 - 0.05f64.powi(2) * crate::initdata::phi_power_average(4, 1.0, 0.05, 2.0);
        assert_relative_eq!(f0, -1600.0 + k0 * 1.5f64.powi(3), max_relative = 1e-9);
        let problem = Problem {
            params: &prm,
            grid: &g,
            coupling: Coupling::NonLocal,
        };
        let dt = 1e-9;
        let step = advance(&u0, dt, &problem, &StepControl::default()).unwrap();
        assert_relative_eq!((step.field[0] - u0[0]) / dt, f0, max_relative = 1e-2);
        assert_eq!(step.clipped, 0.0);
    }

    #[test]
    fn constant_data_with_unit_coefficient_blows_up_like_the_ode() {
        // u' = u^3 from c = 2 blows up at c^-2 / 2 = 0.125
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(32, 1.0, 4).unwrap();
        let control = StepControl {
            t_end: 1.0,
            ..Default::default()
        };
        let out = run_local_comparison(&prm, &g, &Field::constant(g.len(), 2.0), 1.0, &control).unwrap();
        assert_eq!(out.status, Status::BlowupDetected);
        assert!((out.t_final - 0.125).abs() < 5e-3 * 0.125, "{}", out.t_final);
        let last = out.trace.last().unwrap();
        assert!(last.sup_u >= 1e8);
    }

    #[test]
    fn heat_flow_relaxes_to_the_mean() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(256, 2.0, 4).unwrap();
        let u0 = SpikeProfile::new(&prm).build_u0(&g);
        let mean = ball_average(&g, &u0);
        let control = StepControl {
            t_end: 2.0,
            ..Default::default()
        };
        let out = run_local_comparison(&prm, &g, &u0, 0.0, &control).unwrap();
        assert_eq!(out.status, Status::ReachedHorizon);
        let last = out.final_field();
        assert!((last.max() - mean).abs() < 1e-6 * mean.max(1.0));
        assert_relative_eq!(ball_average(&g, last), mean, max_relative = 1e-12);
    }

    #[test]
    fn frozen_coefficient_must_be_in_unit_interval() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(32, 1.0, 4).unwrap();
        let u0 = Field::constant(g.len(), 1.0);
        assert!(run_local_comparison(&prm, &g, &u0, 1.5, &StepControl::default()).is_err());
        assert!(run_local_comparison(&prm, &g, &u0, -0.1, &StepControl::default()).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(128, 2.0, 4).unwrap();
        let u0 = SpikeProfile::new(&prm).build_u0(&g);
        let control = StepControl {
            t_end: 0.01,
            ..Default::default()
        };
        let a = run(&prm, &g, &u0, &control).unwrap();
        let b = run(&prm, &g, &u0, &control).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lands_on_snapshot_times() {
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(64, 2.0, 4).unwrap();
        let u0 = SpikeProfile::new(&prm).build_u0(&g);
        let control = StepControl {
            t_end: 0.05,
            snapshot_times: vec![0.01, 0.02],
            ..Default::default()
        };
        let out = run(&prm, &g, &u0, &control).unwrap();
        assert!(out.field_at(0.01).is_some() && out.field_at(0.02).is_some());
        assert!(out.trace.records.iter().any(|r| r.t == 0.01));
        assert!(out.trace.records.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn explicit_scheme_confirms_early_decay_of_small_spikes() {
        // independent scheme on a uniform mesh: the spike flattens instead of growing
        let prm = params(4, 3.0, 2.0, 1.0, 0.05, 0.05);
        let g = build_grid(128, 1.0, 4).unwrap();
        let u0 = SpikeProfile::new(&prm).build_u0(&g);
        let base = StepControl {
            t_end: 0.01,
            snapshot_times: vec![0.005],
            ..Default::default()
        };
        let imex = run(&prm, &g, &u0, &base).unwrap();
        let explicit = run(
            &prm,
            &g,
            &u0,
            &StepControl {
                scheme: Scheme::Midpoint,
                ..base.clone()
            },
        )
        .unwrap();
        for out in [&imex, &explicit] {
            assert_eq!(out.status, Status::ReachedHorizon);
            assert!(out.final_field().max() < 0.5 * u0.max());
        }
        let (a, b) = (imex.field_at(0.005).unwrap(), explicit.field_at(0.005).unwrap());
        let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3 * a.max(), "{diff}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn spike_runs_keep_their_invariants(
            n in 3i64..6,
            p in 2.0f64..4.0,
            lambda in 0.01f64..0.5,
            delta in 0.05f64..0.3,
            sigma in 0.1f64..2.0,
        ) {
            let prm = params(n, p, 1.5f64.min(p), sigma, lambda, delta);
            let g = build_grid(96, 2.0, n as u32).unwrap();
            let u0 = SpikeProfile::new(&prm).build_u0(&g);
            let control = StepControl { t_end: 0.02, ..Default::default() };
            let out = run(&prm, &g, &u0, &control).unwrap();
            let eps = g.discretization_tolerance();
            for (r, d) in out.trace.records.iter().zip(&out.diagnostics) {
                prop_assert!(r.min_u >= -1e-12);
                prop_assert!(r.monotone_ok);
                prop_assert!(d.point_bound_excess <= eps);
                prop_assert!(r.sup_u.is_finite());
            }
            for w in out.trace.records.windows(2) {
                prop_assert!(w[1].t > w[0].t);
                if w[0].k >= 0.0 {
                    prop_assert!(w[1].ubar >= w[0].ubar * (1.0 - 1e-12));
                }
            }
            if out.trace.records[0].m_beta_avg < 1.0 / sigma {
                prop_assert!(out.trace.records.iter().all(|r| r.k > -1e-10));
            }
        }

        #[test]
        fn nonlocal_run_dominates_frozen_run(lambda in 0.02f64..0.3, d in 0.0f64..0.5) {
            // K stays near 1 for these amplitudes, so freezing it at d <= K
            // can only slow growth
            let prm = params(4, 3.0, 2.0, 0.5, lambda, 0.1);
            let g = build_grid(64, 2.0, 4).unwrap();
            let u0 = SpikeProfile::new(&prm).build_u0(&g);
            let control = StepControl { t_end: 0.05, snapshot_times: vec![0.01, 0.02, 0.04], ..Default::default() };
            let upper = run(&prm, &g, &u0, &control).unwrap();
            let lower = run_local_comparison(&prm, &g, &u0, d, &control).unwrap();
            let eps = g.discretization_tolerance();
            for row in compare_runs(&g, &upper, &lower) {
                prop_assert!(row.min_difference >= -eps * row.scale, "{row:?}");
            }
        }
    }

    #[test]
    fn invalid_control_is_rejected() {
        let bad = StepControl {
            safety: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidControl(_))));
    }
}
