use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nlfkpp::analysis::{audit_fields, audit_invariants, build_report, AuditOptions, AuditTable, BlowupReport, ProfileInput};
use nlfkpp::batch::{self, Execution};
use nlfkpp::initdata::{check_deltaphi_bound, check_supercritical, InequalityReport, InitialData};
use nlfkpp::model::{classify_regime, compute_constants, validate_params, AnalysisConstants, Regime, RawParams};
use nlfkpp::solver::{
    compare_runs, run, run_homogeneous_ode, run_local_comparison, ComparisonRow, SimulationOutcome, Snapshot,
    SnapshotKind, Status, Trace,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Setup, SweepSection};
use crate::error::{CliError, Result};
use crate::output::{self, fmt_f64, JsonHeader, WithHeader};

/// What a single run produced, after its files were written.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub status: Status,
    pub report: BlowupReport,
    /// Names of applicable invariants that failed.
    pub violations: Vec<String>,
}

impl RunSummary {
    /// Maps a finished run onto the command's error channel.
    pub fn into_result(self) -> Result<RunSummary> {
        if self.status == Status::StepCollapse {
            return Err(CliError::Collapsed(format!(
                "{} at t = {}",
                self.status, self.report.t_final
            )));
        }
        if !self.violations.is_empty() {
            return Err(CliError::Invariant(self.violations.join(", ")));
        }
        Ok(self)
    }
}

/// Constants and inequality checks on the initial data.
#[derive(Debug, Clone, Serialize)]
struct InitialChecks {
    constants: Option<AnalysisConstants>,
    deltaphi: Option<InequalityReport>,
    supercritical: Option<InequalityReport>,
    notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct FieldAudit {
    /// Field-level invariants; `point_bound` and `clip_total` are hard checks.
    fields: AuditTable,
    /// Trace invariants with the constant `D` available.
    trace: AuditTable,
    initial: InitialChecks,
}

/// Field-level entries whose failure fails the run.
const HARD_FIELD_CHECKS: [&str; 2] = ["point_bound", "clip_total"];

fn initial_checks(config: &ExperimentConfig, setup: &Setup) -> InitialChecks {
    let mut notes = Vec::new();
    let constants = match compute_constants(&setup.params, &config.constants.sampling()) {
        Ok(c) => Some(c),
        Err(e) => {
            notes.push(format!("constants: {e}"));
            None
        }
    };
    let deltaphi = match &setup.initial {
        InitialData::Spike(profile) => match check_deltaphi_bound(profile, &setup.grid) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("deltaphi: {e}"));
                None
            }
        },
        _ => None,
    };
    let supercritical = constants.map(|c| check_supercritical(&setup.grid, &setup.u0, setup.params.p(), c.big_d));
    InitialChecks {
        constants,
        deltaphi,
        supercritical,
        notes,
    }
}

fn write_snapshots(config: &ExperimentConfig, setup: &Setup, snapshots: &[Snapshot], dir: &Path) -> Result<()> {
    let mut time_index = 0;
    for snap in snapshots {
        let name = output::snapshot_file(&snap.kind, time_index);
        if matches!(snap.kind, SnapshotKind::Time(_)) {
            time_index += 1;
        }
        let text = output::snapshot_csv(config, &snap.kind, snap.t, setup.grid.nodes(), &snap.field);
        output::write_file(&dir.join(name), &text)?;
    }
    Ok(())
}

fn report_for(setup: &Setup, outcome: &SimulationOutcome) -> Result<BlowupReport> {
    let profile = ProfileInput {
        nodes: setup.grid.nodes(),
        values: outcome.final_field(),
    };
    Ok(build_report(
        outcome.status,
        &outcome.trace.records,
        &setup.params,
        Some(profile),
    )?)
}

/// Runs one configuration and writes trace, snapshots, report and field
/// audit into `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let setup = config.setup()?;
    let checks = initial_checks(config, &setup);
    let outcome = run(&setup.params, &setup.grid, &setup.u0, &setup.control)?;

    output::create_dir(dir)?;
    output::write_file(
        &dir.join("trace.csv"),
        &output::trace_csv(config, outcome.status, &outcome.trace.records),
    )?;
    write_snapshots(config, &setup, &outcome.snapshots, dir)?;

    let report = report_for(&setup, &outcome)?;
    let header = JsonHeader::new(config);
    output::write_file(
        &dir.join("report.json"),
        &output::json_string(&WithHeader { body: &report, header }),
    )?;

    let records = &outcome.trace.records;
    let constants = checks.constants.as_ref();
    let lp_cutoff = config
        .constants
        .lp_cutoff
        .or(constants.map(|c| c.t_tilde))
        .unwrap_or(0.0);
    let fields = audit_fields(&outcome.diagnostics, records, &setup.params, &setup.grid, constants, lp_cutoff);
    let trace = audit_invariants(
        records,
        &setup.params,
        &AuditOptions {
            constants,
            tolerance: setup.grid.discretization_tolerance(),
        },
    );
    let violations: Vec<String> = report
        .audit
        .entries
        .iter()
        .chain(fields.entries.iter().filter(|e| HARD_FIELD_CHECKS.contains(&e.name.as_str())))
        .filter(|e| e.applicable && !e.passed)
        .map(|e| e.name.clone())
        .collect();
    let audit = FieldAudit {
        fields,
        trace,
        initial: checks,
    };
    output::write_file(
        &dir.join("field_audit.json"),
        &output::json_string(&WithHeader { body: &audit, header }),
    )?;

    Ok(RunSummary {
        status: outcome.status,
        report,
        violations,
    })
}

fn out_dir(config: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| config.outputs.dir.clone())
        .ok_or_else(|| CliError::ConfigParse("no output directory: pass --out or set outputs.dir".into()))
}

pub fn simulate(config_path: &Path, out: Option<&Path>) -> Result<RunSummary> {
    let config = ExperimentConfig::load(config_path)?;
    let dir = out_dir(&config, out)?;
    run_experiment(&config, &dir)?.into_result()
}

/// Re-derives a report from a persisted trace (and the final snapshot beside
/// it, when present).
pub fn analyze(trace_path: &Path, out: &Path) -> Result<BlowupReport> {
    let trace = output::read_trace(trace_path)?;
    let config = &trace.header.config;
    let params = validate_params(&config.model).map_err(|e| CliError::SchemaMismatch {
        path: trace_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let snapshot_path = trace_path.with_file_name("snapshot_final.csv");
    let snapshot = if snapshot_path.exists() {
        Some(output::read_snapshot(&snapshot_path)?)
    } else {
        None
    };
    let profile = snapshot.as_ref().map(|s| ProfileInput {
        nodes: &s.nodes,
        values: &s.values,
    });
    let mut report = build_report(trace.status, &trace.records, &params, profile)?;
    if trace.truncated {
        report
            .notes
            .push("trace truncated: incomplete final row dropped".into());
    }
    output::write_file(
        out,
        &output::json_string(&WithHeader {
            body: &report,
            header: JsonHeader::new(config),
        }),
    )?;
    Ok(report)
}

/// One line of the sweep aggregate.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub index: usize,
    pub params: RawParams,
    pub regime: Option<Regime>,
    pub outcome: PointOutcome,
}

#[derive(Debug, Clone)]
pub enum PointOutcome {
    /// Invalid parameter point; never run.
    Skipped(String),
    Failed { code: i32, message: String },
    Finished(RunSummary),
}

impl SweepRow {
    fn exit_code(&self) -> i32 {
        match &self.outcome {
            PointOutcome::Skipped(_) => 0,
            PointOutcome::Failed { code, .. } => *code,
            PointOutcome::Finished(s) => s.clone().into_result().err().map_or(0, |e| e.exit_code()),
        }
    }
}

const SWEEP_COLUMNS: &str =
    "index,N,p,beta,sigma,lambda,delta,regime,outcome,status,t_final,T_est,T_tilde,rate_exponent,K_final,violations,note";

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn csv_text(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn sweep_csv(config: &ExperimentConfig, rows: &[SweepRow]) -> String {
    let mut out = output::header_block(config, &[("points", rows.len().to_string())]);
    out.push_str(SWEEP_COLUMNS);
    out.push('\n');
    for row in rows {
        let p = &row.params;
        let regime = row.regime.map(|r| r.tag.to_string()).unwrap_or_else(|| "invalid".into());
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},",
            row.index,
            p.n,
            fmt_f64(p.p),
            fmt_f64(p.beta),
            fmt_f64(p.sigma),
            fmt_f64(p.lambda),
            fmt_f64(p.delta),
            regime
        );
        match &row.outcome {
            PointOutcome::Skipped(msg) => {
                let _ = writeln!(out, "skipped,,,,,,,,{}", csv_text(msg));
            }
            PointOutcome::Failed { message, .. } => {
                let _ = writeln!(out, "failed,,,,,,,,{}", csv_text(message));
            }
            PointOutcome::Finished(s) => {
                let r = &s.report;
                let _ = writeln!(
                    out,
                    "finished,{},{},{},{},{},{},{},",
                    s.status,
                    fmt_f64(r.t_final),
                    opt(r.t_est),
                    fmt_f64(r.t_tilde),
                    opt(r.rate_exponent),
                    fmt_f64(r.k_final),
                    s.violations.join(";"),
                );
            }
        }
    }
    out
}

/// Per `(N, p, beta)`: predicted regime against the observed outcomes.
fn regime_map_csv(config: &ExperimentConfig, rows: &[SweepRow]) -> String {
    let mut out = output::header_block(config, &[]);
    out.push_str("N,p,beta,regime,bound_global,bound_blowup,runs,blowup,horizon,collapse,failed,skipped,consistent\n");
    let mut keys: Vec<(i64, f64, f64)> = Vec::new();
    for row in rows {
        let key = (row.params.n, row.params.p, row.params.beta);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for key in keys {
        let group: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| (r.params.n, r.params.p, r.params.beta) == key)
            .collect();
        let count = |f: &dyn Fn(&PointOutcome) -> bool| group.iter().filter(|r| f(&r.outcome)).count();
        let with_status = |s: Status| count(&|o| matches!(o, PointOutcome::Finished(r) if r.status == s));
        let blowup = with_status(Status::BlowupDetected);
        let horizon = with_status(Status::ReachedHorizon);
        let collapse = with_status(Status::StepCollapse);
        let failed = count(&|o| matches!(o, PointOutcome::Failed { .. }));
        let skipped = count(&|o| matches!(o, PointOutcome::Skipped(_)));
        let regime = group[0].regime;
        // bounded solutions are predicted in the global regime
        let consistent = !(regime.is_some_and(|r| r.tag == nlfkpp::model::RegimeTag::Global) && blowup > 0);
        let (tag, bg, bb) = match regime {
            Some(r) => (r.tag.to_string(), fmt_f64(r.bound_global), fmt_f64(r.bound_blowup)),
            None => ("invalid".into(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{tag},{bg},{bb},{},{blowup},{horizon},{collapse},{failed},{skipped},{consistent}",
            key.0,
            fmt_f64(key.1),
            fmt_f64(key.2),
            group.len()
        );
    }
    out
}

fn sweep_point(config: &ExperimentConfig, index: usize, params: RawParams, root: &Path) -> SweepRow {
    let regime = u32::try_from(params.n)
        .ok()
        .and_then(|n| classify_regime(n, params.p, params.beta).ok());
    let point = config.at_point(params);
    let outcome = match point.setup() {
        Err(e) => PointOutcome::Skipped(e.to_string()),
        Ok(_) => match run_experiment(&point, &root.join(format!("point_{index:04}"))) {
            Ok(summary) => PointOutcome::Finished(summary),
            Err(e) => PointOutcome::Failed {
                code: e.exit_code(),
                message: e.to_string(),
            },
        },
    };
    SweepRow {
        index,
        params,
        regime,
        outcome,
    }
}

/// Runs every point of the cross product; rows come back in point order
/// whatever the worker count. Without axes this is `simulate`.
pub fn sweep(config_path: &Path, out: Option<&Path>, workers: Option<usize>) -> Result<Vec<SweepRow>> {
    let config = ExperimentConfig::load(config_path)?;
    let dir = out_dir(&config, out)?;
    let axes = config.sweep.clone().unwrap_or_default();
    if axes == SweepSection::default() {
        // no axes: a plain simulation
        let summary = run_experiment(&config, &dir)?.into_result()?;
        return Ok(vec![SweepRow {
            index: 0,
            params: config.model,
            regime: validate_params(&config.model).ok().map(|p| p.regime()),
            outcome: PointOutcome::Finished(summary),
        }]);
    }
    let points = axes.points(&config.model);
    let exec = match workers.or(config.workers) {
        Some(w) => Execution::with_workers(w),
        None => Execution::default(),
    };
    output::create_dir(&dir)?;
    let indexed: Vec<(usize, RawParams)> = points.into_iter().enumerate().collect();
    let rows = batch::map(&indexed, exec, |&(i, p)| sweep_point(&config, i, p, &dir));

    output::write_file(&dir.join("sweep.csv"), &sweep_csv(&config, &rows))?;
    output::write_file(&dir.join("regime_map.csv"), &regime_map_csv(&config, &rows))?;

    match rows.iter().map(SweepRow::exit_code).max().unwrap_or(0) {
        0 => Ok(rows),
        code => {
            let bad = rows.iter().filter(|r| r.exit_code() != 0).count();
            let msg = format!("{bad} of {} sweep points failed, see sweep.csv", rows.len());
            Err(if code == 4 {
                CliError::Invariant(msg)
            } else {
                CliError::Collapsed(msg)
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Ode,
    Local,
}

#[derive(Debug, Clone, Serialize)]
struct OdeSummary {
    #[serde(rename = "U0")]
    u0: f64,
    t_end: f64,
    equilibrium: f64,
    terminal: f64,
    limit_gap: f64,
    blew_up: bool,
    monotone: bool,
}

fn oracle_ode(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let params = validate_params(&config.model).map_err(CliError::config)?;
    let oracle = config.oracle.unwrap_or_default();
    let u0 = oracle
        .u0
        .ok_or_else(|| CliError::ConfigParse("oracle ode needs oracle.U0".into()))?;
    let t_end = oracle.t_end.unwrap_or(config.control.t_end);
    let traj = run_homogeneous_ode(params.p(), params.beta(), params.sigma(), u0, t_end).map_err(CliError::config)?;

    let equilibrium = params.equilibrium();
    let rising = u0 <= equilibrium;
    let monotone = traj.values.windows(2).all(|w| if rising { w[1] >= w[0] } else { w[1] <= w[0] });

    output::create_dir(dir)?;
    let mut csv = output::header_block(config, &[("oracle", "ode".into())]);
    csv.push_str("t,U\n");
    for (t, u) in traj.times.iter().zip(&traj.values) {
        let _ = writeln!(csv, "{},{}", fmt_f64(*t), fmt_f64(*u));
    }
    output::write_file(&dir.join("ode_trajectory.csv"), &csv)?;
    let summary = OdeSummary {
        u0,
        t_end,
        equilibrium,
        terminal: traj.terminal(),
        limit_gap: traj.limit_gap,
        blew_up: traj.blew_up,
        monotone,
    };
    output::write_file(
        &dir.join("ode_summary.json"),
        &output::json_string(&WithHeader {
            body: &summary,
            header: JsonHeader::new(config),
        }),
    )?;
    if !monotone {
        return Err(CliError::Invariant("ODE trajectory is not monotone".into()));
    }
    Ok(())
}

/// Loads the non-local run stored in `dir` as an outcome holding its initial
/// and time snapshots.
fn load_paired(dir: &Path, setup: &Setup) -> Result<SimulationOutcome> {
    let trace_path = dir.join("trace.csv");
    let initial_path = dir.join("snapshot_initial.csv");
    if !trace_path.is_file() || !initial_path.is_file() {
        return Err(CliError::MissingPairedRun(dir.to_path_buf()));
    }
    let trace = output::read_trace(&trace_path)?;
    let mut files = vec![(initial_path.clone(), output::read_snapshot(&initial_path)?)];
    files.extend(output::time_snapshots(dir)?);
    let mut snapshots = Vec::with_capacity(files.len());
    for (i, (path, snap)) in files.into_iter().enumerate() {
        if snap.nodes != setup.grid.nodes() {
            return Err(CliError::SchemaMismatch {
                path,
                reason: "paired run used a different grid".into(),
            });
        }
        snapshots.push(Snapshot {
            kind: if i == 0 {
                SnapshotKind::Initial
            } else {
                SnapshotKind::Time(snap.t)
            },
            t: snap.t,
            field: snap.values.into(),
        });
    }
    let t_final = trace.records.last().map_or(0.0, |r| r.t);
    Ok(SimulationOutcome {
        status: trace.status,
        t_final,
        trace: Trace { records: trace.records },
        diagnostics: Vec::new(),
        snapshots,
        steps: 0,
        rejected: 0,
    })
}

#[derive(Debug, Clone, Serialize)]
struct LocalSummary {
    #[serde(rename = "D")]
    d: f64,
    status: Status,
    t_final: f64,
    comparisons: usize,
    tolerance: f64,
    ordered: Option<bool>,
}

fn oracle_local(config: &ExperimentConfig, dir: &Path, paired: Option<&Path>) -> Result<()> {
    let mut setup = config.setup()?;
    let d = match config.oracle.and_then(|o| o.d) {
        Some(d) => d,
        None => compute_constants(&setup.params, &config.constants.sampling())
            .map_err(CliError::config)?
            .big_d,
    };
    let upper = match paired {
        Some(p) if !p.is_dir() => return Err(CliError::MissingPairedRun(p.to_path_buf())),
        Some(p) => Some(load_paired(p, &setup)?),
        None => None,
    };
    if let Some(up) = &upper {
        // land on every time the paired run stored
        for s in &up.snapshots {
            if let SnapshotKind::Time(t) = s.kind {
                if !setup.control.snapshot_times.contains(&t) {
                    setup.control.snapshot_times.push(t);
                }
            }
        }
    }
    let local = run_local_comparison(&setup.params, &setup.grid, &setup.u0, d, &setup.control)?;

    output::create_dir(dir)?;
    let extras = [("status", local.status.to_string()), ("D", fmt_f64(d))];
    let mut trace = output::header_block(config, &extras);
    trace.push_str(&output::trace_table(&local.trace.records));
    output::write_file(&dir.join("trace_local.csv"), &trace)?;
    let final_text = output::snapshot_csv(
        config,
        &SnapshotKind::Final,
        local.t_final,
        setup.grid.nodes(),
        local.final_field(),
    );
    output::write_file(&dir.join("snapshot_local_final.csv"), &final_text)?;

    let tolerance = setup.grid.discretization_tolerance();
    let rows: Vec<ComparisonRow> = upper.as_ref().map_or_else(Vec::new, |up| compare_runs(&setup.grid, up, &local));
    let ordered = upper.is_some().then(|| rows.iter().all(|r| r.min_difference >= -tolerance * r.scale));
    if upper.is_some() {
        let mut csv = output::header_block(config, &[("D", fmt_f64(d)), ("tolerance", fmt_f64(tolerance))]);
        csv.push_str("t,min_difference,scale,worst_radius,ordered\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                fmt_f64(r.t),
                fmt_f64(r.min_difference),
                fmt_f64(r.scale),
                fmt_f64(r.worst_radius),
                r.min_difference >= -tolerance * r.scale
            );
        }
        output::write_file(&dir.join("comparison.csv"), &csv)?;
    }
    let summary = LocalSummary {
        d,
        status: local.status,
        t_final: local.t_final,
        comparisons: rows.len(),
        tolerance,
        ordered,
    };
    output::write_file(
        &dir.join("local_summary.json"),
        &output::json_string(&WithHeader {
            body: &summary,
            header: JsonHeader::new(config),
        }),
    )?;
    if ordered == Some(false) {
        return Err(CliError::Invariant("non-local run fell below the local comparison run".into()));
    }
    Ok(())
}

pub fn oracle(kind: OracleKind, config_path: &Path, out: Option<&Path>, paired: Option<&Path>) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let dir = out_dir(&config, out)?;
    match kind {
        OracleKind::Ode => oracle_ode(&config, &dir),
        OracleKind::Local => oracle_local(&config, &dir, paired),
    }
}

pub fn classify(n: u32, p: f64, beta: f64) -> Result<Regime> {
    classify_regime(n, p, beta).map_err(CliError::config)
}
