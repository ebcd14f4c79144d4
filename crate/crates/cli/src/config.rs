//! Experiment configuration (TOML).
//!
//! Unknown keys are rejected everywhere so that typos surface as config
//! errors instead of silently falling back to defaults.

use std::path::{Path, PathBuf};

use nlfkpp::grid::{build_grid, Field, RadialGrid};
use nlfkpp::initdata::{InitialData, SpikeProfile, TableProfile};
use nlfkpp::model::{validate_params, AlphaSampling, ModelParams, RawParams};
use nlfkpp::solver::{Scheme, StepControl};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Worker threads for sweeps; `--workers` overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub model: RawParams,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub constants: ConstantsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "M")]
    pub m: usize,
    pub gamma: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { m: 2048, gamma: 2.0 }
    }
}

/// Step-size control; see [`StepControl`] for the meaning of each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub t_end: f64,
    pub dt_init: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_max: Option<f64>,
    pub dt_min: f64,
    pub safety: f64,
    pub cfl_coeff: f64,
    pub u_max: f64,
    pub max_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub scheme: Scheme,
}

impl Default for ControlSection {
    fn default() -> Self {
        let c = StepControl::default();
        Self {
            t_end: c.t_end,
            dt_init: c.dt_init,
            dt_max: c.dt_max,
            dt_min: c.dt_min,
            safety: c.safety,
            cfl_coeff: c.cfl_coeff,
            u_max: c.u_max,
            max_steps: c.max_steps,
            rtol: c.rtol,
            atol: c.atol,
            scheme: c.scheme,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Used when `--out` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub stride: usize,
    pub snapshot_levels: Vec<f64>,
    pub snapshot_times: Vec<f64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        let c = StepControl::default();
        Self {
            dir: None,
            stride: c.stride,
            snapshot_levels: c.snapshot_levels,
            snapshot_times: c.snapshot_times,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialSection {
    /// `lambda * phi_delta`
    #[default]
    Spike,
    Constant {
        value: f64,
    },
    /// Two-column `r u` file; relative paths resolve against the config file.
    Table {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsSection {
    pub octaves: u32,
    pub per_octave: u32,
    /// Upper time limit of the informational `L^p` audit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp_cutoff: Option<f64>,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        let s = AlphaSampling::default();
        Self {
            octaves: s.octaves,
            per_octave: s.per_octave,
            lp_cutoff: None,
        }
    }
}

impl ConstantsSection {
    pub fn sampling(&self) -> AlphaSampling {
        AlphaSampling {
            octaves: self.octaves,
            per_octave: self.per_octave,
        }
    }
}

/// Parameter axes; the sweep runs the full cross product. Missing axes keep
/// the value from `[model]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    #[serde(rename = "N", skip_serializing_if = "Vec::is_empty")]
    pub n: Vec<i64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub p: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sigma: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lambda: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub delta: Vec<f64>,
}

impl SweepSection {
    /// Cross product in lexicographic order over `(N, p, beta, sigma, lambda,
    /// delta)`, each axis sorted ascending with duplicates removed.
    pub fn points(&self, base: &RawParams) -> Vec<RawParams> {
        fn axis<T: Copy + PartialOrd>(values: &[T], fallback: T) -> Vec<T> {
            if values.is_empty() {
                return vec![fallback];
            }
            let mut v = values.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            v.dedup_by(|a, b| a == b);
            v
        }
        let mut out = Vec::new();
        for &n in &axis(&self.n, base.n) {
            for &p in &axis(&self.p, base.p) {
                for &beta in &axis(&self.beta, base.beta) {
                    for &sigma in &axis(&self.sigma, base.sigma) {
                        for &lambda in &axis(&self.lambda, base.lambda) {
                            for &delta in &axis(&self.delta, base.delta) {
                                out.push(RawParams {
                                    n,
                                    p,
                                    beta,
                                    sigma,
                                    lambda,
                                    delta,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Initial value of the homogeneous ODE.
    #[serde(rename = "U0", skip_serializing_if = "Option::is_none")]
    pub u0: Option<f64>,
    /// Horizon of the ODE; defaults to `control.t_end`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    /// Frozen coefficient of the local run; defaults to the computed `D`.
    #[serde(rename = "D", skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigParse(e.message().trim().to_string()))
    }

    /// Reads a config file and resolves relative table paths against it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let InitialSection::Table { path: table } = &mut config.initial {
            if table.is_relative() {
                if let Some(dir) = path.parent() {
                    *table = dir.join(&*table);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Same experiment at a different parameter point, without sweep axes.
    pub fn at_point(&self, model: RawParams) -> Self {
        Self {
            model,
            sweep: None,
            ..self.clone()
        }
    }

    pub fn step_control(&self) -> StepControl {
        let c = &self.control;
        StepControl {
            dt_init: c.dt_init,
            dt_max: c.dt_max,
            safety: c.safety,
            cfl_coeff: c.cfl_coeff,
            u_max: c.u_max,
            t_end: c.t_end,
            max_steps: c.max_steps,
            dt_min: c.dt_min,
            rtol: c.rtol,
            atol: c.atol,
            scheme: c.scheme,
            stride: self.outputs.stride,
            snapshot_levels: self.outputs.snapshot_levels.clone(),
            snapshot_times: self.outputs.snapshot_times.clone(),
        }
    }

    /// Validates everything a run needs; all failures are config errors.
    pub fn setup(&self) -> Result<Setup> {
        let params = validate_params(&self.model).map_err(CliError::config)?;
        let grid = build_grid(self.grid.m, self.grid.gamma, params.n()).map_err(CliError::config)?;
        let control = self.step_control();
        control.validate().map_err(CliError::config)?;
        let initial = match &self.initial {
            InitialSection::Spike => InitialData::Spike(SpikeProfile::new(&params)),
            InitialSection::Constant { value } => {
                if !(value.is_finite() && *value >= 0.0) {
                    return Err(CliError::ConfigParse(format!(
                        "initial constant must be finite and nonnegative, got {value}"
                    )));
                }
                InitialData::Constant(*value)
            }
            InitialSection::Table { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                InitialData::Table(TableProfile::parse(&text).map_err(CliError::config)?)
            }
        };
        let u0 = initial.build(&grid);
        Ok(Setup {
            params,
            grid,
            control,
            initial,
            u0,
        })
    }
}

/// Validated inputs of a single run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub params: ModelParams,
    pub grid: RadialGrid,
    pub control: StepControl,
    pub initial: InitialData,
    pub u0: Field,
}
