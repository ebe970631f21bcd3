//! Scenario files, built-in scenarios and the end-to-end run.
//!
//! A scenario is a JSON document:
//!
//! ```json
//! {
//!   "name": "easyexample",
//!   "factor_dims": [2, 2],
//!   "hamiltonian": {"builder": {"name": "easyexample", "params": {"theta": 1.0}}},
//!   "initial_state": [[1, 0], [0, 0], [0, 0], [0, 0]],
//!   "time": {"t0": 0.0, "t1": 1.0, "grid_step": 0.001},
//!   "current": "generalized_schrodinger",
//!   "rate_choice": "bell",
//!   "ensemble": {"paths": 100000, "master_seed": 7, "query_times": [0.1, 0.5, 0.9]}
//! }
//! ```
//!
//! Complex numbers are `[re, im]`. The Hamiltonian is one of
//! `{"matrix": [[[re, im], ...], ...]}`, `{"builder": {"name", "params"}}` or
//! `{"schedule": [{"until": t, "hamiltonian": {...}}, ...]}` for a
//! piecewise-constant schedule. `current`, `extra_term`, `rate_choice`,
//! `pole_policy`, `thresholds` and `tolerances` are optional.

mod builtins;
mod export;
mod pipeline;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Tolerances;
use crate::currents::ExtraTerm;
use crate::error::Error;
use crate::hilbert::{ComplexSquareMatrix, FactorSpace, KetVector, C64};
use crate::kinetics::RateChoice;
use crate::sampler::PolePolicy;

pub use builtins::{builtin, builtin_names, builtin_scenarios, easyexample};
pub use export::{write_exports, ExportLevel, Manifest};
pub use pipeline::{
    run, CrossingRange, EnsembleDiagnostics, FactorCrossings, KernelDiagnostics, KernelWindow, PoleReport,
    RunArtifacts, RunOptions, RunOutput, RunReport,
};

/// Accepted deviation of the initial amplitudes' norm from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurrentKind {
    MinimalFlow,
    StaticSchrodinger,
    #[default]
    GeneralizedSchrodinger,
}

impl fmt::Display for CurrentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurrentKind::MinimalFlow => "minimal_flow",
            CurrentKind::StaticSchrodinger => "static_schrodinger",
            CurrentKind::GeneralizedSchrodinger => "generalized_schrodinger",
        })
    }
}

impl std::str::FromStr for CurrentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "minimal_flow" => Ok(CurrentKind::MinimalFlow),
            "static_schrodinger" => Ok(CurrentKind::StaticSchrodinger),
            "generalized_schrodinger" => Ok(CurrentKind::GeneralizedSchrodinger),
            _ => Err(format!(
                "unknown current '{s}' (expected minimal_flow, static_schrodinger or generalized_schrodinger)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t0: f64,
    pub t1: f64,
    pub grid_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub paths: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub query_times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuilderSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSegment {
    /// End of the segment; the first segment starts at `t0`.
    pub until: f64,
    pub hamiltonian: HamiltonianSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    Matrix(ComplexSquareMatrix),
    Builder(BuilderSpec),
    Schedule(Vec<ScheduleSegment>),
}

/// Pass/fail limits applied to the run report, plus kernel numerics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub continuity: f64,
    pub master: f64,
    pub chapman_kolmogorov: f64,
    pub kolmogorov_forward: f64,
    pub kolmogorov_backward: f64,
    pub feller_vs_ode: f64,
    pub honesty_deficit: f64,
    /// Ensemble total-variation limit; `None` means `max(0.01, sqrt(D/N))`.
    pub total_variation: Option<f64>,
    /// Limit on the fraction of path time spent in states with `p < 1e-6`.
    pub zero_sojourn: f64,
    pub crossing_gap: f64,
    pub isolated_zero: f64,
    pub n_max: usize,
    pub quad_step: f64,
    pub ode_step: f64,
    pub kernel_windows: usize,
    pub max_kernel_span: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            continuity: 1e-5,
            master: 1e-5,
            chapman_kolmogorov: 1e-5,
            kolmogorov_forward: 1e-4,
            kolmogorov_backward: 1e-4,
            feller_vs_ode: 1e-5,
            honesty_deficit: 1e-6,
            total_variation: None,
            zero_sojourn: 0.01,
            crossing_gap: 1e-8,
            isolated_zero: 1e-8,
            n_max: 25,
            quad_step: 1e-3,
            ode_step: 1e-3,
            kernel_windows: 4,
            max_kernel_span: 0.5,
        }
    }
}

impl Thresholds {
    pub fn total_variation_limit(&self, dim: usize, paths: usize) -> f64 {
        self.total_variation.unwrap_or_else(|| 0.01f64.max((dim as f64 / paths.max(1) as f64).sqrt()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub factor_dims: Vec<usize>,
    pub hamiltonian: HamiltonianSpec,
    pub initial_state: Vec<[f64; 2]>,
    pub time: TimeSpec,
    #[serde(default)]
    pub current: CurrentKind,
    #[serde(default)]
    pub extra_term: ExtraTerm,
    #[serde(default)]
    pub rate_choice: RateChoice,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub pole_policy: PolePolicy,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// Pipeline stage named in run errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Evolve,
    Track,
    Currents,
    Rates,
    Kernels,
    Sampling,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Evolve => "evolve",
            Stage::Track => "track",
            Stage::Currents => "currents",
            Stage::Rates => "rates",
            Stage::Kernels => "kernels",
            Stage::Sampling => "sampling",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("invalid scenario: {0}")]
    Invalid(String),

    #[error("{stage} stage failed: {source}")]
    Stage { stage: Stage, source: Error },

    #[error("export failed: {0}")]
    Export(String),
}

impl ScenarioError {
    pub fn is_pole_abort(&self) -> bool {
        matches!(self, ScenarioError::Stage { source: Error::PoleEncountered { .. }, .. })
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, ScenarioError::Parse { .. } | ScenarioError::Invalid(_))
    }
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// Parses a scenario document and validates it.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Loads a scenario from a built-in name or a JSON file path.
pub fn load_scenario(source: &str) -> Result<Scenario, ScenarioError> {
    if let Some(s) = builtin(source) {
        return Ok(s);
    }
    let path = Path::new(source);
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io { path: source.to_string(), source: e })?;
    parse_scenario(&text)
}

impl Scenario {
    pub fn factor_space(&self) -> Result<FactorSpace, ScenarioError> {
        FactorSpace::new(self.factor_dims.clone()).map_err(|e| invalid(format!("factor_dims: {e}")))
    }

    pub fn total_dim(&self) -> usize {
        self.factor_dims.iter().product()
    }

    pub fn initial_ket(&self) -> Result<KetVector, ScenarioError> {
        let amps: Vec<C64> = self.initial_state.iter().map(|a| C64::new(a[0], a[1])).collect();
        KetVector::new(amps).map_err(|e| invalid(format!("initial_state: {e}")))
    }

    /// Hamiltonian pieces as `(start, end, H)` covering `[t0, t1]`.
    pub fn hamiltonian_segments(&self) -> Result<Vec<(f64, f64, ComplexSquareMatrix)>, ScenarioError> {
        let (t0, t1) = (self.time.t0, self.time.t1);
        match &self.hamiltonian {
            HamiltonianSpec::Schedule(segments) => {
                if segments.is_empty() {
                    return Err(invalid("hamiltonian.schedule: at least one segment is required"));
                }
                let mut out = Vec::new();
                let mut start = t0;
                for (k, seg) in segments.iter().enumerate() {
                    if !(seg.until > start) {
                        return Err(invalid(format!(
                            "hamiltonian.schedule[{k}].until: segment ends must increase strictly from t0"
                        )));
                    }
                    if let HamiltonianSpec::Schedule(_) = seg.hamiltonian {
                        return Err(invalid(format!("hamiltonian.schedule[{k}]: schedules cannot be nested")));
                    }
                    let h = self.resolve(&seg.hamiltonian, &format!("hamiltonian.schedule[{k}]"))?;
                    let end = seg.until.min(t1);
                    if start < t1 {
                        out.push((start, end, h));
                    }
                    start = seg.until;
                }
                if start < t1 {
                    return Err(invalid("hamiltonian.schedule: the last segment must reach t1"));
                }
                Ok(out)
            }
            other => Ok(vec![(t0, t1, self.resolve(other, "hamiltonian")?)]),
        }
    }

    fn resolve(&self, spec: &HamiltonianSpec, field: &str) -> Result<ComplexSquareMatrix, ScenarioError> {
        let h = match spec {
            HamiltonianSpec::Matrix(m) => m.clone(),
            HamiltonianSpec::Builder(b) => builtins::build_hamiltonian(b, &self.factor_dims)
                .map_err(|e| invalid(format!("{field}.builder: {e}")))?,
            HamiltonianSpec::Schedule(_) => unreachable!("schedules are unpacked by the caller"),
        };
        let dim = self.total_dim();
        if h.dim() != dim {
            return Err(invalid(format!("{field}: dimension {} does not match factor_dims product {dim}", h.dim())));
        }
        let deviation = h.hermitian_deviation();
        if deviation > self.tolerances.hermitian {
            return Err(invalid(format!("{field}: matrix is not Hermitian (max deviation {deviation:.3e})")));
        }
        Ok(h)
    }

    /// Checks every documented invariant, naming the first one violated.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name: must be non-empty"));
        }
        if self.factor_dims.is_empty() || self.factor_dims.contains(&0) {
            return Err(invalid("factor_dims: need at least one factor, each of dimension >= 1"));
        }
        let dim = self.total_dim();
        if self.initial_state.len() != dim {
            return Err(invalid(format!(
                "initial_state: {} amplitudes given, factor_dims product is {dim}",
                self.initial_state.len()
            )));
        }
        if self.initial_state.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("initial_state: amplitudes must be finite"));
        }
        let norm = self.initial_state.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(invalid(format!("initial_state: amplitudes must be normalized within 1e-8 (norm {norm})")));
        }
        let TimeSpec { t0, t1, grid_step } = self.time;
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(invalid("time: need finite t0 < t1"));
        }
        if !(grid_step > 0.0 && grid_step <= t1 - t0) {
            return Err(invalid("time.grid_step: must be > 0 and at most t1 - t0"));
        }
        if self.ensemble.paths < 1 {
            return Err(invalid("ensemble.paths: N must be >= 1"));
        }
        if let Some(q) = self.ensemble.query_times.iter().find(|q| !(**q >= t0 && **q <= t1)) {
            return Err(invalid(format!("ensemble.query_times: {q} lies outside [t0, t1]")));
        }
        if let RateChoice::General { c } = &self.rate_choice {
            c.validate(dim).map_err(|e| invalid(format!("rate_choice.general.c: {e}")))?;
        }
        let th = &self.thresholds;
        let positive = [
            ("continuity", th.continuity),
            ("master", th.master),
            ("chapman_kolmogorov", th.chapman_kolmogorov),
            ("kolmogorov_forward", th.kolmogorov_forward),
            ("kolmogorov_backward", th.kolmogorov_backward),
            ("feller_vs_ode", th.feller_vs_ode),
            ("honesty_deficit", th.honesty_deficit),
            ("zero_sojourn", th.zero_sojourn),
            ("quad_step", th.quad_step),
            ("ode_step", th.ode_step),
            ("max_kernel_span", th.max_kernel_span),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(invalid(format!("thresholds.{field}: must be > 0")));
        }
        if th.total_variation.is_some_and(|v| !(v > 0.0)) {
            return Err(invalid("thresholds.total_variation: must be > 0"));
        }
        if th.n_max == 0 {
            return Err(invalid("thresholds.n_max: must be >= 1"));
        }
        self.hamiltonian_segments()?;
        Ok(())
    }

    /// Canonical JSON used for the manifest hash and the scenario export.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}
