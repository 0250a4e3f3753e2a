//! Scenario configuration.
//!
//! Scenarios are TOML files with `[system]`, `[cost]`, `[constraints]`,
//! `[empc]`, `[certification]`, and `[output]` blocks. Keys carry units in
//! their names where a unit exists (`period_hours`, `tank_areas_m2`); one
//! dynamics phase always spans one hour. Matrices are inline arrays of rows
//! or `*_file` references to headerless CSV files resolved relative to the
//! config file. The `[system]` block either describes a linear periodic
//! system directly or names `preset = "richmond"` with optional overrides
//! in `[system.richmond]`.
//!
//! Parsing and materialization are separate: [`ScenarioConfig`] is the
//! literal file content, [`Scenario`] is the compiled bundle (lifted
//! system, cost, bounds, plant, resolved initial state) that commands
//! execute. Unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::dynamics::{augment, AugmentedSystem, DynamicsError, LiftedSystem, LinearPeriodicSystem};
use crate::empc::{CostVariant, WarmStart};
use crate::model::{BoxConstraints, ModelError, StageCostSpec};
use crate::steady_state::{choose_epsilon, EpsilonChoice, SteadyStateError};
use crate::wdn::{build_richmond, WdnConfig, WdnError, WdnInstance};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("matrix file {path}, row {row}: {problem}")]
    BadMatrixFile {
        path: PathBuf,
        row: usize,
        problem: String,
    },
    #[error(transparent)]
    Wdn(#[from] WdnError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SteadyState(#[from] SteadyStateError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Literal content of a scenario file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemBlock,
    #[serde(default)]
    pub cost: CostBlock,
    pub constraints: Option<ConstraintsBlock>,
    pub empc: EmpcBlock,
    #[serde(default)]
    pub certification: CertificationBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    /// Named built-in scenario; currently only "richmond".
    pub preset: Option<String>,
    /// Overrides for the richmond preset.
    pub richmond: Option<RichmondOverrides>,
    pub period_hours: Option<usize>,
    pub a: Option<Vec<Vec<f64>>>,
    pub a_file: Option<PathBuf>,
    pub b_u: Option<Vec<Vec<f64>>>,
    pub b_u_file: Option<PathBuf>,
    pub b_d: Option<Vec<Vec<f64>>>,
    pub b_d_file: Option<PathBuf>,
    /// Disturbance sequence, one row per phase.
    pub d: Option<Vec<Vec<f64>>>,
    pub d_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RichmondOverrides {
    pub tank_areas_m2: Option<Vec<f64>>,
    pub demand_base_m3_per_h: Option<Vec<f64>>,
    pub demand_amplitude: Option<f64>,
    pub demand_jitter: Option<f64>,
    pub profile_seed: Option<u64>,
    pub tariff_off_peak: Option<f64>,
    pub tariff_peak: Option<f64>,
    pub pump_capacity_m3_per_h: Option<f64>,
    pub move_weight: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    /// Price vector per phase.
    pub alpha: Option<Vec<Vec<f64>>>,
    pub alpha_file: Option<PathBuf>,
    pub q_u: Option<Vec<Vec<f64>>>,
    pub q_u_file: Option<PathBuf>,
    pub w_move: Option<Vec<Vec<f64>>>,
    pub w_move_file: Option<PathBuf>,
    /// State regularization weight, set directly.
    pub epsilon: Option<f64>,
    /// Steady-cost budget; converted to epsilon via the box-maximum rule.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsBlock {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpcBlock {
    pub horizon_periods: usize,
    #[serde(default)]
    pub terminal_mode: TerminalModeCfg,
    /// Target state for `fixed_point`; defaults to the solved optimal
    /// steady state.
    pub terminal_target: Option<Vec<f64>>,
    #[serde(default)]
    pub cost_variant: CostVariantCfg,
    pub n_steps: usize,
    /// Initial physical state: a vector or "min" / "max" / "zero".
    pub x0: X0Spec,
    /// Initial previous-input block for move-penalized systems; defaults
    /// to zero (pumps off before the run starts).
    pub v0: Option<Vec<f64>>,
    #[serde(default)]
    pub allow_single_period: bool,
    #[serde(default)]
    pub cold_start: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalModeCfg {
    #[default]
    SteadyStateSet,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariantCfg {
    #[default]
    Economic,
    Rotated,
    Modified,
}

impl From<CostVariantCfg> for CostVariant {
    fn from(v: CostVariantCfg) -> CostVariant {
        match v {
            CostVariantCfg::Economic => CostVariant::Economic,
            CostVariantCfg::Rotated => CostVariant::Rotated,
            CostVariantCfg::Modified => CostVariant::Modified,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum X0Spec {
    Keyword(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationBlock {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_samples() -> usize {
    10_000
}

impl Default for CertificationBlock {
    fn default() -> Self {
        CertificationBlock {
            n_samples: default_n_samples(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out_dir")]
    pub directory: PathBuf,
    #[serde(default)]
    pub emit_gnuplot: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: default_out_dir(),
            emit_gnuplot: false,
        }
    }
}

/// How the regularization weight was determined.
#[derive(Debug, Clone, Copy)]
pub enum EpsilonResolution {
    None,
    Fixed(f64),
    FromGamma { gamma: f64, choice: EpsilonChoice },
}

impl EpsilonResolution {
    pub fn value(&self) -> f64 {
        match self {
            EpsilonResolution::None => 0.0,
            EpsilonResolution::Fixed(e) => *e,
            EpsilonResolution::FromGamma { choice, .. } => choice.epsilon,
        }
    }
}

/// Controller-run settings with the initial state fully resolved.
#[derive(Debug, Clone)]
pub struct EmpcRun {
    pub horizon_periods: usize,
    pub terminal_mode: TerminalModeCfg,
    pub terminal_target: Option<DVector<f64>>,
    pub variant: CostVariant,
    pub n_steps: usize,
    /// Full model state (lifted, plus previous-input block when
    /// augmented).
    pub x0: DVector<f64>,
    pub allow_single_period: bool,
    pub warm_start: WarmStart,
}

/// A compiled scenario, ready for the command layer.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub lifted: LiftedSystem,
    pub aug: Option<AugmentedSystem>,
    pub cost: StageCostSpec,
    pub bounds: BoxConstraints,
    pub plant: LinearPeriodicSystem,
    pub wdn: Option<WdnInstance>,
    pub epsilon: EpsilonResolution,
    pub empc: EmpcRun,
    pub certification: CertificationBlock,
    pub output: OutputBlock,
}

impl ScenarioConfig {
    /// Parses a scenario file without materializing it.
    pub fn parse(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })
    }

    /// Parses and materializes a scenario; `*_file` references resolve
    /// relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let cfg = Self::parse(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.materialize(base)
    }

    pub fn materialize(&self, base: &Path) -> Result<Scenario, ConfigError> {
        let is_preset = self.system.preset.is_some();
        if is_preset {
            self.check_preset_exclusions()?;
        }

        // First pass with epsilon 0 to learn bounds and period, which the
        // gamma rule needs; the cost is rebuilt once epsilon is known.
        let built = self.build_system(base, 0.0)?;
        let epsilon = self.resolve_epsilon(&built.bounds, built.lifted.period)?;
        let built = if epsilon.value() != 0.0 {
            self.build_system(base, epsilon.value())?
        } else {
            built
        };

        self.check_variant_epsilon(epsilon.value())?;
        let empc = self.resolve_empc(&built)?;

        Ok(Scenario {
            lifted: built.lifted,
            aug: built.aug,
            cost: built.cost,
            bounds: built.bounds,
            plant: built.plant,
            wdn: built.wdn,
            epsilon,
            empc,
            certification: self.certification.clone(),
            output: self.output.clone(),
        })
    }

    fn check_preset_exclusions(&self) -> Result<(), ConfigError> {
        let s = &self.system;
        if s.period_hours.is_some()
            || s.a.is_some()
            || s.a_file.is_some()
            || s.b_u.is_some()
            || s.b_u_file.is_some()
            || s.b_d.is_some()
            || s.b_d_file.is_some()
            || s.d.is_some()
            || s.d_file.is_some()
        {
            return Err(invalid(
                "system.preset excludes inline system matrices; use [system.richmond] overrides",
            ));
        }
        let c = &self.cost;
        if c.alpha.is_some()
            || c.alpha_file.is_some()
            || c.q_u.is_some()
            || c.q_u_file.is_some()
            || c.w_move.is_some()
            || c.w_move_file.is_some()
        {
            return Err(invalid(
                "system.preset provides the cost; only cost.epsilon or cost.gamma may be set",
            ));
        }
        if self.constraints.is_some() {
            return Err(invalid("system.preset provides the constraint boxes"));
        }
        Ok(())
    }

    fn resolve_epsilon(
        &self,
        bounds: &BoxConstraints,
        period: usize,
    ) -> Result<EpsilonResolution, ConfigError> {
        match (self.cost.epsilon, self.cost.gamma) {
            (Some(_), Some(_)) => Err(invalid(
                "cost.epsilon and cost.gamma are mutually exclusive",
            )),
            (Some(e), None) => {
                if !(e >= 0.0) || !e.is_finite() {
                    return Err(invalid(format!("cost.epsilon must be >= 0, got {e}")));
                }
                if e == 0.0 {
                    Ok(EpsilonResolution::None)
                } else {
                    Ok(EpsilonResolution::Fixed(e))
                }
            }
            (None, Some(g)) => {
                let choice = choose_epsilon(g, bounds, period)?;
                Ok(EpsilonResolution::FromGamma { gamma: g, choice })
            }
            (None, None) => Ok(EpsilonResolution::None),
        }
    }

    fn check_variant_epsilon(&self, epsilon: f64) -> Result<(), ConfigError> {
        let modified = self.empc.cost_variant == CostVariantCfg::Modified;
        if modified && epsilon == 0.0 {
            return Err(invalid(
                "cost_variant = \"modified\" needs exactly one of cost.epsilon or cost.gamma",
            ));
        }
        if !modified && epsilon != 0.0 {
            return Err(invalid(
                "a nonzero regularization weight requires cost_variant = \"modified\"",
            ));
        }
        Ok(())
    }

    fn build_system(&self, base: &Path, epsilon: f64) -> Result<BuiltSystem, ConfigError> {
        if let Some(preset) = &self.system.preset {
            if preset != "richmond" {
                return Err(invalid(format!(
                    "unknown system.preset \"{preset}\"; available: \"richmond\""
                )));
            }
            let mut wdn_cfg = WdnConfig::default();
            wdn_cfg.epsilon = epsilon;
            if let Some(o) = &self.system.richmond {
                apply_overrides(&mut wdn_cfg, o);
            }
            let (inst, lifted, aug, cost, bounds) = build_richmond(&wdn_cfg)?;
            let plant = crate::wdn::plant(&inst)?;
            return Ok(BuiltSystem {
                lifted,
                aug: Some(aug),
                cost,
                bounds,
                plant,
                wdn: Some(inst),
            });
        }
        self.build_inline_system(base, epsilon)
    }

    fn build_inline_system(&self, base: &Path, epsilon: f64) -> Result<BuiltSystem, ConfigError> {
        let s = &self.system;
        let period = s
            .period_hours
            .ok_or_else(|| invalid("system.period_hours is required"))?;
        if period == 0 {
            return Err(invalid("system.period_hours must be positive"));
        }
        let a = matrix(base, "system.a", &s.a, &s.a_file)?
            .ok_or_else(|| invalid("system.a (or a_file) is required"))?;
        let b_u = matrix(base, "system.b_u", &s.b_u, &s.b_u_file)?
            .ok_or_else(|| invalid("system.b_u (or b_u_file) is required"))?;
        let n = a.nrows();

        let d_rows = matrix(base, "system.d", &s.d, &s.d_file)?;
        let (b_d, d_seq) = match (matrix(base, "system.b_d", &s.b_d, &s.b_d_file)?, d_rows) {
            (Some(b_d), Some(d)) => {
                if d.nrows() != period {
                    return Err(invalid(format!(
                        "system.d needs one row per phase: expected {period}, got {}",
                        d.nrows()
                    )));
                }
                let seq = (0..period).map(|t| d.row(t).transpose()).collect();
                (b_d, seq)
            }
            (None, None) => (
                DMatrix::zeros(n, 1),
                vec![DVector::zeros(1); period],
            ),
            _ => {
                return Err(invalid(
                    "system.b_d and system.d must be supplied together",
                ))
            }
        };

        let system = LinearPeriodicSystem::new(a, b_u, b_d, period, d_seq)?;
        let lifted = system.lift();

        let c = &self.cost;
        let m = system.b_u.ncols();
        let alpha_rows = matrix(base, "cost.alpha", &c.alpha, &c.alpha_file)?;
        let alpha_seq: Vec<DVector<f64>> = match alpha_rows {
            Some(rows) => {
                if rows.nrows() != period {
                    return Err(invalid(format!(
                        "cost.alpha needs one row per phase: expected {period}, got {}",
                        rows.nrows()
                    )));
                }
                (0..period).map(|t| rows.row(t).transpose()).collect()
            }
            None => vec![DVector::zeros(m); period],
        };
        let q_u = matrix(base, "cost.q_u", &c.q_u, &c.q_u_file)?
            .unwrap_or_else(|| DMatrix::zeros(m, m));
        let w = matrix(base, "cost.w_move", &c.w_move, &c.w_move_file)?
            .unwrap_or_else(|| DMatrix::zeros(m, m));
        let cost = StageCostSpec::new(alpha_seq, q_u, w, epsilon, 0.0)?;

        let aug = cost.has_move_penalty().then(|| augment(&lifted));

        let cb = self
            .constraints
            .as_ref()
            .ok_or_else(|| invalid("[constraints] is required for inline systems"))?;
        let bounds = BoxConstraints::new(
            DVector::from_vec(cb.x_min.clone()),
            DVector::from_vec(cb.x_max.clone()),
            DVector::from_vec(cb.u_min.clone()),
            DVector::from_vec(cb.u_max.clone()),
        )?;

        Ok(BuiltSystem {
            lifted,
            aug,
            cost,
            bounds,
            plant: system,
            wdn: None,
        })
    }

    fn resolve_empc(&self, built: &BuiltSystem) -> Result<EmpcRun, ConfigError> {
        let e = &self.empc;
        let n = built.lifted.n;
        let m = built.lifted.m;
        let augmented = built.aug.is_some();
        let full_dim = built.lifted.state_dim() + if augmented { m } else { 0 };

        let x_phys = match &e.x0 {
            X0Spec::Keyword(k) => match k.as_str() {
                "min" => built.bounds.x_lb.clone(),
                "max" => built.bounds.x_ub.clone(),
                "zero" => DVector::zeros(n),
                other => {
                    return Err(invalid(format!(
                        "empc.x0 keyword \"{other}\" is not one of min, max, zero"
                    )))
                }
            },
            X0Spec::Vector(v) if v.len() == n => DVector::from_vec(v.clone()),
            X0Spec::Vector(v) if v.len() == full_dim => {
                let x0 = DVector::from_vec(v.clone());
                if e.v0.is_some() {
                    return Err(invalid(
                        "empc.v0 conflicts with a full-dimension empc.x0",
                    ));
                }
                return Ok(self.empc_run(x0, built)?);
            }
            X0Spec::Vector(v) => {
                return Err(invalid(format!(
                    "empc.x0 must have {n} (physical) or {full_dim} (full) entries, got {}",
                    v.len()
                )))
            }
        };

        let lifted_x0 = built.lifted.lifted_from_physical(&x_phys)?;
        let x0 = if augmented {
            let v0 = match &e.v0 {
                Some(v) if v.len() == m => DVector::from_vec(v.clone()),
                Some(v) => {
                    return Err(invalid(format!(
                        "empc.v0 must have {m} entries, got {}",
                        v.len()
                    )))
                }
                None => DVector::zeros(m),
            };
            let mut full = DVector::zeros(full_dim);
            full.rows_mut(0, lifted_x0.len()).copy_from(&lifted_x0);
            full.rows_mut(lifted_x0.len(), m).copy_from(&v0);
            full
        } else {
            if e.v0.is_some() {
                return Err(invalid("empc.v0 only applies to move-penalized costs"));
            }
            lifted_x0
        };
        self.empc_run(x0, built)
    }

    fn empc_run(&self, x0: DVector<f64>, built: &BuiltSystem) -> Result<EmpcRun, ConfigError> {
        let e = &self.empc;
        let terminal_target = match (&e.terminal_target, e.terminal_mode) {
            (Some(_), TerminalModeCfg::SteadyStateSet) => {
                return Err(invalid(
                    "empc.terminal_target only applies to terminal_mode = \"fixed_point\"",
                ))
            }
            (Some(v), TerminalModeCfg::FixedPoint) => {
                let full_dim =
                    built.lifted.state_dim() + if built.aug.is_some() { built.lifted.m } else { 0 };
                if v.len() != full_dim {
                    return Err(invalid(format!(
                        "empc.terminal_target must have {full_dim} entries, got {}",
                        v.len()
                    )));
                }
                Some(DVector::from_vec(v.clone()))
            }
            (None, _) => None,
        };
        Ok(EmpcRun {
            horizon_periods: e.horizon_periods,
            terminal_mode: e.terminal_mode,
            terminal_target,
            variant: e.cost_variant.into(),
            n_steps: e.n_steps,
            x0,
            allow_single_period: e.allow_single_period,
            warm_start: if e.cold_start {
                WarmStart::Cold
            } else {
                WarmStart::Shifted
            },
        })
    }
}

struct BuiltSystem {
    lifted: LiftedSystem,
    aug: Option<AugmentedSystem>,
    cost: StageCostSpec,
    bounds: BoxConstraints,
    plant: LinearPeriodicSystem,
    wdn: Option<WdnInstance>,
}

fn apply_overrides(cfg: &mut WdnConfig, o: &RichmondOverrides) {
    if let Some(v) = &o.tank_areas_m2 {
        cfg.tank_areas = v.clone();
    }
    if let Some(v) = &o.demand_base_m3_per_h {
        cfg.demand_base = v.clone();
    }
    if let Some(v) = o.demand_amplitude {
        cfg.demand_amplitude = v;
    }
    if let Some(v) = o.demand_jitter {
        cfg.demand_jitter = v;
    }
    if let Some(v) = o.profile_seed {
        cfg.profile_seed = v;
    }
    if let Some(v) = o.tariff_off_peak {
        cfg.tariff_off_peak = v;
    }
    if let Some(v) = o.tariff_peak {
        cfg.tariff_peak = v;
    }
    if let Some(v) = o.pump_capacity_m3_per_h {
        cfg.pump_capacity = v;
    }
    if let Some(v) = o.move_weight {
        cfg.move_weight = v;
    }
}

/// Resolves an inline-or-file matrix option pair.
fn matrix(
    base: &Path,
    key: &str,
    inline: &Option<Vec<Vec<f64>>>,
    file: &Option<PathBuf>,
) -> Result<Option<DMatrix<f64>>, ConfigError> {
    match (inline, file) {
        (Some(_), Some(_)) => Err(invalid(format!(
            "{key} and {key}_file are mutually exclusive"
        ))),
        (Some(rows), None) => Ok(Some(rows_to_matrix(key, rows)?)),
        (None, Some(rel)) => {
            let path = if rel.is_absolute() {
                rel.clone()
            } else {
                base.join(rel)
            };
            Ok(Some(read_matrix_csv(&path)?))
        }
        (None, None) => Ok(None),
    }
}

fn rows_to_matrix(key: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() {
        return Err(invalid(format!("{key} must have at least one row")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(invalid(format!("{key} rows must be nonempty")));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(invalid(format!(
                "{key} row {i} has {} entries, expected {ncols}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Headerless CSV matrix: one row per line, comma-separated numbers.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| ConfigError::BadMatrixFile {
            path: path.to_path_buf(),
            row: i + 1,
            problem: e.to_string(),
        })?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(ConfigError::BadMatrixFile {
                    path: path.to_path_buf(),
                    row: i + 1,
                    problem: format!("expected {} columns, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ConfigError::BadMatrixFile {
            path: path.to_path_buf(),
            row: 0,
            problem: "file holds no rows".into(),
        });
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
