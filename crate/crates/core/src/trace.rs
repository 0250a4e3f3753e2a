//! Trace and result serialization.
//!
//! Closed-loop traces go to CSV with one row per step: `step`, `sim_hour`,
//! the lifted state columns `x[0..nT)`, the lifted input columns
//! `u[0..mT)`, the per-step cost and certificate columns, solver status,
//! and solve time. For move-penalized systems only the level part of the
//! augmented state is written; the previous-input block of row t equals
//! the last input block of row t-1, so nothing is lost. Floats carry 12
//! significant digits, which bounds round-trip error at 1e-11 relative;
//! every field except `solve_ms` (wall-clock) is bit-identical across runs
//! of the same scenario and seed.
//!
//! Steady-state results and reports go to TOML with full-precision floats
//! and re-ingest exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{DissipativityReport, LyapunovAudit, Verdict};
use crate::empc::ClosedLoopTrace;
use crate::steady_state::SteadyStateResult;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {problem}")]
    BadCsv {
        path: PathBuf,
        line: usize,
        problem: String,
    },
    #[error("cannot parse {path}: {source}")]
    BadToml {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] toml::ser::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 12 significant digits; enough that re-parsing stays within 1e-11
/// relative of the original.
pub fn format_float(v: f64) -> String {
    format!("{v:.11e}")
}

/// Writes a closed-loop trace as CSV. A zero-step trace writes the header
/// only; column counts come from the trace's own dimensions.
pub fn write_trace_csv(path: &Path, trace: &ClosedLoopTrace) -> Result<(), TraceError> {
    let n_x = x_width(trace);
    let n_u = trace.input_dim;
    let mut out = String::new();
    out.push_str("step,sim_hour");
    for i in 0..n_x {
        out.push_str(&format!(",x[{i}]"));
    }
    for j in 0..n_u {
        out.push_str(&format!(",u[{j}]"));
    }
    out.push_str(
        ",stage_cost_economic,stage_cost_modified,rotated_cost,lyapunov_V0,dist_to_Xs,solver_status,solve_ms\n",
    );
    for rec in &trace.steps {
        out.push_str(&format!("{},{}", rec.step, rec.sim_hour));
        for i in 0..n_x {
            out.push(',');
            out.push_str(&format_float(rec.state[i]));
        }
        for j in 0..n_u {
            out.push(',');
            out.push_str(&format_float(rec.applied_input[j]));
        }
        out.push_str(&format!(
            ",{},{},{},{},{},{},{:.3}\n",
            format_float(rec.stage_cost_economic),
            format_float(rec.stage_cost_full),
            format_float(rec.rotated_cost),
            format_float(rec.lyapunov),
            format_float(rec.dist_to_set),
            rec.solver_status,
            rec.solve_ms,
        ));
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

/// Width of the level part of the state: the full state when not
/// augmented, everything before the previous-input block when augmented.
fn x_width(trace: &ClosedLoopTrace) -> usize {
    let n = trace.final_state.len();
    if trace.augmented {
        n - trace.input_dim / trace.period.max(1)
    } else {
        n
    }
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub sim_hour: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub stage_cost_economic: f64,
    pub stage_cost_modified: f64,
    pub rotated_cost: f64,
    pub lyapunov_v0: f64,
    pub dist_to_xs: f64,
    pub solver_status: String,
    pub solve_ms: f64,
}

/// A parsed trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub n_x: usize,
    pub n_u: usize,
    pub rows: Vec<TraceRow>,
}

pub fn read_trace_csv(path: &Path) -> Result<TraceTable, TraceError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, problem: String| TraceError::BadCsv {
        path: path.to_path_buf(),
        line,
        problem,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(0, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_x = cols.iter().filter(|c| c.starts_with("x[")).count();
    let n_u = cols.iter().filter(|c| c.starts_with("u[")).count();
    let expect = 2 + n_x + n_u + 7;
    if cols.len() != expect {
        return Err(bad(1, format!("{} header columns, expected {expect}", cols.len())));
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expect {
            return Err(bad(idx + 1, format!("{} fields, expected {expect}", fields.len())));
        }
        let num = |k: usize| -> Result<f64, TraceError> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| bad(idx + 1, format!("column {k}: {e}")))
        };
        let int = |k: usize| -> Result<usize, TraceError> {
            fields[k]
                .parse::<usize>()
                .map_err(|e| bad(idx + 1, format!("column {k}: {e}")))
        };
        let mut x = DVector::zeros(n_x);
        for i in 0..n_x {
            x[i] = num(2 + i)?;
        }
        let mut u = DVector::zeros(n_u);
        for j in 0..n_u {
            u[j] = num(2 + n_x + j)?;
        }
        let base = 2 + n_x + n_u;
        rows.push(TraceRow {
            step: int(0)?,
            sim_hour: int(1)?,
            x,
            u,
            stage_cost_economic: num(base)?,
            stage_cost_modified: num(base + 1)?,
            rotated_cost: num(base + 2)?,
            lyapunov_v0: num(base + 3)?,
            dist_to_xs: num(base + 4)?,
            solver_status: fields[base + 5].to_string(),
            solve_ms: num(base + 6)?,
        });
    }
    Ok(TraceTable { n_x, n_u, rows })
}

/// Steady-state result in file form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsResultFile {
    pub ell_s_economic: f64,
    pub ell_s_full: f64,
    pub epsilon: f64,
    pub augmented: bool,
    pub nullspace_dim: usize,
    pub u_s: Vec<f64>,
    pub mu: Vec<f64>,
    pub x_s_particular: Vec<f64>,
    /// Orthonormal steady-direction basis, one inner vector per column.
    pub nullspace_basis: Vec<Vec<f64>>,
}

impl SsResultFile {
    pub fn from_result(ss: &SteadyStateResult) -> SsResultFile {
        SsResultFile {
            ell_s_economic: ss.ell_s_economic,
            ell_s_full: ss.ell_s_full,
            epsilon: ss.epsilon,
            augmented: ss.augmented,
            nullspace_dim: ss.x_s_nullspace.ncols(),
            u_s: ss.u_s.iter().copied().collect(),
            mu: ss.mu.iter().copied().collect(),
            x_s_particular: ss.x_s_particular.iter().copied().collect(),
            nullspace_basis: (0..ss.x_s_nullspace.ncols())
                .map(|j| ss.x_s_nullspace.column(j).iter().copied().collect())
                .collect(),
        }
    }

    /// Rebuilds the in-memory result.
    pub fn to_result(&self) -> SteadyStateResult {
        let nrows = self.x_s_particular.len();
        let basis = DMatrix::from_fn(nrows, self.nullspace_basis.len(), |i, j| {
            self.nullspace_basis[j][i]
        });
        SteadyStateResult {
            u_s: DVector::from_vec(self.u_s.clone()),
            ell_s_economic: self.ell_s_economic,
            ell_s_full: self.ell_s_full,
            mu: DVector::from_vec(self.mu.clone()),
            x_s_particular: DVector::from_vec(self.x_s_particular.clone()),
            x_s_nullspace: basis,
            epsilon: self.epsilon,
            augmented: self.augmented,
        }
    }
}

/// Closed-loop summary in file form: the per-period economic cost table
/// and where the run ended relative to the steady-state set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryFile {
    pub n_steps: usize,
    pub period_hours: usize,
    pub steady_cost_economic: f64,
    pub steady_cost_full: f64,
    pub per_period_economic_cost: Vec<f64>,
    pub total_economic_cost: f64,
    pub final_period_economic_cost: f64,
    pub final_distance_to_steady_set: f64,
    pub all_solves_optimal: bool,
    pub final_state: Vec<f64>,
}

/// Dissipativity report in file form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DissipativityFile {
    pub verdict: String,
    pub n_samples: usize,
    pub min_rotated_cost: f64,
    pub min_index: usize,
    pub far_threshold: f64,
    pub min_far: Option<f64>,
    pub far_count: usize,
    pub max_abs_on_set: f64,
    pub global_min: f64,
    pub witness_x: Vec<f64>,
    pub witness_u: Vec<f64>,
}

impl DissipativityFile {
    pub fn from_report(r: &DissipativityReport) -> DissipativityFile {
        DissipativityFile {
            verdict: match r.verdict {
                Verdict::Certified => "certified_at_samples".into(),
                Verdict::Violated => "violated".into(),
            },
            n_samples: r.n_samples,
            min_rotated_cost: r.min_rotated_cost,
            min_index: r.min_index,
            far_threshold: r.far_threshold,
            min_far: r.min_far,
            far_count: r.far_count,
            max_abs_on_set: r.max_abs_on_set,
            global_min: r.global_min,
            witness_x: r.witness_x.iter().copied().collect(),
            witness_u: r.witness_u.iter().copied().collect(),
        }
    }
}

/// Lyapunov audit in file form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovFile {
    pub worst_descent_gap: f64,
    pub worst_descent_step: usize,
    pub min_value_minus_stage: f64,
    pub min_value: f64,
    pub recomputation_error: f64,
    pub values: Vec<f64>,
}

impl LyapunovFile {
    pub fn from_audit(a: &LyapunovAudit) -> LyapunovFile {
        LyapunovFile {
            worst_descent_gap: a.worst_descent_gap,
            worst_descent_step: a.worst_descent_step,
            min_value_minus_stage: a.min_value_minus_stage,
            min_value: a.min_value,
            recomputation_error: a.recomputation_error,
            values: a.values.clone(),
        }
    }
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), TraceError> {
    let text = toml::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TraceError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|source| TraceError::BadToml {
        path: path.to_path_buf(),
        source: Box::new(source),
    })
}

/// Emits a small gnuplot script that plots levels, inputs, and the
/// certificate columns from a trace CSV sitting next to it.
pub fn write_gnuplot_script(path: &Path, csv_name: &str, n_x: usize, n_u: usize) -> Result<(), TraceError> {
    let mut s = String::new();
    s.push_str("set datafile separator \",\"\nset key outside\nset xlabel \"step\"\n");
    s.push_str("set terminal pngcairo size 1200,400\n\n");
    let shown_x = n_x.min(8);
    s.push_str("set output \"states.png\"\nset ylabel \"x\"\nplot ");
    for i in 0..shown_x {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&format!(
            "\"{csv_name}\" using 1:{} with lines title \"x[{i}]\"",
            3 + i
        ));
    }
    s.push('\n');
    let shown_u = n_u.min(8);
    s.push_str("\nset output \"inputs.png\"\nset ylabel \"u\"\nplot ");
    for j in 0..shown_u {
        if j > 0 {
            s.push_str(", ");
        }
        s.push_str(&format!(
            "\"{csv_name}\" using 1:{} with lines title \"u[{j}]\"",
            3 + n_x + j
        ));
    }
    s.push('\n');
    let base = 3 + n_x + n_u;
    s.push_str(&format!(
        "\nset output \"certificates.png\"\nset ylabel \"value\"\nplot \
         \"{csv_name}\" using 1:{} with lines title \"rotated cost\", \
         \"{csv_name}\" using 1:{} with lines title \"lyapunov\"\n",
        base + 2,
        base + 3,
    ));
    std::fs::write(path, s).map_err(io_err(path))
}
