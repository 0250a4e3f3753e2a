//! Command layer behind the `empc` binary.
//!
//! Each command loads a scenario, runs one pipeline stage, writes its
//! outputs under the scenario's output directory, and reports through a
//! typed error whose exit code follows a fixed contract: 0 success, 1
//! configuration or I/O error, 2 steady-state solve failure, 3 closed-loop
//! infeasibility (partial trace preserved), 4 certification failure.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use thiserror::Error;

use crate::certify::{
    check_dissipativity, lyapunov_audit, CertifyError, StorageFunction, Verdict,
};
use crate::config::{ConfigError, CostVariantCfg, Scenario, ScenarioConfig, TerminalModeCfg};
use crate::empc::{
    ClosedLoopTrace, EmpcConfig, EmpcController, EmpcError, TerminalMode,
};
use crate::model::{compile, ModelError};
use crate::steady_state::{
    periodic_shift_check, solve_steady_state_model, ShiftCheckReport, SteadyStateError,
    SteadyStateResult,
};
use crate::trace::{
    write_gnuplot_script, write_toml, write_trace_csv, DissipativityFile, LyapunovFile,
    SsResultFile, SummaryFile, TraceError,
};

/// Descent violations beyond this tolerance fail certification.
pub const DESCENT_TOL: f64 = 1e-5;

/// The default benchmark scenario, compiled into the binary.
pub const RICHMOND_SCENARIO: &str = include_str!("../../../configs/richmond.toml");

/// Steady-cost budget for the regularized arm of the benchmark when the
/// scenario does not set one.
pub const BENCH_DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Output(#[from] TraceError),
    #[error("steady-state problem failed: {0}")]
    SteadyState(#[source] SteadyStateError),
    #[error("controller setup failed: {0}")]
    Controller(#[source] EmpcError),
    #[error("closed loop aborted: {0}")]
    ClosedLoop(#[source] EmpcError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error("certification failed: {0}")]
    CertificationFailed(String),
    #[error("{0}")]
    Invalid(String),
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CommandError::SteadyState(_) => 2,
            CommandError::ClosedLoop(_) => 3,
            CommandError::CertificationFailed(_) => 4,
            _ => 1,
        }
    }
}

/// Command-line overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub corrupt_mu: bool,
}

impl Flags {
    fn apply(&self, sc: &mut Scenario) {
        if let Some(out) = &self.out {
            sc.output.directory = out.clone();
        }
        if let Some(seed) = self.seed {
            sc.certification.seed = seed;
        }
    }
}

fn load(config: &Path, flags: &Flags) -> Result<Scenario, CommandError> {
    let mut sc = ScenarioConfig::load(config)?;
    flags.apply(&mut sc);
    Ok(sc)
}

fn ensure_dir(dir: &Path) -> Result<(), CommandError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CommandError::Output(TraceError::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn solve_ss(sc: &Scenario) -> Result<SteadyStateResult, CommandError> {
    let model = compile(&sc.lifted, sc.aug.as_ref(), &sc.cost, &sc.bounds)?;
    solve_steady_state_model(&model).map_err(CommandError::SteadyState)
}

fn build_controller(
    sc: &Scenario,
    ss: SteadyStateResult,
) -> Result<EmpcController, CommandError> {
    let model = compile(&sc.lifted, sc.aug.as_ref(), &sc.cost, &sc.bounds)?;
    let terminal = match sc.empc.terminal_mode {
        TerminalModeCfg::SteadyStateSet => TerminalMode::SteadyStateSet,
        TerminalModeCfg::FixedPoint => {
            let target = sc
                .empc
                .terminal_target
                .clone()
                .unwrap_or_else(|| ss.x_s_particular.clone());
            TerminalMode::FixedPoint(target)
        }
    };
    let mut cfg = EmpcConfig::new(sc.empc.horizon_periods, terminal, sc.empc.variant);
    cfg.warm_start = sc.empc.warm_start;
    cfg.allow_single_period = sc.empc.allow_single_period;
    EmpcController::new(model, ss, cfg).map_err(CommandError::Controller)
}

/// Runs the scenario's closed loop. On mid-run infeasibility the partial
/// trace is written to `trace_path` before the error propagates.
fn run_closed_loop(
    sc: &Scenario,
    ctrl: &mut EmpcController,
    trace_path: &Path,
) -> Result<ClosedLoopTrace, CommandError> {
    match ctrl.run_closed_loop(&sc.plant, &sc.empc.x0, sc.empc.n_steps) {
        Ok(trace) => Ok(trace),
        Err(EmpcError::ClosedLoop {
            step,
            partial,
            source,
        }) => {
            write_trace_csv(trace_path, &partial)?;
            Err(CommandError::ClosedLoop(EmpcError::ClosedLoop {
                step,
                partial,
                source,
            }))
        }
        Err(other) => Err(CommandError::Controller(other)),
    }
}

fn ss_report_text(ss: &SteadyStateResult, shift: &ShiftCheckReport) -> String {
    let mut s = String::new();
    s.push_str("optimal periodic steady state\n");
    s.push_str(&format!("  economic cost per period: {:.9}\n", ss.ell_s_economic));
    s.push_str(&format!("  full cost per period:     {:.9}\n", ss.ell_s_full));
    s.push_str(&format!("  regularization weight:    {:.3e}\n", ss.epsilon));
    s.push_str(&format!("  augmented (move penalty): {}\n", ss.augmented));
    s.push_str(&format!(
        "  steady-direction dimension: {}\n",
        ss.x_s_nullspace.ncols()
    ));
    s.push_str(&format!("  |mu|_inf: {:.6e}\n", ss.mu.amax()));
    s.push_str(&format!(
        "  input range: [{:.6}, {:.6}]\n\n",
        ss.u_s.min(),
        ss.u_s.max()
    ));
    s.push_str("start-phase rotation check\n");
    s.push_str("  phase  optimal cost\n");
    for (phase, cost) in shift.costs.iter().enumerate() {
        s.push_str(&format!("  {phase:>5}  {cost:.9}\n"));
    }
    s.push_str(&format!(
        "  max cost deviation:    {:.3e}\n  max input shift error: {:.3e}\n",
        shift.max_cost_deviation, shift.max_input_shift_error
    ));
    s
}

/// Solves the steady-state problem, including the start-phase rotation
/// check, and writes `ss_result.toml` and `ss_report.txt`.
pub fn cmd_solve_ss(config: &Path, flags: &Flags) -> Result<(), CommandError> {
    let sc = load(config, flags)?;
    let dir = sc.output.directory.clone();
    ensure_dir(&dir)?;

    let ss = solve_ss(&sc)?;
    let shift = periodic_shift_check(&sc.lifted, sc.aug.as_ref(), &sc.cost, &sc.bounds)
        .map_err(CommandError::SteadyState)?;

    write_toml(&dir.join("ss_result.toml"), &SsResultFile::from_result(&ss))?;
    let report = ss_report_text(&ss, &shift);
    std::fs::write(dir.join("ss_report.txt"), &report).map_err(|source| {
        CommandError::Output(TraceError::Io {
            path: dir.join("ss_report.txt"),
            source,
        })
    })?;

    println!(
        "steady state: economic cost {:.9}, steady-direction dimension {}",
        ss.ell_s_economic,
        ss.x_s_nullspace.ncols()
    );
    println!(
        "rotation check: max cost deviation {:.3e}",
        shift.max_cost_deviation
    );
    println!("wrote {}", dir.join("ss_result.toml").display());
    Ok(())
}

fn summarize(
    sc: &Scenario,
    ctrl: &EmpcController,
    trace: &ClosedLoopTrace,
) -> Result<SummaryFile, CommandError> {
    let ss = ctrl.steady_state();
    let per_period: Vec<f64> = trace.steps.iter().map(|r| r.stage_cost_economic).collect();
    let final_dist = ctrl
        .distance_to_target(&trace.final_state)
        .map_err(CommandError::Controller)?;
    Ok(SummaryFile {
        n_steps: trace.steps.len(),
        period_hours: sc.lifted.period,
        steady_cost_economic: ss.ell_s_economic,
        steady_cost_full: ss.ell_s_full,
        total_economic_cost: per_period.iter().sum(),
        final_period_economic_cost: per_period.last().copied().unwrap_or(0.0),
        per_period_economic_cost: per_period,
        final_distance_to_steady_set: final_dist,
        all_solves_optimal: trace
            .steps
            .iter()
            .all(|r| r.solver_status == crate::qp::SolverStatus::Optimal),
        final_state: trace.final_state.iter().copied().collect(),
    })
}

fn print_period_table(summary: &SummaryFile) {
    println!("period  economic cost");
    for (t, c) in summary.per_period_economic_cost.iter().enumerate() {
        println!("{t:>6}  {c:.9}");
    }
    println!("total economic cost: {:.9}", summary.total_economic_cost);
    println!(
        "steady cost {:.9}, final period within {:.3e} of it",
        summary.steady_cost_economic,
        (summary.final_period_economic_cost - summary.steady_cost_economic).abs()
    );
    println!(
        "final distance to steady-state target: {:.3e}",
        summary.final_distance_to_steady_set
    );
}

/// Runs the closed loop and writes `trace.csv` and `summary.toml`.
pub fn cmd_simulate(config: &Path, flags: &Flags) -> Result<(), CommandError> {
    let sc = load(config, flags)?;
    let dir = sc.output.directory.clone();
    ensure_dir(&dir)?;

    let ss = solve_ss(&sc)?;
    let mut ctrl = build_controller(&sc, ss)?;
    let trace_path = dir.join("trace.csv");
    let trace = run_closed_loop(&sc, &mut ctrl, &trace_path)?;

    write_trace_csv(&trace_path, &trace)?;
    let summary = summarize(&sc, &ctrl, &trace)?;
    write_toml(&dir.join("summary.toml"), &summary)?;
    if sc.output.emit_gnuplot {
        let n_x = if trace.augmented {
            trace.final_state.len() - sc.lifted.m
        } else {
            trace.final_state.len()
        };
        write_gnuplot_script(&dir.join("plots.gp"), "trace.csv", n_x, trace.input_dim)?;
    }

    print_period_table(&summary);
    println!("wrote {}", trace_path.display());
    Ok(())
}

/// Simulates, then audits dissipativity and Lyapunov descent. Exit 0 only
/// when sampling certifies the rotated cost and the trace descends.
pub fn cmd_certify(config: &Path, flags: &Flags) -> Result<(), CommandError> {
    let sc = load(config, flags)?;
    let dir = sc.output.directory.clone();
    ensure_dir(&dir)?;

    let ss = solve_ss(&sc)?;
    let mut ctrl = build_controller(&sc, ss)?;
    let trace_path = dir.join("trace.csv");
    let trace = run_closed_loop(&sc, &mut ctrl, &trace_path)?;
    write_trace_csv(&trace_path, &trace)?;

    let storage = {
        let base = StorageFunction::from_steady_state(ctrl.steady_state());
        if flags.corrupt_mu {
            base.corrupted(0, 0.5)
        } else {
            base
        }
    };
    let dissipativity = check_dissipativity(
        ctrl.model(),
        ctrl.steady_state(),
        &storage,
        sc.certification.n_samples,
        sc.certification.seed,
    )?;
    let audit = lyapunov_audit(&trace, ctrl.model(), ctrl.steady_state(), sc.empc.variant)?;

    write_toml(
        &dir.join("dissipativity.toml"),
        &DissipativityFile::from_report(&dissipativity),
    )?;
    write_toml(&dir.join("lyapunov.toml"), &LyapunovFile::from_audit(&audit))?;

    println!(
        "dissipativity: {:?} over {} samples (sampled min {:.3e}, exact box min {:.3e})",
        dissipativity.verdict,
        dissipativity.n_samples,
        dissipativity.min_rotated_cost,
        dissipativity.global_min
    );
    println!(
        "descent: worst gap {:.3e} at step {}",
        audit.worst_descent_gap, audit.worst_descent_step
    );

    if dissipativity.verdict == Verdict::Violated {
        return Err(CommandError::CertificationFailed(format!(
            "rotated cost dips to {:.6e}; witness written to dissipativity.toml",
            dissipativity.global_min.min(dissipativity.min_rotated_cost)
        )));
    }
    if audit.worst_descent_gap > DESCENT_TOL {
        return Err(CommandError::CertificationFailed(format!(
            "Lyapunov descent violated by {:.6e} at step {}",
            audit.worst_descent_gap, audit.worst_descent_step
        )));
    }
    println!("certified at samples; zero descent violations");
    Ok(())
}

/// One arm of the benchmark pipeline.
fn bench_arm(
    sc: &Scenario,
    dir: &Path,
) -> Result<(EmpcController, ClosedLoopTrace, SummaryFile), CommandError> {
    ensure_dir(dir)?;
    let ss = solve_ss(sc)?;
    write_toml(&dir.join("ss_result.toml"), &SsResultFile::from_result(&ss))?;
    let mut ctrl = build_controller(sc, ss)?;
    let trace_path = dir.join("trace.csv");
    let trace = run_closed_loop(sc, &mut ctrl, &trace_path)?;
    write_trace_csv(&trace_path, &trace)?;
    let summary = summarize(sc, &ctrl, &trace)?;
    write_toml(&dir.join("summary.toml"), &summary)?;
    let audit = lyapunov_audit(&trace, ctrl.model(), ctrl.steady_state(), sc.empc.variant)?;
    write_toml(&dir.join("lyapunov.toml"), &LyapunovFile::from_audit(&audit))?;
    Ok((ctrl, trace, summary))
}

/// Runs the full benchmark pipeline: the plain economic controller and the
/// regularized one, each with steady-state solve, six-day simulation, and
/// Lyapunov audit, plus a dissipativity check of the plain problem.
pub fn cmd_bench_richmond(config: Option<&Path>, flags: &Flags) -> Result<(), CommandError> {
    let mut raw: ScenarioConfig = match config {
        Some(path) => ScenarioConfig::parse(path)?,
        None => toml::from_str(RICHMOND_SCENARIO).map_err(|source| {
            ConfigError::Parse {
                path: PathBuf::from("<built-in richmond scenario>"),
                source: Box::new(source),
            }
        })?,
    };
    if raw.system.preset.as_deref() != Some("richmond") {
        return Err(CommandError::Invalid(
            "bench-richmond needs a scenario with system.preset = \"richmond\"".into(),
        ));
    }
    let base = config
        .and_then(Path::parent)
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let gamma = raw.cost.gamma.unwrap_or(BENCH_DEFAULT_GAMMA);

    // Plain arm: unregularized economic cost, steady-state-set terminal.
    raw.cost.epsilon = None;
    raw.cost.gamma = None;
    raw.empc.cost_variant = CostVariantCfg::Economic;
    raw.empc.terminal_mode = TerminalModeCfg::SteadyStateSet;
    raw.empc.terminal_target = None;
    let mut plain_sc = raw.materialize(&base)?;
    flags.apply(&mut plain_sc);

    // Regularized arm: gamma-budgeted weight, fixed-point terminal at the
    // now-unique optimal steady state.
    let mut modified_raw = raw.clone();
    modified_raw.cost.gamma = Some(gamma);
    modified_raw.empc.cost_variant = CostVariantCfg::Modified;
    modified_raw.empc.terminal_mode = TerminalModeCfg::FixedPoint;
    let mut modified_sc = modified_raw.materialize(&base)?;
    flags.apply(&mut modified_sc);

    let root = plain_sc.output.directory.clone();
    ensure_dir(&root)?;

    println!("plain arm");
    let (plain_ctrl, _, plain_summary) = bench_arm(&plain_sc, &root.join("plain"))?;
    print_period_table(&plain_summary);

    println!("\nregularized arm (gamma = {gamma})");
    let (modified_ctrl, modified_trace, modified_summary) =
        bench_arm(&modified_sc, &root.join("modified"))?;
    print_period_table(&modified_summary);
    let parked = modified_ctrl
        .distance_to_target(&modified_trace.final_state)
        .map_err(CommandError::Controller)?;
    println!("distance to the regularized steady state after the run: {parked:.3e}");

    let storage = {
        let base = StorageFunction::from_steady_state(plain_ctrl.steady_state());
        if flags.corrupt_mu {
            base.corrupted(0, 0.5)
        } else {
            base
        }
    };
    let dissipativity = check_dissipativity(
        plain_ctrl.model(),
        plain_ctrl.steady_state(),
        &storage,
        plain_sc.certification.n_samples,
        plain_sc.certification.seed,
    )?;
    write_toml(
        &root.join("dissipativity.toml"),
        &DissipativityFile::from_report(&dissipativity),
    )?;
    println!(
        "\ndissipativity ({} samples): {:?}, sampled min {:.3e}, exact box min {:.3e}",
        dissipativity.n_samples,
        dissipativity.verdict,
        dissipativity.min_rotated_cost,
        dissipativity.global_min
    );
    if dissipativity.verdict == Verdict::Violated {
        return Err(CommandError::CertificationFailed(
            "rotated cost of the plain problem dips negative; witness in dissipativity.toml"
                .into(),
        ));
    }
    Ok(())
}

/// Physical final levels of a trace (last period block, before any
/// previous-input entries).
pub fn final_levels(trace: &ClosedLoopTrace, n_phys: usize) -> DVector<f64> {
    let state = &trace.final_state;
    let lifted_len = if trace.augmented {
        state.len() - trace.steps.first().map_or(0, |r| r.applied_input.len()) / trace.period
    } else {
        state.len()
    };
    state.rows(lifted_len - n_phys, n_phys).into_owned()
}
