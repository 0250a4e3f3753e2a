//! Numerical certificates for a solved instance.
//!
//! Three audits live here, all independent of the controller's own
//! bookkeeping so they can catch its mistakes:
//!
//! * [`check_dissipativity`] samples the rotated stage cost over the
//!   constraint box and refines the worst point with an exact box-QP
//!   minimization. A correct multiplier makes the rotated cost
//!   nonnegative everywhere and zero on the steady-state set.
//! * [`lyapunov_audit`] recomputes the value estimates of a closed-loop
//!   trace stage by stage and reports the worst descent violation.
//! * [`cost_gap_ledger`] re-solves the unregularized problem along a
//!   regularized trajectory and tabulates the optimality price of the
//!   regularization against its a-priori bound.
//!
//! Sampling uses one counter-mode stream per sample index, so reports are
//! identical no matter how the sample range is chunked or parallelized.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::empc::{ClosedLoopTrace, CostVariant, EmpcController, EmpcError};
use crate::model::CompiledModel;
use crate::qp::{solve_qp, QpError, QpProblem, SolverSettings, SolverStatus};
use crate::steady_state::{steady_state_set, SteadyStateError, SteadyStateResult};

/// Rotated costs below this are treated as genuine violations rather than
/// round-off.
const VIOLATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("sample count must be positive")]
    NoSamples,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("constraint box is unbounded; sampling needs finite bounds")]
    UnboundedBox,
    #[error("paired instances do not match: {what}")]
    MismatchedInstances { what: &'static str },
    #[error("rotated-cost refinement did not converge (status {status})")]
    RefinementFailed { status: SolverStatus },
    #[error("re-solve of the unregularized problem failed at step {step}: {source}")]
    PlainSolveFailed {
        step: usize,
        source: Box<EmpcError>,
    },
    #[error(transparent)]
    SteadyState(#[from] SteadyStateError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Linear storage function `lambda(x) = mu' x`.
#[derive(Debug, Clone)]
pub struct StorageFunction {
    pub mu: DVector<f64>,
}

impl StorageFunction {
    pub fn from_steady_state(ss: &SteadyStateResult) -> Self {
        StorageFunction { mu: ss.mu.clone() }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.mu.dot(x)
    }

    /// Perturbed copy, for exercising the violation path.
    pub fn corrupted(&self, index: usize, delta: f64) -> Self {
        let mut mu = self.mu.clone();
        let i = index % mu.len();
        mu[i] += delta;
        StorageFunction { mu }
    }
}

/// Rotated stage cost under an arbitrary storage function.
pub fn rotated_cost(
    storage: &StorageFunction,
    model: &CompiledModel,
    ell_s_full: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    model.stage_cost(x, u) - ell_s_full + storage.mu.dot(&(x - model.step(x, u)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// No sampled or refined point fell below the violation tolerance.
    Certified,
    Violated,
}

#[derive(Debug, Clone)]
pub struct DissipativityReport {
    pub n_samples: usize,
    /// Worst sampled rotated cost and the sample index that attained it.
    pub min_rotated_cost: f64,
    pub min_index: usize,
    /// Distance threshold separating "far from the steady-state set".
    pub far_threshold: f64,
    /// Worst rotated cost among samples at least `far_threshold` from the
    /// set; `None` when no sample was that far.
    pub min_far: Option<f64>,
    pub far_count: usize,
    /// Largest |rotated cost| over points projected onto the set, driven
    /// by the steady input.
    pub max_abs_on_set: f64,
    /// Exact minimum of the rotated cost over the box, from a QP.
    pub global_min: f64,
    pub witness_x: DVector<f64>,
    pub witness_u: DVector<f64>,
    pub verdict: Verdict,
}

fn require_finite_box(model: &CompiledModel) -> Result<(), CertifyError> {
    let finite = model.x_lb().iter().all(|v| v.is_finite())
        && model.x_ub().iter().all(|v| v.is_finite())
        && model.u_lb().iter().all(|v| v.is_finite())
        && model.u_ub().iter().all(|v| v.is_finite());
    if finite {
        Ok(())
    } else {
        Err(CertifyError::UnboundedBox)
    }
}

fn sample_box(rng: &mut ChaCha8Rng, lb: &DVector<f64>, ub: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(lb.len(), |i, _| {
        lb[i] + (ub[i] - lb[i]) * rng.random::<f64>()
    })
}

/// Exact minimum of the rotated cost over the box. The rotated cost is a
/// convex quadratic in (x, u), so this is a single QP with no equalities.
fn refine_global_min(
    storage: &StorageFunction,
    model: &CompiledModel,
    ell_s_full: f64,
) -> Result<(f64, DVector<f64>, DVector<f64>), CertifyError> {
    let ns = model.state_dim();
    let nu = model.input_dim();
    let nz = ns + nu;
    let mut h = DMatrix::zeros(nz, nz);
    h.view_mut((0, 0), (ns, ns)).copy_from(&model.h_xx());
    h.view_mut((ns, ns), (nu, nu)).copy_from(&model.h_uu());
    let h_xu = model.h_xu();
    h.view_mut((0, ns), (ns, nu)).copy_from(&h_xu);
    h.view_mut((ns, 0), (nu, ns)).copy_from(&h_xu.transpose());

    // Linear part: mu'(x - a x - b u - c) contributes (I - a)' mu on x and
    // -b' mu on u; the economic price alpha sits on u.
    let g_x = (DMatrix::identity(ns, ns) - model.a()).transpose() * &storage.mu;
    let g_u = model.alpha() - model.b().transpose() * &storage.mu;
    let mut g = DVector::zeros(nz);
    g.rows_mut(0, ns).copy_from(&g_x);
    g.rows_mut(ns, nu).copy_from(&g_u);
    let constant = model.cost_constant() - ell_s_full - storage.mu.dot(model.c());

    let mut lb = DVector::zeros(nz);
    let mut ub = DVector::zeros(nz);
    lb.rows_mut(0, ns).copy_from(model.x_lb());
    ub.rows_mut(0, ns).copy_from(model.x_ub());
    lb.rows_mut(ns, nu).copy_from(model.u_lb());
    ub.rows_mut(ns, nu).copy_from(model.u_ub());

    let prob = QpProblem::new(h, g, DMatrix::zeros(0, nz), DVector::zeros(0), lb, ub)?;
    let sol = solve_qp(&prob, &SolverSettings::default())?;
    if sol.status != SolverStatus::Optimal {
        return Err(CertifyError::RefinementFailed { status: sol.status });
    }
    let x = sol.x.rows(0, ns).into_owned();
    let u = sol.x.rows(ns, nu).into_owned();
    Ok((sol.objective + constant, x, u))
}

/// Sample the rotated stage cost over the box and certify its sign.
///
/// `storage` is passed explicitly so a deliberately corrupted multiplier
/// exercises the violation path.
pub fn check_dissipativity(
    model: &CompiledModel,
    ss: &SteadyStateResult,
    storage: &StorageFunction,
    n_samples: usize,
    seed: u64,
) -> Result<DissipativityReport, CertifyError> {
    if n_samples == 0 {
        return Err(CertifyError::NoSamples);
    }
    require_finite_box(model)?;
    let set = steady_state_set(ss, model);
    let basis = &set.basis;
    let x_p = &set.x_particular;

    let diameter = (model.x_ub() - model.x_lb()).norm();
    let far_threshold = 1e-2 * diameter;

    let mut min_cost = f64::INFINITY;
    let mut min_index = 0usize;
    let mut min_far: Option<f64> = None;
    let mut far_count = 0usize;
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let x = sample_box(&mut rng, model.x_lb(), model.x_ub());
        let u = sample_box(&mut rng, model.u_lb(), model.u_ub());
        let value = rotated_cost(storage, model, ss.ell_s_full, &x, &u);
        if value < min_cost {
            min_cost = value;
            min_index = i;
        }
        // Distance to the affine hull of the set lower-bounds the distance
        // to the set itself, so this subset is genuinely far.
        let r = &x - x_p;
        let hull_dist = if basis.ncols() == 0 {
            r.norm()
        } else {
            (&r - basis * (basis.transpose() * &r)).norm()
        };
        if hull_dist >= far_threshold {
            far_count += 1;
            min_far = Some(min_far.map_or(value, |m: f64| m.min(value)));
        }
    }

    // On-set audit: project samples onto the set and drive them with the
    // steady input; every such pair is a fixed point, so the rotated cost
    // must vanish.
    let mut max_abs_on_set: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e7);
        rng.set_stream(i);
        let q = sample_box(&mut rng, model.x_lb(), model.x_ub());
        let (on_set, _) = set.project(&q)?;
        let value = rotated_cost(storage, model, ss.ell_s_full, &on_set, &ss.u_s);
        max_abs_on_set = max_abs_on_set.max(value.abs());
    }

    let (global_min, witness_x, witness_u) = refine_global_min(storage, model, ss.ell_s_full)?;
    let verdict = if global_min < -VIOLATION_TOL || min_cost < -VIOLATION_TOL {
        Verdict::Violated
    } else {
        Verdict::Certified
    };

    Ok(DissipativityReport {
        n_samples,
        min_rotated_cost: min_cost,
        min_index,
        far_threshold,
        min_far,
        far_count,
        max_abs_on_set,
        global_min,
        witness_x,
        witness_u,
        verdict,
    })
}

#[derive(Debug, Clone)]
pub struct LyapunovAudit {
    /// Recomputed value estimate per step.
    pub values: Vec<f64>,
    /// Largest `V(t+1) - V(t) + L(x_t, u_t)` over consecutive steps;
    /// descent means this stays near or below zero.
    pub worst_descent_gap: f64,
    pub worst_descent_step: usize,
    /// Smallest `V(t) - L(x_t, u_t)`; the value should dominate the
    /// rotated cost of the applied move.
    pub min_value_minus_stage: f64,
    pub min_value: f64,
    /// Largest disagreement with the values the controller recorded.
    pub recomputation_error: f64,
}

/// Recompute the value estimates of a trace from raw open-loop data and
/// audit their descent. Pure arithmetic on the trace: same input, same
/// output, bit for bit.
pub fn lyapunov_audit(
    trace: &ClosedLoopTrace,
    model: &CompiledModel,
    ss: &SteadyStateResult,
    variant: CostVariant,
) -> Result<LyapunovAudit, CertifyError> {
    if trace.is_empty() {
        return Err(CertifyError::EmptyTrace);
    }
    let storage = StorageFunction::from_steady_state(ss);
    let mut values = Vec::with_capacity(trace.len());
    let mut stage_costs = Vec::with_capacity(trace.len());
    let mut recomputation_error: f64 = 0.0;

    for rec in &trace.steps {
        let ol = &rec.open_loop;
        let k = ol.inputs.len() as f64;
        let mut econ = 0.0;
        let mut full = 0.0;
        let mut x = ol.x0.clone();
        for (u, x_next) in ol.inputs.iter().zip(&ol.predicted_states) {
            econ += model.stage_cost_economic(&x, u);
            full += model.stage_cost(&x, u);
            x = x_next.clone();
        }
        let x_last = ol.predicted_states.last().expect("nonempty horizon");
        let value = match variant {
            CostVariant::Economic | CostVariant::Rotated => {
                econ - k * ss.ell_s_economic + storage.value(&ol.x0)
            }
            CostVariant::Modified => {
                full - k * ss.ell_s_full + storage.value(&ol.x0) - storage.value(x_last)
            }
        };
        recomputation_error = recomputation_error.max((value - rec.lyapunov).abs());
        values.push(value);
        stage_costs.push(rotated_cost(
            &storage,
            model,
            ss.ell_s_full,
            &rec.state,
            &rec.applied_input,
        ));
    }

    let mut worst_descent_gap = f64::NEG_INFINITY;
    let mut worst_descent_step = 0usize;
    for t in 0..values.len().saturating_sub(1) {
        let gap = values[t + 1] - values[t] + stage_costs[t];
        if gap > worst_descent_gap {
            worst_descent_gap = gap;
            worst_descent_step = t;
        }
    }
    let min_value_minus_stage = values
        .iter()
        .zip(&stage_costs)
        .map(|(v, l)| v - l)
        .fold(f64::INFINITY, f64::min);
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);

    Ok(LyapunovAudit {
        values,
        worst_descent_gap,
        worst_descent_step,
        min_value_minus_stage,
        min_value,
        recomputation_error,
    })
}

#[derive(Debug, Clone)]
pub struct StepGap {
    pub step: usize,
    /// Optimal regularized cost recorded in the trace.
    pub modified: f64,
    /// Optimal unregularized cost re-solved at the same state.
    pub plain: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct CostGapLedger {
    /// Economic steady cost of the regularized steady state minus the
    /// unregularized optimum; at most `gamma` by the regularizer choice.
    pub steady_gap: f64,
    pub gamma: f64,
    /// A-priori per-step bound `K * epsilon * R`.
    pub bound: f64,
    pub gaps: Vec<StepGap>,
    pub max_gap: f64,
    pub min_gap: f64,
}

/// Price of regularization along a trajectory: for every step of a
/// regularized trace, re-solve the plain problem from the same state and
/// tabulate the cost difference.
///
/// `r` is the box constant from the regularizer rule; the reported bound
/// is `K * epsilon * r`.
pub fn cost_gap_ledger(
    trace: &ClosedLoopTrace,
    modified_ss: &SteadyStateResult,
    plain: &mut EmpcController,
    gamma: f64,
    r: f64,
) -> Result<CostGapLedger, CertifyError> {
    if trace.is_empty() {
        return Err(CertifyError::EmptyTrace);
    }
    if modified_ss.epsilon <= 0.0 {
        return Err(CertifyError::MismatchedInstances {
            what: "trace side must come from a regularized cost",
        });
    }
    if plain.model().epsilon() != 0.0 {
        return Err(CertifyError::MismatchedInstances {
            what: "re-solve side must be unregularized",
        });
    }
    let k = trace.steps[0].open_loop.inputs.len();
    if plain.config().horizon_periods != k {
        return Err(CertifyError::MismatchedInstances {
            what: "horizon lengths differ",
        });
    }
    if trace.steps[0].state.len() != plain.model().state_dim() {
        return Err(CertifyError::MismatchedInstances {
            what: "state dimensions differ",
        });
    }

    let epsilon = modified_ss.epsilon;
    let bound = k as f64 * epsilon * r;
    let steady_gap = modified_ss.ell_s_economic - plain.steady_state().ell_s_economic;

    plain.reset_warm_start();
    let mut gaps = Vec::with_capacity(trace.len());
    let mut max_gap = f64::NEG_INFINITY;
    let mut min_gap = f64::INFINITY;
    for rec in &trace.steps {
        let sol = plain.solve_step(&rec.state).map_err(|e| {
            CertifyError::PlainSolveFailed {
                step: rec.step,
                source: Box::new(e),
            }
        })?;
        let modified = rec.open_loop.cost_full;
        let gap = modified - sol.cost_economic;
        max_gap = max_gap.max(gap);
        min_gap = min_gap.min(gap);
        gaps.push(StepGap {
            step: rec.step,
            modified,
            plain: sol.cost_economic,
            gap,
        });
    }

    Ok(CostGapLedger {
        steady_gap,
        gamma,
        bound,
        gaps,
        max_gap,
        min_gap,
    })
}
