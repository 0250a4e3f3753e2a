//! Optimal periodic steady-state problems and the steady-state set.
//!
//! The steady-state problem minimizes the compiled stage cost over fixed
//! points of the lifted (or augmented) dynamics inside the box. Three of its
//! outputs drive the rest of the pipeline:
//!
//! * the optimal input `u_s`, unique under strict convexity, which compiles
//!   the terminal constraint of the receding-horizon problems;
//! * the equality multiplier `mu`, which becomes the linear storage function
//!   of the certification layer;
//! * the affine parametrization of all optimal steady states (one particular
//!   state plus a nullspace basis of `I - A`), which is what "converge to the
//!   set" is measured against.
//!
//! The module also owns the regularization-weight rule: given a cost
//! tolerance gamma, `choose_epsilon` picks the state weight so the
//! regularized optimum costs at most gamma more than the true one.

use crate::dynamics::{AugmentedSystem, LiftedSystem};
use crate::model::{compile, BoxConstraints, CompiledModel, ModelError, StageCostSpec};
use crate::qp::{solve_qp, QpError, QpProblem, SolverSettings, SolverStatus};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SteadyStateError {
    #[error("steady-state problem infeasible (primal residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("steady-state problem unbounded; the box must bound the cost")]
    Unbounded,
    #[error("steady-state solve hit the iteration limit (primal {primal:.3e}, dual {dual:.3e})")]
    IterationLimit { primal: f64, dual: f64 },
    #[error("set projection subproblem ended with status {status}")]
    Projection { status: SolverStatus },
    #[error("gamma must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("the regularization rule needs finite state bounds")]
    UnboundedStateBox,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Singular values below `RANK_CUTOFF * sigma_max` count as zero when
/// extracting the nullspace of `I - A`.
const RANK_CUTOFF: f64 = 1e-9;

/// Solution of one steady-state problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateResult {
    /// Optimal input over one period (mT).
    pub u_s: DVector<f64>,
    /// Optimal cost without the eps x'x term.
    pub ell_s_economic: f64,
    /// Optimal cost of the objective actually minimized (includes eps x'x).
    pub ell_s_full: f64,
    /// Multiplier of the fixed-point equality; defines the storage function.
    pub mu: DVector<f64>,
    /// One optimal steady state (nT, or nT+m when augmented).
    pub x_s_particular: DVector<f64>,
    /// Orthonormal basis of the feasible steady-state directions; zero
    /// columns when epsilon > 0 (the regularized optimum is unique).
    pub x_s_nullspace: DMatrix<f64>,
    pub epsilon: f64,
    pub augmented: bool,
}

impl SteadyStateResult {
    /// Storage-function value at `x`.
    pub fn storage(&self, x: &DVector<f64>) -> f64 {
        self.mu.dot(x)
    }
}

/// Solves the steady-state problem for a lifted system, augmenting first
/// when an input-move penalty is present.
pub fn solve_steady_state(
    lifted: &LiftedSystem,
    aug: Option<&AugmentedSystem>,
    cost: &StageCostSpec,
    bounds: &BoxConstraints,
) -> Result<SteadyStateResult, SteadyStateError> {
    let model = compile(lifted, aug, cost, bounds)?;
    solve_steady_state_model(&model)
}

/// Steady-state problem over an already-compiled arena.
pub fn solve_steady_state_model(
    model: &CompiledModel,
) -> Result<SteadyStateResult, SteadyStateError> {
    let ns = model.state_dim();
    let mu_dim = model.input_dim();
    let nz = ns + mu_dim;

    let mut h = DMatrix::zeros(nz, nz);
    h.view_mut((0, 0), (ns, ns)).copy_from(&model.h_xx());
    h.view_mut((ns, ns), (mu_dim, mu_dim))
        .copy_from(&model.h_uu());
    let hxu = model.h_xu();
    h.view_mut((0, ns), (ns, mu_dim)).copy_from(&hxu);
    h.view_mut((ns, 0), (mu_dim, ns)).copy_from(&hxu.transpose());

    let mut g = DVector::zeros(nz);
    g.rows_mut(ns, mu_dim).copy_from(model.alpha());

    // Fixed-point condition (I - a) x - b u = c as equality rows.
    let mut a_eq = DMatrix::zeros(ns, nz);
    a_eq.view_mut((0, 0), (ns, ns))
        .copy_from(&(DMatrix::identity(ns, ns) - model.a()));
    a_eq.view_mut((0, ns), (ns, mu_dim))
        .copy_from(&(-model.b()));

    let mut lb = DVector::zeros(nz);
    let mut ub = DVector::zeros(nz);
    lb.rows_mut(0, ns).copy_from(model.x_lb());
    ub.rows_mut(0, ns).copy_from(model.x_ub());
    lb.rows_mut(ns, mu_dim).copy_from(model.u_lb());
    ub.rows_mut(ns, mu_dim).copy_from(model.u_ub());

    let problem = QpProblem::new(h, g, a_eq, model.c().clone(), lb, ub)?;
    let solution = solve_qp(&problem, &SolverSettings::default())?;
    match solution.status {
        SolverStatus::Optimal => {}
        SolverStatus::Infeasible => {
            return Err(SteadyStateError::Infeasible {
                residual: solution.primal_residual,
            })
        }
        SolverStatus::Unbounded => return Err(SteadyStateError::Unbounded),
        SolverStatus::MaxIterations => {
            return Err(SteadyStateError::IterationLimit {
                primal: solution.primal_residual,
                dual: solution.dual_residual,
            })
        }
    }

    let x_s = solution.x.rows(0, ns).into_owned();
    let u_s = solution.x.rows(ns, mu_dim).into_owned();
    let nullspace = if model.epsilon() > 0.0 {
        DMatrix::zeros(ns, 0)
    } else {
        fixed_point_nullspace(model.a())
    };

    Ok(SteadyStateResult {
        ell_s_economic: model.stage_cost_economic(&x_s, &u_s),
        ell_s_full: model.stage_cost(&x_s, &u_s),
        u_s,
        mu: solution.mu_eq,
        x_s_particular: x_s,
        x_s_nullspace: nullspace,
        epsilon: model.epsilon(),
        augmented: model.is_augmented(),
    })
}

/// Orthonormal nullspace basis of `I - a` via singular value decomposition.
fn fixed_point_nullspace(a: &DMatrix<f64>) -> DMatrix<f64> {
    let ns = a.nrows();
    let m = DMatrix::identity(ns, ns) - a;
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sigma_max = svd.singular_values.amax();
    if sigma_max == 0.0 {
        return DMatrix::identity(ns, ns);
    }
    let cutoff = RANK_CUTOFF * sigma_max;
    let null_rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= cutoff)
        .collect();
    let mut basis = DMatrix::zeros(ns, null_rows.len());
    for (col, &row) in null_rows.iter().enumerate() {
        basis.column_mut(col).copy_from(&v_t.row(row).transpose());
    }
    basis
}

/// `{x_particular + basis z : z free}` intersected with a box: the set of
/// optimal steady states. Membership and Euclidean projection are exact
/// small QPs.
#[derive(Debug, Clone)]
pub struct AffineSliceSet {
    pub x_particular: DVector<f64>,
    /// Orthonormal columns; may have zero columns (singleton set).
    pub basis: DMatrix<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl AffineSliceSet {
    pub fn dimension(&self) -> usize {
        self.basis.ncols()
    }

    /// Euclidean projection of `q` onto the set; returns the closest member
    /// and the distance.
    pub fn project(&self, q: &DVector<f64>) -> Result<(DVector<f64>, f64), SteadyStateError> {
        let ns = self.x_particular.len();
        let k = self.basis.ncols();
        if k == 0 {
            let dist = (q - &self.x_particular).norm();
            return Ok((self.x_particular.clone(), dist));
        }
        // min ||x - q||^2 over x = x_particular + basis z, x in box, z free.
        let nz = ns + k;
        let mut h = DMatrix::zeros(nz, nz);
        h.view_mut((0, 0), (ns, ns))
            .copy_from(&(DMatrix::identity(ns, ns) * 2.0));
        let mut g = DVector::zeros(nz);
        g.rows_mut(0, ns).copy_from(&(-2.0 * q));
        let mut a_eq = DMatrix::zeros(ns, nz);
        a_eq.view_mut((0, 0), (ns, ns))
            .copy_from(&DMatrix::identity(ns, ns));
        a_eq.view_mut((0, ns), (ns, k)).copy_from(&(-&self.basis));
        let mut lb = DVector::from_element(nz, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(nz, f64::INFINITY);
        lb.rows_mut(0, ns).copy_from(&self.lb);
        ub.rows_mut(0, ns).copy_from(&self.ub);

        let problem = QpProblem::new(h, g, a_eq, self.x_particular.clone(), lb, ub)?;
        let solution = solve_qp(&problem, &SolverSettings::default())?;
        if solution.status != SolverStatus::Optimal {
            return Err(SteadyStateError::Projection {
                status: solution.status,
            });
        }
        let x = solution.x.rows(0, ns).into_owned();
        let dist = (&x - q).norm();
        Ok((x, dist))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool, SteadyStateError> {
        Ok(self.project(x)?.1 <= tol)
    }
}

/// The set of optimal steady states for a solved problem, as an affine slice
/// clipped to the model's state box.
pub fn steady_state_set(result: &SteadyStateResult, model: &CompiledModel) -> AffineSliceSet {
    AffineSliceSet {
        x_particular: result.x_s_particular.clone(),
        basis: result.x_s_nullspace.clone(),
        lb: model.x_lb().clone(),
        ub: model.x_ub().clone(),
    }
}

/// Output of the regularization-weight rule.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonChoice {
    pub epsilon: f64,
    /// max of x'x over the lifted state box.
    pub r: f64,
}

/// Picks the state weight `min(gamma, gamma / R)` with
/// `R = T * sum_i max(x_lb_i^2, x_ub_i^2)`, the exact maximum of `x'x` over
/// the period-tiled state box. The regularized steady optimum then costs at
/// most gamma more than the unregularized one.
pub fn choose_epsilon(
    gamma: f64,
    bounds: &BoxConstraints,
    period: usize,
) -> Result<EpsilonChoice, SteadyStateError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(SteadyStateError::BadGamma(gamma));
    }
    let mut block = 0.0;
    for i in 0..bounds.x_lb.len() {
        let lo = bounds.x_lb[i];
        let hi = bounds.x_ub[i];
        if !lo.is_finite() || !hi.is_finite() {
            return Err(SteadyStateError::UnboundedStateBox);
        }
        block += (lo * lo).max(hi * hi);
    }
    let r = period as f64 * block;
    Ok(EpsilonChoice {
        epsilon: gamma.min(gamma / r),
        r,
    })
}

/// Result of solving the steady-state problem from every start phase.
#[derive(Debug, Clone)]
pub struct ShiftCheckReport {
    /// Optimal cost per rotation (index = start phase).
    pub costs: Vec<f64>,
    pub max_cost_deviation: f64,
    /// Worst deviation between a rotated optimal input and the cyclic shift
    /// of the unrotated one; meaningful when the optimizer is unique.
    pub max_input_shift_error: f64,
}

/// Solves the steady-state problem for every cyclic rotation of prices and
/// disturbances. Start-phase independence means all costs agree and the
/// optimal inputs are cyclic shifts of one another.
pub fn periodic_shift_check(
    lifted: &LiftedSystem,
    aug: Option<&AugmentedSystem>,
    cost: &StageCostSpec,
    bounds: &BoxConstraints,
) -> Result<ShiftCheckReport, SteadyStateError> {
    let t = lifted.period;
    let m = lifted.m;
    let base = solve_steady_state(lifted, aug, cost, bounds)?;

    let mut costs = Vec::with_capacity(t);
    let mut max_input_shift_error: f64 = 0.0;
    for shift in 0..t {
        let rotated = if shift == 0 {
            base.clone()
        } else {
            let cost_rot = cost.rotated(shift);
            let model = compile(lifted, aug, &cost_rot, bounds)?.with_rotated_drift(lifted, shift);
            solve_steady_state_model(&model)?
        };
        costs.push(rotated.ell_s_full);
        for k in 0..t {
            let expect = base.u_s.rows(((k + shift) % t) * m, m);
            let got = rotated.u_s.rows(k * m, m);
            max_input_shift_error = max_input_shift_error.max((got - expect).amax());
        }
    }
    let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ShiftCheckReport {
        costs,
        max_cost_deviation: hi - lo,
        max_input_shift_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{augment, LinearPeriodicSystem};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn integrator(period: usize) -> LinearPeriodicSystem {
        LinearPeriodicSystem::new(
            dmatrix![1.0],
            dmatrix![1.0],
            DMatrix::zeros(1, 1),
            period,
            vec![dvector![0.0]; period],
        )
        .unwrap()
    }

    fn unit_boxes() -> BoxConstraints {
        BoxConstraints::new(dvector![-1.0], dvector![1.0], dvector![-1.0], dvector![1.0]).unwrap()
    }

    #[test]
    fn integrator_flat_cost_has_interval_of_steady_states() {
        let lifted = integrator(1).lift();
        let cost =
            StageCostSpec::input_quadratic(dvector![0.0], dmatrix![1.0], 1, 0.0, 0.0).unwrap();
        let bounds = unit_boxes();
        let ss = solve_steady_state(&lifted, None, &cost, &bounds).unwrap();

        assert!(ss.u_s[0].abs() <= 1e-9);
        assert!(ss.ell_s_economic.abs() <= 1e-9);
        assert_eq!(ss.x_s_nullspace.ncols(), 1);
        assert!((ss.x_s_nullspace[(0, 0)].abs() - 1.0).abs() <= 1e-12);

        let model = compile(&lifted, None, &cost, &bounds).unwrap();
        let set = steady_state_set(&ss, &model);
        assert!(set.contains(&dvector![0.7], 1e-6).unwrap());
        let (point, dist) = set.project(&dvector![1.5]).unwrap();
        assert!((point[0] - 1.0).abs() <= 1e-6);
        assert!((dist - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn regularization_pins_the_integrator_origin() {
        let lifted = integrator(1).lift();
        let cost =
            StageCostSpec::input_quadratic(dvector![0.0], dmatrix![1.0], 1, 0.01, 0.0).unwrap();
        let bounds = unit_boxes();
        let ss = solve_steady_state(&lifted, None, &cost, &bounds).unwrap();

        assert!(ss.x_s_particular[0].abs() <= 1e-6);
        assert!(ss.u_s[0].abs() <= 1e-6);
        assert_eq!(ss.x_s_nullspace.ncols(), 0);

        let model = compile(&lifted, None, &cost, &bounds).unwrap();
        let set = steady_state_set(&ss, &model);
        let (point, dist) = set.project(&dvector![0.5]).unwrap();
        assert!(point[0].abs() <= 1e-6);
        assert!((dist - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn contraction_steady_state_matches_grid_oracle() {
        // x = 0.5 x + u forces x = 2u; cost (u-1)^2 written as
        // offset 1, alpha -2, q_u 1. Grid over u confirms the optimum.
        let sys = LinearPeriodicSystem::new(
            dmatrix![0.5],
            dmatrix![1.0],
            DMatrix::zeros(1, 1),
            1,
            vec![dvector![0.0]],
        )
        .unwrap();
        let lifted = sys.lift();
        let cost =
            StageCostSpec::input_quadratic(dvector![-2.0], dmatrix![1.0], 1, 0.0, 1.0).unwrap();
        let bounds =
            BoxConstraints::new(dvector![-10.0], dvector![10.0], dvector![0.0], dvector![2.0])
                .unwrap();

        let mut best = (f64::INFINITY, 0.0);
        let mut u: f64 = 0.0;
        while u <= 2.0 {
            let x = 2.0 * u;
            if x.abs() <= 10.0 {
                let cost_u = (u - 1.0) * (u - 1.0);
                if cost_u < best.0 {
                    best = (cost_u, u);
                }
            }
            u += 1e-4;
        }
        assert!(best.0.abs() <= 1e-12);
        assert!((best.1 - 1.0).abs() <= 1e-9);

        let ss = solve_steady_state(&lifted, None, &cost, &bounds).unwrap();
        assert!((ss.u_s[0] - 1.0).abs() <= 1e-6);
        assert!((ss.x_s_particular[0] - 2.0).abs() <= 1e-6);
        assert!(ss.ell_s_economic.abs() <= 1e-9);
        assert_eq!(ss.x_s_nullspace.ncols(), 0);
    }

    /// Shared two-hour instance with prices, a direct input quadratic, and a
    /// move penalty; interior optimum.
    fn two_hour_instance() -> (
        LinearPeriodicSystem,
        AugmentedSystem,
        StageCostSpec,
        BoxConstraints,
    ) {
        let sys = LinearPeriodicSystem::new(
            dmatrix![0.5],
            dmatrix![1.0],
            dmatrix![1.0],
            2,
            vec![dvector![0.4], dvector![-0.1]],
        )
        .unwrap();
        let aug = augment(&sys.lift());
        let cost = StageCostSpec::new(
            vec![dvector![-1.5], dvector![-0.5]],
            dmatrix![0.3],
            dmatrix![0.1],
            0.0,
            0.0,
        )
        .unwrap();
        let bounds =
            BoxConstraints::new(dvector![-10.0], dvector![10.0], dvector![0.0], dvector![2.0])
                .unwrap();
        (sys, aug, cost, bounds)
    }

    fn two_hour_grid_oracle(
        cost: &StageCostSpec,
        bounds: &BoxConstraints,
        step: f64,
    ) -> (f64, f64, f64) {
        // Fixed point of the two-hour lift of x+ = 0.5x + u + d:
        //   x2 = (0.5 (u0 + d0) + u1 + d1) / 0.75, x1 = 0.5 x2 + u0 + d0,
        // carried input v = u1, moves (u0 - u1, u1 - u0).
        let (d0, d1) = (0.4, -0.1);
        let (a0, a1) = (cost.alpha_seq[0][0], cost.alpha_seq[1][0]);
        let (q, w) = (cost.q_u[(0, 0)], cost.w[(0, 0)]);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let mut u0 = bounds.u_lb[0];
        while u0 <= bounds.u_ub[0] + 1e-12 {
            let mut u1 = bounds.u_lb[0];
            while u1 <= bounds.u_ub[0] + 1e-12 {
                let x2 = (0.5 * (u0 + d0) + u1 + d1) / 0.75;
                let x1 = 0.5 * x2 + u0 + d0;
                if x1.abs() <= bounds.x_ub[0] && x2.abs() <= bounds.x_ub[0] {
                    let moves = (u0 - u1).powi(2) + (u1 - u0).powi(2);
                    let value =
                        a0 * u0 + a1 * u1 + q * (u0 * u0 + u1 * u1) + w * moves;
                    if value < best.0 {
                        best = (value, u0, u1);
                    }
                }
                u1 += step;
            }
            u0 += step;
        }
        best
    }

    #[test]
    fn augmented_steady_state_matches_grid_oracle() {
        let (sys, aug, cost, bounds) = two_hour_instance();
        let (grid_value, grid_u0, grid_u1) = two_hour_grid_oracle(&cost, &bounds, 1e-3);

        let ss = solve_steady_state(&sys.lift(), Some(&aug), &cost, &bounds).unwrap();
        assert!((ss.ell_s_economic - grid_value).abs() <= 1e-4);
        assert!((ss.u_s[0] - grid_u0).abs() <= 2e-3);
        assert!((ss.u_s[1] - grid_u1).abs() <= 2e-3);

        // The carried input equals the last input block at a fixed point.
        assert!((ss.x_s_particular[2] - ss.u_s[1]).abs() <= 1e-8);
        assert_eq!(ss.mu.len(), 3);

        let model = compile(&sys.lift(), Some(&aug), &cost, &bounds).unwrap();
        let residual =
            (&ss.x_s_particular - model.step(&ss.x_s_particular, &ss.u_s)).amax();
        assert!(residual <= 1e-8);
    }

    #[test]
    fn multiplier_certifies_cost_lower_bound_on_samples() {
        // Lagrangian duality: stage cost minus optimum plus mu'(x - f(x,u))
        // is nonnegative over the whole box.
        let (sys, aug, cost, bounds) = two_hour_instance();
        let lifted = sys.lift();
        let model = compile(&lifted, Some(&aug), &cost, &bounds).unwrap();
        let ss = solve_steady_state_model(&model).unwrap();

        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let x = DVector::from_fn(model.state_dim(), |i, _| {
                model.x_lb()[i] + (model.x_ub()[i] - model.x_lb()[i]) * next()
            });
            let u = DVector::from_fn(model.input_dim(), |i, _| {
                model.u_lb()[i] + (model.u_ub()[i] - model.u_lb()[i]) * next()
            });
            let rotated = model.stage_cost(&x, &u) - ss.ell_s_full
                + ss.mu.dot(&(&x - model.step(&x, &u)));
            assert!(rotated >= -1e-8, "rotated cost {rotated} at sampled point");
        }
    }

    #[test]
    fn strong_duality_residual_is_small() {
        // Evaluate the Lagrangian dual at the returned multiplier by
        // minimizing over the box alone; it must meet the primal optimum.
        let (sys, aug, cost, bounds) = two_hour_instance();
        let lifted = sys.lift();
        let model = compile(&lifted, Some(&aug), &cost, &bounds).unwrap();
        let ss = solve_steady_state_model(&model).unwrap();

        let ns = model.state_dim();
        let mu_dim = model.input_dim();
        let nz = ns + mu_dim;
        let mut h = DMatrix::zeros(nz, nz);
        h.view_mut((0, 0), (ns, ns)).copy_from(&model.h_xx());
        h.view_mut((ns, ns), (mu_dim, mu_dim))
            .copy_from(&model.h_uu());
        let hxu = model.h_xu();
        h.view_mut((0, ns), (ns, mu_dim)).copy_from(&hxu);
        h.view_mut((ns, 0), (mu_dim, ns)).copy_from(&hxu.transpose());

        let mut a_eq = DMatrix::zeros(ns, nz);
        a_eq.view_mut((0, 0), (ns, ns))
            .copy_from(&(DMatrix::identity(ns, ns) - model.a()));
        a_eq.view_mut((0, ns), (ns, mu_dim))
            .copy_from(&(-model.b()));

        let mut g = DVector::zeros(nz);
        g.rows_mut(ns, mu_dim).copy_from(model.alpha());
        let g_lagrangian = &g + a_eq.transpose() * &ss.mu;

        let mut lb = DVector::zeros(nz);
        let mut ub = DVector::zeros(nz);
        lb.rows_mut(0, ns).copy_from(model.x_lb());
        ub.rows_mut(0, ns).copy_from(model.x_ub());
        lb.rows_mut(ns, mu_dim).copy_from(model.u_lb());
        ub.rows_mut(ns, mu_dim).copy_from(model.u_ub());

        let box_problem = QpProblem::new(
            h,
            g_lagrangian,
            DMatrix::zeros(0, nz),
            DVector::zeros(0),
            lb,
            ub,
        )
        .unwrap();
        let inner = solve_qp(&box_problem, &SolverSettings::default()).unwrap();
        assert_eq!(inner.status, SolverStatus::Optimal);
        let dual_value = inner.objective - ss.mu.dot(model.c()) + model.cost_constant();
        assert!(
            (dual_value - ss.ell_s_full).abs() <= 1e-6,
            "duality gap {}",
            dual_value - ss.ell_s_full
        );
    }

    #[test]
    fn epsilon_rule_matches_tank_level_bounds() {
        let x_bar = dvector![1.011, 1.095, 0.6, 0.633, 0.807, 0.657];
        let bounds = BoxConstraints::symmetric_state(
            x_bar,
            DVector::zeros(6),
            DVector::from_element(6, 50.0),
        )
        .unwrap();
        let choice = choose_epsilon(0.1, &bounds, 24).unwrap();
        assert!((choice.r - 97.553592).abs() <= 1e-9);
        assert!((choice.epsilon - 0.1 / 97.553592).abs() <= 1e-12);

        // Scalar unit box with R <= 1 falls back to epsilon = gamma.
        let small = BoxConstraints::new(
            dvector![-1.0],
            dvector![1.0],
            dvector![0.0],
            dvector![1.0],
        )
        .unwrap();
        assert_eq!(choose_epsilon(0.5, &small, 1).unwrap().epsilon, 0.5);
    }

    #[test]
    fn rotations_preserve_cost_and_shift_inputs() {
        let (sys, aug, cost, bounds) = two_hour_instance();
        let report = periodic_shift_check(&sys.lift(), Some(&aug), &cost, &bounds).unwrap();
        assert!(report.max_cost_deviation <= 1e-6, "{report:?}");
        assert!(report.max_input_shift_error <= 1e-6, "{report:?}");

        // Constant prices and disturbances: every rotation returns the same
        // problem, so inputs agree without shifting.
        let sys = LinearPeriodicSystem::new(
            dmatrix![0.5],
            dmatrix![1.0],
            dmatrix![1.0],
            2,
            vec![dvector![0.2], dvector![0.2]],
        )
        .unwrap();
        let aug = augment(&sys.lift());
        let cost = StageCostSpec::new(
            vec![dvector![-1.0], dvector![-1.0]],
            dmatrix![0.3],
            dmatrix![0.1],
            0.0,
            0.0,
        )
        .unwrap();
        let report = periodic_shift_check(&sys.lift(), Some(&aug), &cost, &bounds).unwrap();
        assert!(report.max_cost_deviation <= 1e-6);
        assert!(report.max_input_shift_error <= 1e-6);
    }

    #[test]
    fn move_penalty_without_augmentation_is_rejected() {
        let (sys, _, cost, bounds) = two_hour_instance();
        let err = solve_steady_state(&sys.lift(), None, &cost, &bounds).unwrap_err();
        assert!(matches!(
            err,
            SteadyStateError::Model(ModelError::DuPenaltyNeedsAugmentation)
        ));
    }

    #[test]
    fn steady_state_set_members_are_fixed_points_with_optimal_cost() {
        let (sys, aug, cost, bounds) = two_hour_instance();
        let lifted = sys.lift();
        let model = compile(&lifted, Some(&aug), &cost, &bounds).unwrap();
        let ss = solve_steady_state_model(&model).unwrap();
        let set = steady_state_set(&ss, &model);

        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let q = DVector::from_fn(model.state_dim(), |i, _| {
                model.x_lb()[i] + (model.x_ub()[i] - model.x_lb()[i]) * next()
            });
            let (member, _) = set.project(&q).unwrap();
            let residual = (&member - model.step(&member, &ss.u_s)).amax();
            assert!(residual <= 1e-6, "fixed-point residual {residual}");
            let cost_at = model.stage_cost_economic(&member, &ss.u_s);
            assert!((cost_at - ss.ell_s_economic).abs() <= 1e-6);
        }
    }

    fn arb_lemma6_instance() -> impl Strategy<
        Value = (
            LinearPeriodicSystem,
            StageCostSpec,
            BoxConstraints,
        ),
    > {
        (1usize..=2, 1usize..=2, 1usize..=3).prop_flat_map(|(n, m, t)| {
            (
                prop::collection::vec(-0.4f64..0.4, n * n),
                prop::collection::vec(-1.0f64..1.0, n * m),
                prop::collection::vec(-0.2f64..0.2, t),
                prop::collection::vec(0.2f64..1.0, m),
                prop::collection::vec(-0.5f64..0.5, m * t),
                Just((n, m, t)),
            )
                .prop_map(|(av, bv, dv, qdiag, alphas, (n, m, t))| {
                    let sys = LinearPeriodicSystem::new(
                        DMatrix::from_row_slice(n, n, &av),
                        DMatrix::from_row_slice(n, m, &bv),
                        DMatrix::from_element(n, 1, 1.0),
                        t,
                        dv.iter().map(|&d| dvector![d]).collect(),
                    )
                    .unwrap();
                    let cost = StageCostSpec::new(
                        (0..t)
                            .map(|k| DVector::from_row_slice(&alphas[k * m..(k + 1) * m]))
                            .collect(),
                        DMatrix::from_diagonal(&DVector::from_row_slice(&qdiag)),
                        DMatrix::zeros(m, m),
                        0.0,
                        0.0,
                    )
                    .unwrap();
                    let bounds = BoxConstraints::new(
                        DVector::from_element(n, -5.0),
                        DVector::from_element(n, 5.0),
                        DVector::from_element(m, -2.0),
                        DVector::from_element(m, 2.0),
                    )
                    .unwrap();
                    (sys, cost, bounds)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        /// The regularized optimum costs at most gamma more than the true
        /// optimum, for every gamma in the rule's intended range.
        #[test]
        fn epsilon_rule_bounds_the_cost_gap(
            (sys, cost, bounds) in arb_lemma6_instance(),
            gamma_idx in 0usize..3,
        ) {
            let gamma = [0.01, 0.1, 1.0][gamma_idx];
            let lifted = sys.lift();
            let plain = solve_steady_state(&lifted, None, &cost, &bounds).unwrap();
            let choice = choose_epsilon(gamma, &bounds, sys.period).unwrap();
            let modified = solve_steady_state(
                &lifted,
                None,
                &cost.clone().with_epsilon(choice.epsilon),
                &bounds,
            )
            .unwrap();
            let gap = modified.ell_s_economic - plain.ell_s_economic;
            prop_assert!(gap >= -1e-8, "gap {gap}");
            prop_assert!(gap <= gamma + 1e-8, "gap {gap} exceeds gamma {gamma}");
        }
    }
}
