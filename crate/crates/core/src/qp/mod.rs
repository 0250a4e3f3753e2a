//! Dense convex QP solver used by every optimization layer in this crate.
//!
//! Canonical form:
//!
//! ```text
//!   minimize   0.5 x' H x + g' x
//!   subject to A_eq x = b_eq
//!              lb <= x <= ub
//! ```
//!
//! The solver is an operator-splitting (ADMM) scheme with a direct KKT
//! factorization that is reused across iterations, followed by an active-set
//! polish that re-solves the equality-constrained QP on the detected active
//! set. Equality multipliers `mu_eq` and bound multipliers `mu_bound` are
//! first-class outputs: downstream code builds storage functions from them,
//! so their sign convention is part of the contract:
//!
//! ```text
//!   H x + g + A_eq' mu_eq + mu_bound = 0
//!   mu_bound[i] <= 0 at an active lower bound, >= 0 at an active upper bound
//! ```

mod solver;

pub use solver::QpSolver;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {what} has {got} {unit}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        unit: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("H is not symmetric: |H[{i}][{j}] - H[{j}][{i}]| = {delta:e} exceeds tolerance")]
    NotSymmetric { i: usize, j: usize, delta: f64 },
    #[error("H is not positive semidefinite: factorization failed at pivot {pivot}")]
    NotPositiveSemidefinite { pivot: usize },
    #[error("invalid bounds at index {index}: lb = {lb} > ub = {ub}")]
    InvalidBounds { index: usize, lb: f64, ub: f64 },
    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },
    #[error("fixed-variable index {index} out of range for {n} variables")]
    FixedIndexOutOfRange { index: usize, n: usize },
    #[error("variable {index} fixed more than once")]
    DuplicateFixedIndex { index: usize },
    #[error("KKT factorization failed")]
    KktFactorization,
}

/// Symmetry tolerance for H, relative to its largest entry.
const SYMMETRY_TOL: f64 = 1e-8;

/// Pivot tolerance for the semidefinite factorization check, relative to the
/// largest diagonal entry of H.
const PSD_PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::Unbounded => "unbounded",
            SolverStatus::MaxIterations => "max_iterations",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub eps_prim: f64,
    pub eps_dual: f64,
    pub max_iterations: usize,
    /// Initial penalty on the box rows; equality rows use `rho * rho_eq_scale`.
    pub rho: f64,
    pub rho_eq_scale: f64,
    /// Proximal regularization on the primal iterate.
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    /// Residuals are checked and the penalty rebalanced on this cadence.
    pub adaptive_rho_interval: usize,
    /// Attempt the active-set polish once residuals fall below this level;
    /// a successful polish ends the solve early with sharpened duals.
    pub polish_trigger: f64,
    pub polish: bool,
    /// Primal-stagnation window for infeasibility detection: if the best
    /// primal residual fails to halve over this many iterations while the
    /// dual residual is converged, the problem is declared infeasible.
    pub stagnation_window: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            eps_prim: 1e-8,
            eps_dual: 1e-8,
            max_iterations: 200_000,
            rho: 0.1,
            rho_eq_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho_interval: 25,
            polish_trigger: 1e-5,
            polish: true,
            stagnation_window: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per equality row.
    pub mu_eq: DVector<f64>,
    /// One multiplier per variable bound pair.
    pub mu_bound: DVector<f64>,
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// True when the returned iterate came from a successful active-set polish.
    pub polished: bool,
}

/// A validated QP instance. Dimension and definiteness errors surface here,
/// at construction, never at solve time.
#[derive(Debug, Clone)]
pub struct QpProblem {
    h: DMatrix<f64>,
    g: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::DimensionMismatch {
                what: "H",
                unit: "rows",
                expected: n,
                got: h.nrows(),
            });
        }
        if a_eq.ncols() != n && a_eq.nrows() != 0 {
            return Err(QpError::DimensionMismatch {
                what: "A_eq",
                unit: "columns",
                expected: n,
                got: a_eq.ncols(),
            });
        }
        if b_eq.len() != a_eq.nrows() {
            return Err(QpError::DimensionMismatch {
                what: "b_eq",
                unit: "rows",
                expected: a_eq.nrows(),
                got: b_eq.len(),
            });
        }
        if lb.len() != n {
            return Err(QpError::DimensionMismatch {
                what: "lb",
                unit: "rows",
                expected: n,
                got: lb.len(),
            });
        }
        if ub.len() != n {
            return Err(QpError::DimensionMismatch {
                what: "ub",
                unit: "rows",
                expected: n,
                got: ub.len(),
            });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite { what: "H" });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite { what: "g" });
        }
        if a_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite { what: "A_eq" });
        }
        if b_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite { what: "b_eq" });
        }
        // Bounds may be infinite but not NaN.
        if lb.iter().chain(ub.iter()).any(|v| v.is_nan()) {
            return Err(QpError::NonFinite { what: "bounds" });
        }
        for i in 0..n {
            if lb[i] > ub[i] {
                return Err(QpError::InvalidBounds {
                    index: i,
                    lb: lb[i],
                    ub: ub[i],
                });
            }
        }

        let scale = h.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                let delta = (h[(i, j)] - h[(j, i)]).abs();
                if delta > SYMMETRY_TOL * scale {
                    return Err(QpError::NotSymmetric { i, j, delta });
                }
            }
        }
        // Work with the symmetrized matrix from here on.
        let mut h = h;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
                h[(i, j)] = avg;
                h[(j, i)] = avg;
            }
        }
        check_psd(&h)?;

        Ok(QpProblem {
            h,
            g,
            a_eq,
            b_eq,
            lb,
            ub,
        })
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn n_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }

    pub fn b_eq(&self) -> &DVector<f64> {
        &self.b_eq
    }

    pub fn lb(&self) -> &DVector<f64> {
        &self.lb
    }

    pub fn ub(&self) -> &DVector<f64> {
        &self.ub
    }

    /// Replace the linear cost term. The quadratic part and constraints keep
    /// their cached factorizations valid, so receding-horizon callers update
    /// the problem in place instead of rebuilding it.
    pub fn set_g(&mut self, g: DVector<f64>) -> Result<(), QpError> {
        if g.len() != self.n() {
            return Err(QpError::DimensionMismatch {
                what: "g",
                unit: "rows",
                expected: self.n(),
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite { what: "g" });
        }
        self.g = g;
        Ok(())
    }

    /// Replace the equality right-hand side, keeping the constraint matrix.
    pub fn set_b_eq(&mut self, b_eq: DVector<f64>) -> Result<(), QpError> {
        if b_eq.len() != self.n_eq() {
            return Err(QpError::DimensionMismatch {
                what: "b_eq",
                unit: "rows",
                expected: self.n_eq(),
                got: b_eq.len(),
            });
        }
        if b_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite { what: "b_eq" });
        }
        self.b_eq = b_eq;
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.h * x).dot(x) + self.g.dot(x)
    }
}

/// Semidefinite Cholesky attempt. A negative pivot, or a vanishing pivot with
/// a non-vanishing column below it, disproves positive semidefiniteness.
fn check_psd(h: &DMatrix<f64>) -> Result<(), QpError> {
    let n = h.nrows();
    if n == 0 {
        return Ok(());
    }
    let diag_scale = (0..n).fold(1.0f64, |acc, i| acc.max(h[(i, i)].abs()));
    let tol = PSD_PIVOT_TOL * diag_scale;
    let mut l = h.clone();
    for k in 0..n {
        let mut d = l[(k, k)];
        for j in 0..k {
            d -= l[(k, j)] * l[(k, j)];
        }
        if d < -tol {
            return Err(QpError::NotPositiveSemidefinite { pivot: k });
        }
        if d <= tol {
            // Semidefinite direction: the rest of the column must vanish too.
            for i in (k + 1)..n {
                let mut v = l[(i, k)];
                for j in 0..k {
                    v -= l[(i, j)] * l[(k, j)];
                }
                if v.abs() > tol.max(PSD_PIVOT_TOL) * 1e2 {
                    return Err(QpError::NotPositiveSemidefinite { pivot: k });
                }
            }
            for i in k..n {
                l[(i, k)] = 0.0;
            }
        } else {
            let root = d.sqrt();
            l[(k, k)] = root;
            for i in (k + 1)..n {
                let mut v = l[(i, k)];
                for j in 0..k {
                    v -= l[(i, j)] * l[(k, j)];
                }
                l[(i, k)] = v / root;
            }
        }
    }
    Ok(())
}

/// KKT residuals of a candidate primal-dual triple, for diagnostics and
/// solution audits. `complementarity` is scale-aware: it is divided by
/// `max(1, |x|_inf)`.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub equality: f64,
    pub bounds: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.equality)
            .max(self.bounds)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(
    problem: &QpProblem,
    x: &DVector<f64>,
    mu_eq: &DVector<f64>,
    mu_bound: &DVector<f64>,
) -> KktResiduals {
    let n = problem.n();
    let mut stat = problem.h() * x + problem.g() + mu_bound;
    if problem.n_eq() > 0 {
        stat += problem.a_eq().transpose() * mu_eq;
    }
    let stationarity = stat.amax();

    let equality = if problem.n_eq() > 0 {
        (problem.a_eq() * x - problem.b_eq()).amax()
    } else {
        0.0
    };

    let mut bounds = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..n {
        bounds = bounds
            .max(problem.lb[i] - x[i])
            .max(x[i] - problem.ub[i]);
        let mu = mu_bound[i];
        if mu < 0.0 {
            comp = comp.max((mu * (x[i] - problem.lb[i])).abs());
        } else if mu > 0.0 {
            comp = comp.max((mu * (problem.ub[i] - x[i])).abs());
        }
    }
    KktResiduals {
        stationarity,
        equality,
        bounds: bounds.max(0.0),
        complementarity: comp / x.amax().max(1.0),
    }
}

/// Solve a QP with a fresh solver instance.
pub fn solve_qp(problem: &QpProblem, settings: &SolverSettings) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(settings.clone());
    solver.solve(problem)
}

/// Solve with a subset of variables pinned to fixed values, implemented by
/// appending one equality row per fixed variable. The appended rows'
/// multipliers are returned separately, in the order of `fixed`; `mu_eq` in
/// the solution covers only the original equality rows.
///
/// Fixing a variable outside its own bounds is an infeasible problem, not an
/// error: the result carries `SolverStatus::Infeasible`.
pub fn solve_qp_with_fixed_variables(
    problem: &QpProblem,
    settings: &SolverSettings,
    fixed: &[(usize, f64)],
) -> Result<(QpSolution, Vec<f64>), QpError> {
    let n = problem.n();
    let m = problem.n_eq();
    let mut seen = vec![false; n];
    for &(i, _) in fixed {
        if i >= n {
            return Err(QpError::FixedIndexOutOfRange { index: i, n });
        }
        if seen[i] {
            return Err(QpError::DuplicateFixedIndex { index: i });
        }
        seen[i] = true;
    }
    for &(i, v) in fixed {
        if v < problem.lb[i] || v > problem.ub[i] {
            let mut x = DVector::zeros(n);
            for &(j, w) in fixed {
                x[j] = w;
            }
            let violation = (v - problem.ub[i]).max(problem.lb[i] - v);
            let solution = QpSolution {
                x,
                mu_eq: DVector::zeros(m),
                mu_bound: DVector::zeros(n),
                objective: f64::NAN,
                status: SolverStatus::Infeasible,
                iterations: 0,
                primal_residual: violation,
                dual_residual: f64::NAN,
                polished: false,
            };
            return Ok((solution, vec![0.0; fixed.len()]));
        }
    }

    let mut a_eq = DMatrix::zeros(m + fixed.len(), n);
    a_eq.view_mut((0, 0), (m, n)).copy_from(&problem.a_eq);
    let mut b_eq = DVector::zeros(m + fixed.len());
    b_eq.rows_mut(0, m).copy_from(&problem.b_eq);
    for (row, &(i, v)) in fixed.iter().enumerate() {
        a_eq[(m + row, i)] = 1.0;
        b_eq[m + row] = v;
    }
    let augmented = QpProblem {
        h: problem.h.clone(),
        g: problem.g.clone(),
        a_eq,
        b_eq,
        lb: problem.lb.clone(),
        ub: problem.ub.clone(),
    };
    let mut solver = QpSolver::new(settings.clone());
    let mut solution = solver.solve(&augmented)?;
    let fixed_multipliers = (0..fixed.len()).map(|k| solution.mu_eq[m + k]).collect();
    solution.mu_eq = solution.mu_eq.rows(0, m).into_owned();
    Ok((solution, fixed_multipliers))
}
