//! Operator-splitting iteration, reusable KKT factorization, and the
//! active-set polish.
//!
//! The splitting introduces slack copies of the equality rows and of the
//! variables themselves, so a single quasidefinite KKT matrix
//!
//! ```text
//!   [ H + (sigma + rho_box) I   A_eq' ]
//!   [ A_eq                      -I / rho_eq ]
//! ```
//!
//! is factored once and reused every iteration; the box rows are eliminated
//! analytically. The factorization survives across solves as long as the
//! problem structure (H, A_eq, bounds) is unchanged, which is what makes
//! receding-horizon resolves cheap.

use super::{QpError, QpProblem, QpSolution, SolverSettings, SolverStatus};
use nalgebra::{DMatrix, DVector};

/// Regularization for the polish KKT system; two iterative-refinement passes
/// against the unregularized system follow, so the bias it introduces is far
/// below solver tolerances.
const POLISH_REG: f64 = 1e-9;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// Iterate magnitude that is treated as divergence to an unbounded ray.
const DIVERGENCE_LIMIT: f64 = 1e12;
/// Penalty rebalancing threshold: rho changes only when the rebalanced value
/// differs by more than this factor, to keep refactorizations rare.
const RHO_UPDATE_FACTOR: f64 = 5.0;

#[derive(Debug)]
struct KktCache {
    h: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    rho_box: f64,
    rho_eq: f64,
    sigma: f64,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl KktCache {
    fn matches_structure(&self, prob: &QpProblem) -> bool {
        self.h == *prob.h() && self.a_eq == *prob.a_eq()
    }
}

/// A solver instance owns its mutable workspace (iterates, factorization
/// cache, warm-start slots). Instances are single-threaded; run distinct
/// instances on distinct threads.
#[derive(Debug)]
pub struct QpSolver {
    settings: SolverSettings,
    cache: Option<KktCache>,
    warm_x: Option<DVector<f64>>,
    warm_y_eq: Option<DVector<f64>>,
    warm_y_box: Option<DVector<f64>>,
}

impl QpSolver {
    pub fn new(settings: SolverSettings) -> Self {
        QpSolver {
            settings,
            cache: None,
            warm_x: None,
            warm_y_eq: None,
            warm_y_box: None,
        }
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    /// Seed the next solve. Vectors with mismatched dimensions are ignored
    /// rather than rejected; a warm start is an optimization, not a contract.
    pub fn warm_start(
        &mut self,
        x: Option<DVector<f64>>,
        y_eq: Option<DVector<f64>>,
        y_box: Option<DVector<f64>>,
    ) {
        self.warm_x = x;
        self.warm_y_eq = y_eq;
        self.warm_y_box = y_box;
    }

    fn ensure_factorization(
        &mut self,
        prob: &QpProblem,
        rho_box: f64,
        rho_eq: f64,
    ) -> Result<(), QpError> {
        if let Some(c) = &self.cache {
            if c.rho_box == rho_box
                && c.rho_eq == rho_eq
                && c.sigma == self.settings.sigma
                && c.matches_structure(prob)
            {
                return Ok(());
            }
        }
        let n = prob.n();
        let m = prob.n_eq();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(prob.h());
        for i in 0..n {
            k[(i, i)] += self.settings.sigma + rho_box;
        }
        if m > 0 {
            k.view_mut((0, n), (n, m))
                .copy_from(&prob.a_eq().transpose());
            k.view_mut((n, 0), (m, n)).copy_from(prob.a_eq());
            for j in 0..m {
                k[(n + j, n + j)] = -1.0 / rho_eq;
            }
        }
        let lu = k.lu();
        self.cache = Some(KktCache {
            h: prob.h().clone(),
            a_eq: prob.a_eq().clone(),
            rho_box,
            rho_eq,
            sigma: self.settings.sigma,
            lu,
        });
        Ok(())
    }

    pub fn solve(&mut self, prob: &QpProblem) -> Result<QpSolution, QpError> {
        let n = prob.n();
        let m = prob.n_eq();
        let s = self.settings.clone();
        let lb = prob.lb();
        let ub = prob.ub();
        let b = prob.b_eq();

        // Reuse the penalty a structurally identical previous solve adapted to.
        let mut rho_box = match &self.cache {
            Some(c) if c.matches_structure(prob) => c.rho_box,
            _ => s.rho,
        };
        let mut rho_eq = rho_box * s.rho_eq_scale;
        self.ensure_factorization(prob, rho_box, rho_eq)?;

        let mut x = match self.warm_x.take() {
            Some(v) if v.len() == n => v,
            _ => DVector::zeros(n),
        };
        for i in 0..n {
            x[i] = x[i].clamp(lb[i], ub[i]);
            if !x[i].is_finite() {
                x[i] = 0.0;
            }
        }
        let mut z = x.clone();
        let mut y_box = match self.warm_y_box.take() {
            Some(v) if v.len() == n => v,
            _ => DVector::zeros(n),
        };
        let mut y_eq = match self.warm_y_eq.take() {
            Some(v) if v.len() == m => v,
            _ => DVector::zeros(m),
        };

        let mut rhs = DVector::zeros(n + m);
        let mut stat = DVector::zeros(n);
        let mut ax = DVector::zeros(m);
        let mut x_prev_check = x.clone();

        let mut iterations = 0usize;
        let mut last_polish_sig: Option<Vec<u8>> = None;
        // Primal-stagnation window for infeasibility detection.
        let mut window_start = 0usize;
        let mut window_best = f64::INFINITY;
        let mut prev_window_best: Option<f64> = None;

        while iterations < s.max_iterations {
            iterations += 1;

            for i in 0..n {
                rhs[i] = s.sigma * x[i] - prob.g()[i] + rho_box * z[i] - y_box[i];
            }
            for j in 0..m {
                rhs[n + j] = b[j] - y_eq[j] / rho_eq;
            }
            let cache = self.cache.as_ref().expect("factorization present");
            if !cache.lu.solve_mut(&mut rhs) {
                return Err(QpError::KktFactorization);
            }

            for i in 0..n {
                let xt = rhs[i];
                let relaxed = s.alpha * xt + (1.0 - s.alpha) * z[i];
                let x_new = s.alpha * xt + (1.0 - s.alpha) * x[i];
                let z_new = (relaxed + y_box[i] / rho_box).clamp(lb[i], ub[i]);
                y_box[i] += rho_box * (relaxed - z_new);
                x[i] = x_new;
                z[i] = z_new;
            }
            for j in 0..m {
                let nu = rhs[n + j];
                y_eq[j] += s.alpha * (nu - y_eq[j]);
            }

            if iterations % s.adaptive_rho_interval != 0 && iterations < s.max_iterations {
                continue;
            }

            // Residuals. stat = H x + g + A_eq' y_eq + y_box.
            stat.gemv(1.0, prob.h(), &x, 0.0);
            let hx_norm = stat.amax();
            stat += prob.g();
            if m > 0 {
                stat.gemv_tr(1.0, prob.a_eq(), &y_eq, 1.0);
            }
            stat += &y_box;
            let r_dual = stat.amax();

            let mut r_box = 0.0f64;
            for i in 0..n {
                r_box = r_box.max((x[i] - z[i]).abs());
            }
            let mut r_eq = 0.0f64;
            let mut ax_norm = 0.0f64;
            if m > 0 {
                ax.gemv(1.0, prob.a_eq(), &x, 0.0);
                ax_norm = ax.amax();
                for j in 0..m {
                    r_eq = r_eq.max((ax[j] - b[j]).abs());
                }
            }
            let r_prim = r_box.max(r_eq);

            let drift = &x - &x_prev_check;
            x_prev_check.copy_from(&x);
            if x.amax() > DIVERGENCE_LIMIT || unbounded_ray(prob, &drift) {
                return Ok(self.finish(
                    prob,
                    x,
                    y_eq,
                    y_box,
                    SolverStatus::Unbounded,
                    iterations,
                    r_prim,
                    r_dual,
                ));
            }

            let converged = r_prim <= s.eps_prim && r_dual <= s.eps_dual;
            if converged || (s.polish && r_prim <= s.polish_trigger && r_dual <= s.polish_trigger)
            {
                let sig = activity_signature(&z, lb, ub, n);
                let attempt = s.polish
                    && (converged || last_polish_sig.as_deref() != Some(sig.as_slice()));
                if attempt {
                    if let Some(sol) = self.polish(prob, &x, &sig, iterations) {
                        return Ok(sol);
                    }
                    last_polish_sig = Some(sig);
                }
                if converged {
                    return Ok(self.finish(
                        prob,
                        x,
                        y_eq,
                        y_box,
                        SolverStatus::Optimal,
                        iterations,
                        r_prim,
                        r_dual,
                    ));
                }
            }

            // Infeasibility: the best primal residual failed to halve over a
            // full window while the dual side is converged.
            window_best = window_best.min(r_prim);
            if iterations - window_start >= s.stagnation_window {
                if let Some(prev) = prev_window_best {
                    if window_best > 0.5 * prev && r_prim > s.eps_prim && r_dual <= s.eps_dual {
                        return Ok(self.finish(
                            prob,
                            x,
                            y_eq,
                            y_box,
                            SolverStatus::Infeasible,
                            iterations,
                            r_prim,
                            r_dual,
                        ));
                    }
                }
                prev_window_best = Some(window_best);
                window_best = f64::INFINITY;
                window_start = iterations;
            }

            // Penalty rebalancing on scaled residuals.
            let prim_scale = ax_norm.max(x.amax()).max(z.amax()).max(1e-12);
            let dual_scale = hx_norm
                .max(prob.g().amax())
                .max(y_box.amax())
                .max(1e-12);
            let ratio = (r_prim / prim_scale) / (r_dual / dual_scale).max(1e-16);
            let rho_new = (rho_box * ratio.sqrt()).clamp(RHO_MIN, RHO_MAX);
            if rho_new > rho_box * RHO_UPDATE_FACTOR || rho_new < rho_box / RHO_UPDATE_FACTOR {
                rho_box = rho_new;
                rho_eq = rho_box * s.rho_eq_scale;
                self.ensure_factorization(prob, rho_box, rho_eq)?;
                // Residual scales shift with the penalty; restart the
                // stagnation bookkeeping.
                window_start = iterations;
                window_best = f64::INFINITY;
                prev_window_best = None;
            }
        }

        // Final residuals for the max-iterations report.
        stat.gemv(1.0, prob.h(), &x, 0.0);
        stat += prob.g();
        if m > 0 {
            stat.gemv_tr(1.0, prob.a_eq(), &y_eq, 1.0);
        }
        stat += &y_box;
        let r_dual = stat.amax();
        let mut r_prim = 0.0f64;
        for i in 0..n {
            r_prim = r_prim.max((x[i] - z[i]).abs());
        }
        if m > 0 {
            ax.gemv(1.0, prob.a_eq(), &x, 0.0);
            for j in 0..m {
                r_prim = r_prim.max((ax[j] - b[j]).abs());
            }
        }
        Ok(self.finish(
            prob,
            x,
            y_eq,
            y_box,
            SolverStatus::MaxIterations,
            iterations,
            r_prim,
            r_dual,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        prob: &QpProblem,
        x: DVector<f64>,
        mu_eq: DVector<f64>,
        mu_bound: DVector<f64>,
        status: SolverStatus,
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
    ) -> QpSolution {
        let objective = prob.objective(&x);
        QpSolution {
            x,
            mu_eq,
            mu_bound,
            objective,
            status,
            iterations,
            primal_residual,
            dual_residual,
            polished: false,
        }
    }

    /// Re-solve the equality-constrained QP on the detected active set.
    /// Active variables are eliminated at their bound values, so their
    /// multipliers can be recovered exactly from stationarity. Returns None
    /// when the polished candidate fails feasibility, stationarity, or
    /// multiplier-sign verification.
    fn polish(
        &self,
        prob: &QpProblem,
        x_admm: &DVector<f64>,
        sig: &[u8],
        iterations: usize,
    ) -> Option<QpSolution> {
        let n = prob.n();
        let m = prob.n_eq();
        let s = &self.settings;
        let lb = prob.lb();
        let ub = prob.ub();

        let mut free_idx = Vec::new();
        let mut act_idx = Vec::new();
        let mut x_act = DVector::zeros(n);
        for i in 0..n {
            match sig[i] {
                0 => free_idx.push(i),
                1 => {
                    act_idx.push(i);
                    x_act[i] = lb[i];
                }
                2 => {
                    act_idx.push(i);
                    x_act[i] = ub[i];
                }
                _ => {
                    act_idx.push(i);
                    x_act[i] = lb[i];
                }
            }
        }
        let nf = free_idx.len();

        // Submatrices on the free set.
        let mut h_ff = DMatrix::zeros(nf, nf);
        for (p, &i) in free_idx.iter().enumerate() {
            for (q, &j) in free_idx.iter().enumerate() {
                h_ff[(p, q)] = prob.h()[(i, j)];
            }
        }
        let mut a_f = DMatrix::zeros(m, nf);
        for (q, &j) in free_idx.iter().enumerate() {
            for r in 0..m {
                a_f[(r, q)] = prob.a_eq()[(r, j)];
            }
        }

        // rhs1 = -g_F - (H x_act)_F, rhs2 = b - A_eq x_act.
        let hxa = prob.h() * &x_act;
        let mut rhs = DVector::zeros(nf + m);
        for (p, &i) in free_idx.iter().enumerate() {
            rhs[p] = -prob.g()[i] - hxa[i];
        }
        if m > 0 {
            let axa = prob.a_eq() * &x_act;
            for r in 0..m {
                rhs[nf + r] = prob.b_eq()[r] - axa[r];
            }
        }

        let mut k = DMatrix::zeros(nf + m, nf + m);
        k.view_mut((0, 0), (nf, nf)).copy_from(&h_ff);
        for p in 0..nf {
            k[(p, p)] += POLISH_REG;
        }
        if m > 0 {
            k.view_mut((0, nf), (nf, m)).copy_from(&a_f.transpose());
            k.view_mut((nf, 0), (m, nf)).copy_from(&a_f);
            for r in 0..m {
                k[(nf + r, nf + r)] = -POLISH_REG;
            }
        }
        let mut sol = rhs.clone();
        if nf + m > 0 {
            let lu = k.lu();
            if !lu.solve_mut(&mut sol) {
                return None;
            }
            // Refinement against the unregularized KKT system.
            for _ in 0..2 {
                let xf = sol.rows(0, nf).into_owned();
                let nu = sol.rows(nf, m).into_owned();
                let mut resid = rhs.clone();
                let top = &h_ff * &xf + a_f.transpose() * &nu;
                for p in 0..nf {
                    resid[p] -= top[p];
                }
                if m > 0 {
                    let mid = &a_f * &xf;
                    for r in 0..m {
                        resid[nf + r] -= mid[r];
                    }
                }
                if !lu.solve_mut(&mut resid) {
                    return None;
                }
                sol += resid;
            }
        }

        let mut x = x_act;
        for (p, &i) in free_idx.iter().enumerate() {
            x[i] = sol[p];
        }
        let mu_eq = sol.rows(nf, m).into_owned();
        if x.iter().any(|v| !v.is_finite()) || mu_eq.iter().any(|v| !v.is_finite()) {
            return None;
        }

        // Full stationarity vector; active bound multipliers absorb it.
        let mut stat = prob.h() * &x + prob.g();
        if m > 0 {
            stat.gemv_tr(1.0, prob.a_eq(), &mu_eq, 1.0);
        }
        let mut mu_bound = DVector::zeros(n);
        for &i in &act_idx {
            mu_bound[i] = -stat[i];
        }

        // Verification.
        let mut r_dual = 0.0f64;
        for &i in &free_idx {
            r_dual = r_dual.max(stat[i].abs());
        }
        if r_dual > s.eps_dual {
            return None;
        }
        let mut r_prim = 0.0f64;
        for i in 0..n {
            r_prim = r_prim.max(lb[i] - x[i]).max(x[i] - ub[i]);
        }
        r_prim = r_prim.max(0.0);
        if m > 0 {
            let ax = prob.a_eq() * &x;
            for r in 0..m {
                r_prim = r_prim.max((ax[r] - prob.b_eq()[r]).abs());
            }
        }
        if r_prim > s.eps_prim {
            return None;
        }
        // On degenerate faces (linear costs, weakly active bounds) pinned
        // multipliers are not unique and this check declines the polish; the
        // main loop then finishes the grind instead of accepting an
        // uncertified active set.
        for i in 0..n {
            match sig[i] {
                1 if mu_bound[i] > s.eps_dual => return None,
                2 if mu_bound[i] < -s.eps_dual => return None,
                _ => {}
            }
        }
        // Guard against a polish that wandered far from the converged iterate
        // along a degenerate direction.
        if (&x - x_admm).amax() > 1e6 {
            return None;
        }

        Some(QpSolution {
            objective: prob.objective(&x),
            x,
            mu_eq,
            mu_bound,
            status: SolverStatus::Optimal,
            iterations,
            primal_residual: r_prim,
            dual_residual: r_dual,
            polished: true,
        })
    }
}

/// Dual-infeasibility certificate: the iterate drift is a feasible descent
/// ray the quadratic term and every constraint are blind to. This is what
/// unboundedness looks like to the splitting iteration long before the
/// iterate norm diverges.
fn unbounded_ray(prob: &QpProblem, drift: &DVector<f64>) -> bool {
    let dn = drift.amax();
    if dn <= 1e-9 {
        return false;
    }
    let d = drift / dn;
    if prob.g().dot(&d) >= -1e-8 * prob.g().amax().max(1.0) {
        return false;
    }
    let h_scale = prob.h().amax().max(1.0);
    if (prob.h() * &d).amax() > 1e-8 * h_scale {
        return false;
    }
    if prob.n_eq() > 0 {
        let a_scale = prob.a_eq().amax().max(1.0);
        if (prob.a_eq() * &d).amax() > 1e-8 * a_scale {
            return false;
        }
    }
    for i in 0..prob.n() {
        if prob.ub()[i].is_finite() && d[i] > 1e-8 {
            return false;
        }
        if prob.lb()[i].is_finite() && d[i] < -1e-8 {
            return false;
        }
    }
    true
}

/// Active-set signature from the bound duals. Inactive box rows carry an
/// exactly zero multiplier after any interior projection step, so the sign
/// of `y` is the activity signal: 0 free, 1 lower, 2 upper, 3 pinned.
/// Classifies by where the projected iterate sits: the clamp writes the
/// bound value exactly, so equality is the activity test. Multiplier signs
/// are unreliable near weakly active bounds and are left to the polish
/// verification.
fn activity_signature(z: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>, n: usize) -> Vec<u8> {
    let mut sig = vec![0u8; n];
    for i in 0..n {
        sig[i] = if lb[i] == ub[i] {
            3
        } else if z[i] == lb[i] {
            1
        } else if z[i] == ub[i] {
            2
        } else {
            0
        };
    }
    sig
}
