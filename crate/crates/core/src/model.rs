//! Stage-cost specification and the compiled problem data shared by the
//! steady-state and receding-horizon solvers.
//!
//! A [`CompiledModel`] fixes one optimization arena: dynamics `x+ = a x + b u
//! + c`, box bounds, and the stage cost
//!
//! ```text
//! l(x, u) = offset + alpha'u + u'Q u + (M u - G x)' W (M u - G x) + eps x'x
//! ```
//!
//! over lifted (or augmented) vectors, where one stage spans a full period.
//! The `(M u - G x)` term is the within-period input-move sequence: `G`
//! selects the carried previous input from the augmented state, so the cost
//! is a static function of `(x, u)` and the compiled problems stay Markovian.

use crate::dynamics::{AugmentedSystem, LiftedSystem};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {what} is {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} must be symmetric positive semidefinite")]
    NotPsd { what: &'static str },
    #[error("price sequence has {got} entries, expected the period {expected}")]
    PriceLength { expected: usize, got: usize },
    #[error("epsilon must be nonnegative and finite, got {0}")]
    BadEpsilon(f64),
    #[error("bounds must satisfy lb <= ub elementwise ({what} index {index})")]
    InvalidBounds { what: &'static str, index: usize },
    #[error("an input-move penalty (W != 0) requires the augmented system")]
    DuPenaltyNeedsAugmentation,
}

fn check_psd(m: &DMatrix<f64>, what: &'static str) -> Result<(), ModelError> {
    if m.nrows() != m.ncols() {
        return Err(ModelError::NotPsd { what });
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 {
                return Err(ModelError::NotPsd { what });
            }
        }
    }
    // Semidefinite within 1e-10: a tiny diagonal shift must be SPD.
    let shifted = m + DMatrix::identity(n, n) * 1e-10;
    if shifted.cholesky().is_none() {
        return Err(ModelError::NotPsd { what });
    }
    Ok(())
}

/// Per-stage state and input boxes in physical coordinates; the compiler
/// tiles them over a period.
#[derive(Debug, Clone)]
pub struct BoxConstraints {
    pub x_lb: DVector<f64>,
    pub x_ub: DVector<f64>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
}

impl BoxConstraints {
    pub fn new(
        x_lb: DVector<f64>,
        x_ub: DVector<f64>,
        u_lb: DVector<f64>,
        u_ub: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if x_lb.len() != x_ub.len() {
            return Err(ModelError::DimensionMismatch {
                what: "x_ub",
                expected: x_lb.len(),
                got: x_ub.len(),
            });
        }
        if u_lb.len() != u_ub.len() {
            return Err(ModelError::DimensionMismatch {
                what: "u_ub",
                expected: u_lb.len(),
                got: u_ub.len(),
            });
        }
        for i in 0..x_lb.len() {
            if !(x_lb[i] <= x_ub[i]) {
                return Err(ModelError::InvalidBounds { what: "x", index: i });
            }
        }
        for i in 0..u_lb.len() {
            if !(u_lb[i] <= u_ub[i]) {
                return Err(ModelError::InvalidBounds { what: "u", index: i });
            }
        }
        Ok(BoxConstraints {
            x_lb,
            x_ub,
            u_lb,
            u_ub,
        })
    }

    /// Symmetric box `[-x_bar, x_bar] x [u_lb, u_ub]`.
    pub fn symmetric_state(
        x_bar: DVector<f64>,
        u_lb: DVector<f64>,
        u_ub: DVector<f64>,
    ) -> Result<Self, ModelError> {
        Self::new(-&x_bar, x_bar, u_lb, u_ub)
    }
}

/// Periodic stage cost in a general quadratic container:
/// per physical stage k, `offset + alpha_k'u + u'q_u u`, plus the per-period
/// input-move penalty `Du'W Du` and state regularization `eps x'x`.
#[derive(Debug, Clone)]
pub struct StageCostSpec {
    /// One price vector per phase of the period.
    pub alpha_seq: Vec<DVector<f64>>,
    /// Direct input quadratic (m x m, PSD), applied every physical stage.
    pub q_u: DMatrix<f64>,
    /// Input-move weight (m x m, PSD); nonzero W requires augmentation.
    pub w: DMatrix<f64>,
    /// State regularization weight, >= 0.
    pub epsilon: f64,
    /// Constant added to every physical stage cost.
    pub offset: f64,
}

impl StageCostSpec {
    pub fn new(
        alpha_seq: Vec<DVector<f64>>,
        q_u: DMatrix<f64>,
        w: DMatrix<f64>,
        epsilon: f64,
        offset: f64,
    ) -> Result<Self, ModelError> {
        check_psd(&q_u, "q_u")?;
        check_psd(&w, "W")?;
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(ModelError::BadEpsilon(epsilon));
        }
        let m = q_u.nrows();
        for a in &alpha_seq {
            if a.len() != m {
                return Err(ModelError::DimensionMismatch {
                    what: "alpha entry",
                    expected: m,
                    got: a.len(),
                });
            }
        }
        if w.nrows() != m {
            return Err(ModelError::DimensionMismatch {
                what: "W",
                expected: m,
                got: w.nrows(),
            });
        }
        Ok(StageCostSpec {
            alpha_seq,
            q_u,
            w,
            epsilon,
            offset,
        })
    }

    /// Linear-plus-move cost `alpha'u + Du'W Du` (the pump-scheduling form).
    pub fn linear_with_moves(
        alpha_seq: Vec<DVector<f64>>,
        w: DMatrix<f64>,
        epsilon: f64,
    ) -> Result<Self, ModelError> {
        let m = w.nrows();
        Self::new(alpha_seq, DMatrix::zeros(m, m), w, epsilon, 0.0)
    }

    /// Pure input quadratic `u'q_u u + alpha'u`, constant over the period.
    pub fn input_quadratic(
        alpha: DVector<f64>,
        q_u: DMatrix<f64>,
        period: usize,
        epsilon: f64,
        offset: f64,
    ) -> Result<Self, ModelError> {
        let m = q_u.nrows();
        Self::new(
            vec![alpha; period],
            q_u,
            DMatrix::zeros(m, m),
            epsilon,
            offset,
        )
    }

    pub fn has_move_penalty(&self) -> bool {
        self.w.amax() > 0.0
    }

    /// Replaces the state-regularization weight.
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Cyclic rotation: stage k of the result is stage (k + shift) mod T.
    pub fn rotated(&self, shift: usize) -> Self {
        let t = self.alpha_seq.len();
        let alpha_seq = (0..t)
            .map(|k| self.alpha_seq[(k + shift) % t].clone())
            .collect();
        StageCostSpec {
            alpha_seq,
            ..self.clone()
        }
    }
}

/// Input-move operators of the compiled cost: `Du = m_bar u - g_x x`.
#[derive(Debug, Clone)]
struct MovePenalty {
    m_bar: DMatrix<f64>,
    /// Selects the carried input from the model state: `n_bar * v_selector`.
    g_x: DMatrix<f64>,
    w_tilde: DMatrix<f64>,
}

/// One period-lifted (optionally input-augmented) optimization arena.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    /// Constant drift `Bd_tilde * d_tilde` (with a zero row block when
    /// augmented).
    c: DVector<f64>,
    x_lb: DVector<f64>,
    x_ub: DVector<f64>,
    u_lb: DVector<f64>,
    u_ub: DVector<f64>,
    /// Stacked prices over one period.
    alpha: DVector<f64>,
    /// Block-diagonal tiling of q_u.
    q_tilde: DMatrix<f64>,
    moves: Option<MovePenalty>,
    epsilon: f64,
    /// Constant cost per lifted stage (T times the per-stage offset).
    constant: f64,
    n_phys: usize,
    m_phys: usize,
    period: usize,
    augmented: bool,
}

/// Compile a lifted system and cost into one arena. `aug` must be supplied
/// when the cost has an input-move penalty; when supplied, the model state is
/// the augmented one even if W = 0.
pub fn compile(
    lifted: &LiftedSystem,
    aug: Option<&AugmentedSystem>,
    cost: &StageCostSpec,
    bounds: &BoxConstraints,
) -> Result<CompiledModel, ModelError> {
    let (n, m, t) = (lifted.n, lifted.m, lifted.period);
    if cost.alpha_seq.len() != t {
        return Err(ModelError::PriceLength {
            expected: t,
            got: cost.alpha_seq.len(),
        });
    }
    if cost.q_u.nrows() != m {
        return Err(ModelError::DimensionMismatch {
            what: "q_u",
            expected: m,
            got: cost.q_u.nrows(),
        });
    }
    if bounds.x_lb.len() != n {
        return Err(ModelError::DimensionMismatch {
            what: "x bounds",
            expected: n,
            got: bounds.x_lb.len(),
        });
    }
    if bounds.u_lb.len() != m {
        return Err(ModelError::DimensionMismatch {
            what: "u bounds",
            expected: m,
            got: bounds.u_lb.len(),
        });
    }
    if cost.has_move_penalty() && aug.is_none() {
        return Err(ModelError::DuPenaltyNeedsAugmentation);
    }

    let mut alpha = DVector::zeros(m * t);
    for (k, a) in cost.alpha_seq.iter().enumerate() {
        alpha.rows_mut(k * m, m).copy_from(a);
    }
    let q_tilde = DMatrix::identity(t, t).kronecker(&cost.q_u);

    let tile = |v: &DVector<f64>, reps: usize| {
        let mut out = DVector::zeros(v.len() * reps);
        for k in 0..reps {
            out.rows_mut(k * v.len(), v.len()).copy_from(v);
        }
        out
    };
    let u_lb = tile(&bounds.u_lb, t);
    let u_ub = tile(&bounds.u_ub, t);

    let model = match aug {
        Some(aug) => {
            // The carried input v is a past input value; it inherits the
            // input box.
            let mut x_lb = DVector::zeros(n * t + m);
            let mut x_ub = DVector::zeros(n * t + m);
            x_lb.rows_mut(0, n * t).copy_from(&tile(&bounds.x_lb, t));
            x_ub.rows_mut(0, n * t).copy_from(&tile(&bounds.x_ub, t));
            x_lb.rows_mut(n * t, m).copy_from(&bounds.u_lb);
            x_ub.rows_mut(n * t, m).copy_from(&bounds.u_ub);
            let moves = if cost.has_move_penalty() {
                Some(MovePenalty {
                    m_bar: aug.m_bar.clone(),
                    g_x: &aug.n_bar * &aug.v_selector,
                    w_tilde: DMatrix::identity(t, t).kronecker(&cost.w),
                })
            } else {
                None
            };
            CompiledModel {
                a: aug.a_hat.clone(),
                b: aug.b_hat.clone(),
                c: &aug.bd_hat * &aug.d_tilde,
                x_lb,
                x_ub,
                u_lb,
                u_ub,
                alpha,
                q_tilde,
                moves,
                epsilon: cost.epsilon,
                constant: cost.offset * t as f64,
                n_phys: n,
                m_phys: m,
                period: t,
                augmented: true,
            }
        }
        None => CompiledModel {
            a: lifted.a_tilde.clone(),
            b: lifted.b_tilde.clone(),
            c: &lifted.bd_tilde * &lifted.d_tilde,
            x_lb: tile(&bounds.x_lb, t),
            x_ub: tile(&bounds.x_ub, t),
            u_lb,
            u_ub,
            alpha,
            q_tilde,
            moves: None,
            epsilon: cost.epsilon,
            constant: cost.offset * t as f64,
            n_phys: n,
            m_phys: m,
            period: t,
            augmented: false,
        },
    };
    Ok(model)
}

impl CompiledModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_phys(&self) -> usize {
        self.n_phys
    }

    pub fn m_phys(&self) -> usize {
        self.m_phys
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn x_lb(&self) -> &DVector<f64> {
        &self.x_lb
    }

    pub fn x_ub(&self) -> &DVector<f64> {
        &self.x_ub
    }

    pub fn u_lb(&self) -> &DVector<f64> {
        &self.u_lb
    }

    pub fn u_ub(&self) -> &DVector<f64> {
        &self.u_ub
    }

    /// One model step (a full period).
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }

    fn move_term(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match &self.moves {
            Some(mv) => {
                let du = &mv.m_bar * u - &mv.g_x * x;
                (du.transpose() * &mv.w_tilde * &du)[(0, 0)]
            }
            None => 0.0,
        }
    }

    /// Economic stage cost: everything except the eps x'x regularization.
    pub fn stage_cost_economic(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.constant
            + self.alpha.dot(u)
            + (u.transpose() * &self.q_tilde * u)[(0, 0)]
            + self.move_term(x, u)
    }

    /// Full stage cost including the eps x'x term.
    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.stage_cost_economic(x, u) + self.epsilon * x.dot(x)
    }

    pub fn cost_constant(&self) -> f64 {
        self.constant
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Hessian block of the stage cost wrt u (already doubled for the
    /// 1/2 z'Hz convention).
    pub fn h_uu(&self) -> DMatrix<f64> {
        let mut h = 2.0 * &self.q_tilde;
        if let Some(mv) = &self.moves {
            h += 2.0 * mv.m_bar.transpose() * &mv.w_tilde * &mv.m_bar;
        }
        h
    }

    /// Hessian block wrt x.
    pub fn h_xx(&self) -> DMatrix<f64> {
        let ns = self.state_dim();
        let mut h = DMatrix::identity(ns, ns) * (2.0 * self.epsilon);
        if let Some(mv) = &self.moves {
            h += 2.0 * mv.g_x.transpose() * &mv.w_tilde * &mv.g_x;
        }
        h
    }

    /// Cross block (x rows, u columns).
    pub fn h_xu(&self) -> DMatrix<f64> {
        match &self.moves {
            Some(mv) => -2.0 * mv.g_x.transpose() * &mv.w_tilde * &mv.m_bar,
            None => DMatrix::zeros(self.state_dim(), self.input_dim()),
        }
    }

    /// Same arena with the stacked disturbance replaced by a cyclic rotation;
    /// the lifted matrices are time-invariant so only the drift changes.
    pub fn with_rotated_drift(&self, lifted: &LiftedSystem, shift: usize) -> CompiledModel {
        let p = lifted.p;
        let t = self.period;
        let mut d_rot = DVector::zeros(p * t);
        for k in 0..t {
            d_rot
                .rows_mut(k * p, p)
                .copy_from(&lifted.d_tilde.rows(((k + shift) % t) * p, p));
        }
        let mut out = self.clone();
        let nt = self.n_phys * t;
        if self.augmented {
            let mut c = DVector::zeros(self.state_dim());
            c.rows_mut(0, nt).copy_from(&(&lifted.bd_tilde * &d_rot));
            out.c = c;
        } else {
            out.c = &lifted.bd_tilde * &d_rot;
        }
        out
    }

    /// Replaces the stacked prices (used by rotation checks).
    pub fn with_alpha(&self, alpha: DVector<f64>) -> CompiledModel {
        assert_eq!(alpha.len(), self.input_dim());
        let mut out = self.clone();
        out.alpha = alpha;
        out
    }
}
