//! Periodically time-varying linear dynamics and the two model
//! transformations everything downstream runs on:
//!
//! * **period lifting**: a system with period-T disturbances and prices is
//!   rewritten so one lifted step advances a full period. The lifted model is
//!   time-invariant, which is what lets a steady *state* stand in for a
//!   steady trajectory.
//! * **input-move augmentation**: the previous period's final input is
//!   carried as extra state `v`, so input-rate penalties that straddle the
//!   period boundary become a static function of the augmented state.
//!
//! Block layout of the lifted state: `x_tilde(t) = [x(tT-T+1); ...; x(tT)]`,
//! so the *last* block of the lifted state is the current physical state and
//! the earlier blocks are the just-traversed period. Only the last block
//! enters the lifted dynamics; the rest are recorded output.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: {what} is {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("period must be at least 1")]
    EmptyPeriod,
    #[error("disturbance sequence has {got} entries, expected the period {expected}")]
    DisturbanceLength { expected: usize, got: usize },
    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },
}

/// x(t+1) = A x(t) + B_u u(t) + B_d d(t mod T).
#[derive(Debug, Clone)]
pub struct LinearPeriodicSystem {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub period: usize,
    /// One disturbance vector per phase of the period.
    pub d_seq: Vec<DVector<f64>>,
}

impl LinearPeriodicSystem {
    pub fn new(
        a: DMatrix<f64>,
        b_u: DMatrix<f64>,
        b_d: DMatrix<f64>,
        period: usize,
        d_seq: Vec<DVector<f64>>,
    ) -> Result<Self, DynamicsError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(DynamicsError::DimensionMismatch {
                what: "A columns",
                expected: n,
                got: a.ncols(),
            });
        }
        if b_u.nrows() != n {
            return Err(DynamicsError::DimensionMismatch {
                what: "B_u rows",
                expected: n,
                got: b_u.nrows(),
            });
        }
        if b_d.nrows() != n {
            return Err(DynamicsError::DimensionMismatch {
                what: "B_d rows",
                expected: n,
                got: b_d.nrows(),
            });
        }
        if period == 0 {
            return Err(DynamicsError::EmptyPeriod);
        }
        if d_seq.len() != period {
            return Err(DynamicsError::DisturbanceLength {
                expected: period,
                got: d_seq.len(),
            });
        }
        let p = b_d.ncols();
        for d in &d_seq {
            if d.len() != p {
                return Err(DynamicsError::DimensionMismatch {
                    what: "disturbance entry",
                    expected: p,
                    got: d.len(),
                });
            }
        }
        for (mat, what) in [(&a, "A"), (&b_u, "B_u"), (&b_d, "B_d")] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(DynamicsError::NonFinite { what });
            }
        }
        if d_seq.iter().flat_map(|d| d.iter()).any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite { what: "d_seq" });
        }
        Ok(LinearPeriodicSystem {
            a,
            b_u,
            b_d,
            period,
            d_seq,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_u.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.b_d.ncols()
    }

    /// One step at absolute time `t`; the disturbance slot is `t mod T`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        t: usize,
    ) -> Result<DVector<f64>, DynamicsError> {
        if x.len() != self.state_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "x",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "u",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        let d = &self.d_seq[t % self.period];
        Ok(&self.a * x + &self.b_u * u + &self.b_d * d)
    }

    /// Stepwise simulation from `x0` starting at absolute time `t0`.
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        t0: usize,
    ) -> Result<Trajectory, DynamicsError> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for (k, u) in inputs.iter().enumerate() {
            let next = self.step(states.last().unwrap(), u, t0 + k)?;
            states.push(next);
        }
        Ok(Trajectory {
            states,
            inputs: inputs.to_vec(),
            t0,
        })
    }

    /// Period lifting. The lifted system is time-invariant; its state stacks
    /// the T physical states of one period, its input the T physical inputs.
    pub fn lift(&self) -> LiftedSystem {
        let n = self.state_dim();
        let m = self.input_dim();
        let p = self.disturbance_dim();
        let t = self.period;

        // Powers A^0 .. A^T.
        let mut powers = Vec::with_capacity(t + 1);
        powers.push(DMatrix::identity(n, n));
        for i in 0..t {
            let next = &powers[i] * &self.a;
            powers.push(next);
        }

        // Nonzero blocks of A_tilde live only in the last block column:
        // block (i, T) = A^(i+1) with zero-based block rows.
        let mut a_tilde = DMatrix::zeros(n * t, n * t);
        for r in 0..t {
            a_tilde
                .view_mut((r * n, (t - 1) * n), (n, n))
                .copy_from(&powers[r + 1]);
        }

        // Block lower-triangular input and disturbance maps:
        // block (r, c) = A^(r-c) B for c <= r.
        let mut b_tilde = DMatrix::zeros(n * t, m * t);
        let mut bd_tilde = DMatrix::zeros(n * t, p * t);
        for r in 0..t {
            for c in 0..=r {
                let ab = &powers[r - c] * &self.b_u;
                b_tilde.view_mut((r * n, c * m), (n, m)).copy_from(&ab);
                let abd = &powers[r - c] * &self.b_d;
                bd_tilde.view_mut((r * n, c * p), (n, p)).copy_from(&abd);
            }
        }

        let mut d_tilde = DVector::zeros(p * t);
        for (k, d) in self.d_seq.iter().enumerate() {
            d_tilde.rows_mut(k * p, p).copy_from(d);
        }

        LiftedSystem {
            a_tilde,
            b_tilde,
            bd_tilde,
            d_tilde,
            n,
            m,
            p,
            period: t,
        }
    }
}

/// Time-invariant period-lifted model.
#[derive(Debug, Clone)]
pub struct LiftedSystem {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub bd_tilde: DMatrix<f64>,
    /// Stacked periodic disturbance, constant across lifted steps.
    pub d_tilde: DVector<f64>,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub period: usize,
}

impl LiftedSystem {
    pub fn state_dim(&self) -> usize {
        self.n * self.period
    }

    pub fn input_dim(&self) -> usize {
        self.m * self.period
    }

    /// Lifted state whose last block is the physical state `x0`. The other
    /// blocks multiply zero columns of `a_tilde` and are free bookkeeping;
    /// they are filled with copies of `x0`.
    pub fn lifted_from_physical(&self, x0: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        if x0.len() != self.n {
            return Err(DynamicsError::DimensionMismatch {
                what: "x0",
                expected: self.n,
                got: x0.len(),
            });
        }
        let mut x = DVector::zeros(self.state_dim());
        for k in 0..self.period {
            x.rows_mut(k * self.n, self.n).copy_from(x0);
        }
        Ok(x)
    }

    /// Current physical state: the last block of the lifted state.
    pub fn physical_state(&self, x_tilde: &DVector<f64>) -> DVector<f64> {
        x_tilde
            .rows((self.period - 1) * self.n, self.n)
            .into_owned()
    }

    pub fn step_lifted(
        &self,
        x_tilde: &DVector<f64>,
        u_tilde: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        if x_tilde.len() != self.state_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "x_tilde",
                expected: self.state_dim(),
                got: x_tilde.len(),
            });
        }
        if u_tilde.len() != self.input_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "u_tilde",
                expected: self.input_dim(),
                got: u_tilde.len(),
            });
        }
        Ok(&self.a_tilde * x_tilde + &self.b_tilde * u_tilde + &self.bd_tilde * &self.d_tilde)
    }
}

/// Input-move augmentation of a lifted system: state `x_hat = [x_tilde; v]`
/// where `v` is the final input of the previous period. The difference
/// operator `m_bar u_tilde - n_bar v` yields all T within-period input moves,
/// including the one across the period boundary.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub bd_hat: DMatrix<f64>,
    pub d_tilde: DVector<f64>,
    /// mT x mT difference operator: identity diagonal, -I subdiagonal.
    pub m_bar: DMatrix<f64>,
    /// mT x m injection of the carried input into the first move slot.
    pub n_bar: DMatrix<f64>,
    /// m x mT selector of the last input block of a period.
    pub e: DMatrix<f64>,
    /// m x (nT + m) selector of the v block from the augmented state.
    pub v_selector: DMatrix<f64>,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub period: usize,
}

/// Build the augmented model from a lifted one.
pub fn augment(lifted: &LiftedSystem) -> AugmentedSystem {
    let (n, m, p, t) = (lifted.n, lifted.m, lifted.p, lifted.period);
    let nt = n * t;
    let mt = m * t;

    let mut m_bar = DMatrix::identity(mt, mt);
    for blk in 1..t {
        for i in 0..m {
            m_bar[(blk * m + i, (blk - 1) * m + i)] = -1.0;
        }
    }
    let mut n_bar = DMatrix::zeros(mt, m);
    for i in 0..m {
        n_bar[(i, i)] = 1.0;
    }
    let mut e = DMatrix::zeros(m, mt);
    for i in 0..m {
        e[(i, (t - 1) * m + i)] = 1.0;
    }
    let mut v_selector = DMatrix::zeros(m, nt + m);
    for i in 0..m {
        v_selector[(i, nt + i)] = 1.0;
    }

    let mut a_hat = DMatrix::zeros(nt + m, nt + m);
    a_hat.view_mut((0, 0), (nt, nt)).copy_from(&lifted.a_tilde);
    let mut b_hat = DMatrix::zeros(nt + m, mt);
    b_hat.view_mut((0, 0), (nt, mt)).copy_from(&lifted.b_tilde);
    b_hat.view_mut((nt, 0), (m, mt)).copy_from(&e);
    let mut bd_hat = DMatrix::zeros(nt + m, p * t);
    bd_hat
        .view_mut((0, 0), (nt, p * t))
        .copy_from(&lifted.bd_tilde);

    AugmentedSystem {
        a_hat,
        b_hat,
        bd_hat,
        d_tilde: lifted.d_tilde.clone(),
        m_bar,
        n_bar,
        e,
        v_selector,
        n,
        m,
        p,
        period: t,
    }
}

impl AugmentedSystem {
    pub fn state_dim(&self) -> usize {
        self.n * self.period + self.m
    }

    pub fn input_dim(&self) -> usize {
        self.m * self.period
    }

    pub fn augment_state(
        &self,
        x_tilde: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        let nt = self.n * self.period;
        if x_tilde.len() != nt {
            return Err(DynamicsError::DimensionMismatch {
                what: "x_tilde",
                expected: nt,
                got: x_tilde.len(),
            });
        }
        if v.len() != self.m {
            return Err(DynamicsError::DimensionMismatch {
                what: "v",
                expected: self.m,
                got: v.len(),
            });
        }
        let mut x = DVector::zeros(nt + self.m);
        x.rows_mut(0, nt).copy_from(x_tilde);
        x.rows_mut(nt, self.m).copy_from(v);
        Ok(x)
    }

    /// Split an augmented state into its lifted part and carried input.
    pub fn split_state(&self, x_hat: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let nt = self.n * self.period;
        (
            x_hat.rows(0, nt).into_owned(),
            x_hat.rows(nt, self.m).into_owned(),
        )
    }

    pub fn step_aug(
        &self,
        x_hat: &DVector<f64>,
        u_tilde: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        if x_hat.len() != self.state_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "x_hat",
                expected: self.state_dim(),
                got: x_hat.len(),
            });
        }
        if u_tilde.len() != self.input_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "u_tilde",
                expected: self.input_dim(),
                got: u_tilde.len(),
            });
        }
        Ok(&self.a_hat * x_hat + &self.b_hat * u_tilde + &self.bd_hat * &self.d_tilde)
    }

    /// All T input moves of a period: `m_bar u_tilde - n_bar v`, where `v`
    /// is the final input of the previous period.
    pub fn input_moves(
        &self,
        u_tilde: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        if u_tilde.len() != self.input_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "u_tilde",
                expected: self.input_dim(),
                got: u_tilde.len(),
            });
        }
        if v.len() != self.m {
            return Err(DynamicsError::DimensionMismatch {
                what: "v",
                expected: self.m,
                got: v.len(),
            });
        }
        Ok(&self.m_bar * u_tilde - &self.n_bar * v)
    }
}

/// A simulated state/input record; one more state than inputs.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub t0: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
