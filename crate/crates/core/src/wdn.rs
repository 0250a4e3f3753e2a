//! Six-tank water-network benchmark.
//!
//! Tanks are integrator states (levels, metres around mid-tank), pumps are
//! inputs (flows), consumer demands are periodic disturbances. Pump 1
//! sources tank A; pumps 2-4 move water from A to B, C, D; pump 5 from D
//! to E; pump 6 from E to F. Every nonzero dynamics entry is `dt / S_i`
//! for the row's tank area, so levels integrate net volume flow.
//!
//! The stage cost is a time-of-use electricity price on total pumped flow
//! plus a quadratic penalty on pump-flow changes. Demand and tariff
//! profiles are synthesized (a diurnal bump with mean exactly one, and a
//! two-level peak/off-peak price); magnitudes are declared defaults,
//! overridable, not measurements.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{augment, AugmentedSystem, DynamicsError, LiftedSystem, LinearPeriodicSystem};
use crate::model::{BoxConstraints, ModelError, StageCostSpec};

pub const N_TANKS: usize = 6;
pub const N_PUMPS: usize = 6;
pub const N_DEMANDS: usize = 10;
pub const PERIOD_HOURS: usize = 24;

/// Which demand drains which tank: demands 1-3 on A, 4 on B, 5 on C,
/// 6-8 on D, 9 on E, 10 on F.
const DEMAND_TANK: [usize; N_DEMANDS] = [0, 0, 0, 1, 2, 3, 3, 3, 4, 5];

#[derive(Debug, Error)]
pub enum WdnError {
    #[error("{field} must have {expected} entries, got {got}")]
    WrongLength {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tank area {index} must be positive, got {value}")]
    NonPositiveArea { index: usize, value: f64 },
    #[error("demand base {index} must be nonnegative, got {value}")]
    NegativeDemand { index: usize, value: f64 },
    #[error("demand amplitude must lie in [0, 1), got {value}")]
    BadAmplitude { value: f64 },
    #[error("tariff levels must be positive, got ({off_peak}, {peak})")]
    BadTariff { off_peak: f64, peak: f64 },
    #[error("pump capacity must be positive, got {value}")]
    BadCapacity { value: f64 },
    #[error("sampling interval must be positive, got {value}")]
    BadInterval { value: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Tunable knobs; defaults reproduce the checked-in benchmark scenario.
#[derive(Debug, Clone)]
pub struct WdnConfig {
    /// Tank areas in square metres. The source material defers these to an
    /// external repository; the defaults are placeholders.
    pub tank_areas: Vec<f64>,
    pub dt_hours: f64,
    /// Average demand per consumer in cubic metres per hour.
    pub demand_base: Vec<f64>,
    /// Relative amplitude of the diurnal demand bump.
    pub demand_amplitude: f64,
    /// Per-hour random jitter on the multiplier; zero keeps the profile a
    /// pure sinusoid.
    pub demand_jitter: f64,
    pub profile_seed: u64,
    pub tariff_off_peak: f64,
    pub tariff_peak: f64,
    pub pump_capacity: f64,
    /// Penalty weight on pump-flow changes.
    pub move_weight: f64,
    /// State regularization; zero for the plain economic problem.
    pub epsilon: f64,
}

impl Default for WdnConfig {
    fn default() -> Self {
        WdnConfig {
            tank_areas: vec![30.0, 20.0, 10.0, 15.0, 25.0, 12.0],
            dt_hours: 1.0,
            // Distinct magnitudes summing to ~19% of the source pump's
            // capacity, leaving slack for load shifting into cheap hours.
            demand_base: vec![1.50, 1.05, 0.84, 1.26, 0.66, 1.14, 0.90, 0.78, 0.99, 0.54],
            demand_amplitude: 0.25,
            demand_jitter: 0.0,
            profile_seed: 0,
            tariff_off_peak: 0.5,
            tariff_peak: 1.5,
            pump_capacity: 50.0,
            move_weight: 0.1,
            epsilon: 0.0,
        }
    }
}

/// A fully specified benchmark instance, before lifting.
#[derive(Debug, Clone)]
pub struct WdnInstance {
    pub tank_areas: Vec<f64>,
    pub dt_hours: f64,
    pub b_u: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub x_bar: DVector<f64>,
    pub u_max: DVector<f64>,
    pub move_weight: DMatrix<f64>,
    pub period: usize,
    pub demand_base: DVector<f64>,
    /// Mean-one diurnal multiplier, one value per hour.
    pub demand_multiplier: Vec<f64>,
    /// Electricity price per flow unit, one value per hour.
    pub tariff: Vec<f64>,
}

impl WdnInstance {
    /// Demand vector at hour `t`.
    pub fn demand(&self, t: usize) -> DVector<f64> {
        &self.demand_base * self.demand_multiplier[t % self.period]
    }
}

/// Diurnal demand multiplier and two-level tariff.
///
/// The multiplier is `1 + amplitude * sin(2 pi (t - 6) / 24)` plus
/// optional seeded jitter, shifted afterwards so its mean is exactly one.
/// The tariff is off-peak for hours 0-6 and 22-23, peak otherwise.
pub fn synthesize_profiles(
    seed: u64,
    amplitude: f64,
    jitter: f64,
    off_peak: f64,
    peak: f64,
) -> Result<(Vec<f64>, Vec<f64>), WdnError> {
    if !(0.0..1.0).contains(&amplitude) || jitter < 0.0 || amplitude + jitter >= 1.0 {
        return Err(WdnError::BadAmplitude {
            value: amplitude + jitter,
        });
    }
    if off_peak <= 0.0 || peak <= 0.0 {
        return Err(WdnError::BadTariff { off_peak, peak });
    }
    let t_f = PERIOD_HOURS as f64;
    let mut multiplier: Vec<f64> = (0..PERIOD_HOURS)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 - 6.0) / t_f;
            1.0 + amplitude * phase.sin()
        })
        .collect();
    if jitter > 0.0 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for m in &mut multiplier {
            *m += jitter * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    let mean = multiplier.iter().sum::<f64>() / t_f;
    for m in &mut multiplier {
        *m -= mean - 1.0;
    }

    let tariff = (0..PERIOD_HOURS)
        .map(|t| if t <= 6 || t >= 22 { off_peak } else { peak })
        .collect();
    Ok((multiplier, tariff))
}

fn validate(cfg: &WdnConfig) -> Result<(), WdnError> {
    if cfg.tank_areas.len() != N_TANKS {
        return Err(WdnError::WrongLength {
            field: "tank_areas",
            expected: N_TANKS,
            got: cfg.tank_areas.len(),
        });
    }
    for (i, &s) in cfg.tank_areas.iter().enumerate() {
        if !(s > 0.0) || !s.is_finite() {
            return Err(WdnError::NonPositiveArea { index: i, value: s });
        }
    }
    if cfg.demand_base.len() != N_DEMANDS {
        return Err(WdnError::WrongLength {
            field: "demand_base",
            expected: N_DEMANDS,
            got: cfg.demand_base.len(),
        });
    }
    for (i, &d) in cfg.demand_base.iter().enumerate() {
        if d < 0.0 || !d.is_finite() {
            return Err(WdnError::NegativeDemand { index: i, value: d });
        }
    }
    if !(cfg.pump_capacity > 0.0) {
        return Err(WdnError::BadCapacity {
            value: cfg.pump_capacity,
        });
    }
    if !(cfg.dt_hours > 0.0) {
        return Err(WdnError::BadInterval { value: cfg.dt_hours });
    }
    Ok(())
}

/// Network matrices from tank areas: every nonzero entry is `dt / S_i`
/// with the sign of the flow direction for the row's tank.
fn network_matrices(areas: &[f64], dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let rate = |i: usize| dt / areas[i];
    let mut b_u = DMatrix::zeros(N_TANKS, N_PUMPS);
    // Tank A: fed by pump 1, drained by pumps 2-4.
    b_u[(0, 0)] = rate(0);
    b_u[(0, 1)] = -rate(0);
    b_u[(0, 2)] = -rate(0);
    b_u[(0, 3)] = -rate(0);
    // Tanks B, C, D: fed by pumps 2, 3, 4; D also drained by pump 5.
    b_u[(1, 1)] = rate(1);
    b_u[(2, 2)] = rate(2);
    b_u[(3, 3)] = rate(3);
    b_u[(3, 4)] = -rate(3);
    // Tank E: fed by pump 5, drained by pump 6; tank F: fed by pump 6.
    b_u[(4, 4)] = rate(4);
    b_u[(4, 5)] = -rate(4);
    b_u[(5, 5)] = rate(5);

    let mut b_d = DMatrix::zeros(N_TANKS, N_DEMANDS);
    for (j, &tank) in DEMAND_TANK.iter().enumerate() {
        b_d[(tank, j)] = -rate(tank);
    }
    (b_u, b_d)
}

/// Level bounds, symmetric around mid-tank.
fn level_bounds() -> DVector<f64> {
    DVector::from_vec(vec![1.011, 1.095, 0.6, 0.633, 0.807, 0.657])
}

/// Build the benchmark: the instance description plus everything the
/// controller pipeline consumes.
pub fn build_richmond(
    cfg: &WdnConfig,
) -> Result<
    (
        WdnInstance,
        LiftedSystem,
        AugmentedSystem,
        StageCostSpec,
        BoxConstraints,
    ),
    WdnError,
> {
    validate(cfg)?;
    let (multiplier, tariff) = synthesize_profiles(
        cfg.profile_seed,
        cfg.demand_amplitude,
        cfg.demand_jitter,
        cfg.tariff_off_peak,
        cfg.tariff_peak,
    )?;
    let (b_u, b_d) = network_matrices(&cfg.tank_areas, cfg.dt_hours);

    let instance = WdnInstance {
        tank_areas: cfg.tank_areas.clone(),
        dt_hours: cfg.dt_hours,
        b_u: b_u.clone(),
        b_d: b_d.clone(),
        x_bar: level_bounds(),
        u_max: DVector::from_element(N_PUMPS, cfg.pump_capacity),
        move_weight: DMatrix::identity(N_PUMPS, N_PUMPS) * cfg.move_weight,
        period: PERIOD_HOURS,
        demand_base: DVector::from_vec(cfg.demand_base.clone()),
        demand_multiplier: multiplier,
        tariff,
    };

    let d_seq: Vec<DVector<f64>> = (0..PERIOD_HOURS).map(|t| instance.demand(t)).collect();
    let system = LinearPeriodicSystem::new(
        DMatrix::identity(N_TANKS, N_TANKS),
        b_u,
        b_d,
        PERIOD_HOURS,
        d_seq,
    )?;
    let lifted = system.lift();
    let aug = augment(&lifted);

    let alpha_seq: Vec<DVector<f64>> = instance
        .tariff
        .iter()
        .map(|&a| DVector::from_element(N_PUMPS, a))
        .collect();
    let cost = StageCostSpec::linear_with_moves(
        alpha_seq,
        instance.move_weight.clone(),
        cfg.epsilon,
    )?;
    let bounds = BoxConstraints::symmetric_state(
        instance.x_bar.clone(),
        DVector::zeros(N_PUMPS),
        instance.u_max.clone(),
    )?;
    Ok((instance, lifted, aug, cost, bounds))
}

/// The physical plant matching the instance, for closed-loop simulation.
pub fn plant(instance: &WdnInstance) -> Result<LinearPeriodicSystem, WdnError> {
    let d_seq: Vec<DVector<f64>> = (0..instance.period).map(|t| instance.demand(t)).collect();
    Ok(LinearPeriodicSystem::new(
        DMatrix::identity(N_TANKS, N_TANKS),
        instance.b_u.clone(),
        instance.b_d.clone(),
        instance.period,
        d_seq,
    )?)
}
