//! Small instances shared across unit tests.

use nalgebra::{dmatrix, dvector};

use crate::dynamics::{augment, LinearPeriodicSystem};
use crate::model::{compile, BoxConstraints, CompiledModel, StageCostSpec};
use crate::steady_state::{solve_steady_state_model, SteadyStateResult};

/// Integrator with a pure input cost; every state in the box is a steady
/// state when `epsilon` is zero.
pub(crate) fn integrator(
    epsilon: f64,
) -> (LinearPeriodicSystem, CompiledModel, SteadyStateResult) {
    let sys = LinearPeriodicSystem::new(
        dmatrix![1.0],
        dmatrix![1.0],
        dmatrix![1.0],
        1,
        vec![dvector![0.0]],
    )
    .unwrap();
    let cost =
        StageCostSpec::input_quadratic(dvector![0.0], dmatrix![1.0], 1, epsilon, 0.0).unwrap();
    let bounds = BoxConstraints::new(dvector![-1.0], dvector![1.0], dvector![-1.0], dvector![1.0])
        .unwrap();
    let model = compile(&sys.lift(), None, &cost, &bounds).unwrap();
    let ss = solve_steady_state_model(&model).unwrap();
    (sys, model, ss)
}

/// Two-hour coupled instance with prices and a move penalty. The steady
/// input saturates a bound and the steady-state set is a single point
/// near x = (4.0, 3.2).
pub(crate) fn two_hour() -> (LinearPeriodicSystem, CompiledModel, SteadyStateResult) {
    let sys = LinearPeriodicSystem::new(
        dmatrix![0.5],
        dmatrix![1.0],
        dmatrix![1.0],
        2,
        vec![dvector![0.4], dvector![-0.1]],
    )
    .unwrap();
    let lifted = sys.lift();
    let aug = augment(&lifted);
    let cost = StageCostSpec::new(
        vec![dvector![-1.5], dvector![-0.5]],
        dmatrix![0.3],
        dmatrix![0.1],
        0.0,
        0.0,
    )
    .unwrap();
    let bounds = BoxConstraints::new(dvector![-10.0], dvector![10.0], dvector![0.0], dvector![2.0])
        .unwrap();
    let model = compile(&lifted, Some(&aug), &cost, &bounds).unwrap();
    let ss = solve_steady_state_model(&model).unwrap();
    (sys, model, ss)
}
