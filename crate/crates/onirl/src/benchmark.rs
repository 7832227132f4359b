//! The scalar nonlinear benchmark used throughout the test suite and CLI.
//!
//! A double-integrator-like plant with a saturating position nonlinearity,
//!
//! ```text
//! dx1/dt = x2
//! dx2/dt = f1*x1*(pi/2 + atan(5*x1)) + f2*x1^2/(1 + 25*x1^2) + f3*x2 + 3*u
//! ```
//!
//! whose optimal behavior for the running cost `x2^2 + u^2` is known in
//! closed form: the policy `u = -3*x2` and the value function
//! `V(x) = x1^2*(v1 + v2*atan(5*x1)) + v3*x2^2`. Having the exact policy and
//! value available makes the reward-recovery residuals exactly zero at the
//! true weights, so the pipeline can be validated end to end.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsModel;
use crate::irl::FeatureLibrary;

/// Ground-truth constants of the benchmark plant and its optimal solution.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    /// Unknown dynamics constants (what the identifier estimates).
    pub f: [f64; 3],
    /// Value-function parameters of the closed-form optimum.
    pub v: [f64; 3],
    /// State-cost weights (diagonal).
    pub q_weights: [f64; 2],
    /// Control-cost weight; fixed and known to the reward recovery.
    pub r_weight: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            f: [-1.0, -2.5, 4.0],
            v: [std::f64::consts::FRAC_PI_2, 1.0, 1.0],
            q_weights: [0.0, 1.0],
            r_weight: 1.0,
        }
    }
}

impl BenchmarkSpec {
    /// Stacked true weight vector `[v1, v2, v3, q1, q2]` in the column order
    /// used by the reward regressor (the known `r_weight` is not included).
    pub fn true_weights(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.v[0],
            self.v[1],
            self.v[2],
            self.q_weights[0],
            self.q_weights[1],
        ])
    }

    /// True dynamics parameters as a column (basis dimension 3, velocity
    /// dimension 1).
    pub fn theta_true(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 1, &self.f)
    }
}

/// Basis of the unknown part of the acceleration.
fn basis(x: &DVector<f64>) -> DVector<f64> {
    let x1 = x[0];
    let x2 = x[1];
    DVector::from_vec(vec![
        x1 * (std::f64::consts::FRAC_PI_2 + (5.0 * x1).atan()),
        x1 * x1 / (1.0 + 25.0 * x1 * x1),
        x2,
    ])
}

/// Builds the benchmark model for a given set of constants.
pub fn model_from_spec(spec: &BenchmarkSpec) -> DynamicsModel {
    DynamicsModel::new(
        1,
        1,
        Box::new(|_x, u| DVector::from_vec(vec![3.0 * u[0]])),
        Box::new(|x, _u| basis(x)),
        spec.theta_true(),
        Box::new(|_x| DMatrix::from_column_slice(2, 1, &[0.0, 3.0])),
        Box::new(|_x, _u| DVector::zeros(1)),
    )
    .expect("benchmark model is structurally valid")
}

/// The benchmark model with the ground-truth constants.
pub fn model() -> DynamicsModel {
    model_from_spec(&BenchmarkSpec::default())
}

/// The demonstrator's optimal feedback `u = -3*x2`.
pub fn optimal_policy(x: &DVector<f64>) -> DVector<f64> {
    // Adding +0.0 maps the negative zero at x2 = 0 onto plain zero so the
    // logged control prints as `0`.
    DVector::from_vec(vec![-3.0 * x[1] + 0.0])
}

/// Closed-form optimal value `x1^2*(v1 + v2*atan(5*x1)) + v3*x2^2`.
pub fn value_function(x: &DVector<f64>, v: &[f64; 3]) -> f64 {
    let x1 = x[0];
    let x2 = x[1];
    x1 * x1 * (v[0] + v[1] * (5.0 * x1).atan()) + v[2] * x2 * x2
}

/// Feature library spanning the benchmark's value function and state cost
/// exactly, so the representation error is identically zero.
///
/// Value features `[x1^2, x1^2*atan(5*x1), x2^2]`, state-cost features
/// `[x1^2, x2^2]`, one squared control.
pub fn features() -> FeatureLibrary {
    FeatureLibrary::new(
        3,
        2,
        1,
        Box::new(|x| {
            let x1 = x[0];
            let x2 = x[1];
            DVector::from_vec(vec![x1 * x1, x1 * x1 * (5.0 * x1).atan(), x2 * x2])
        }),
        Box::new(|x| {
            let x1 = x[0];
            let x2 = x[1];
            let atan = (5.0 * x1).atan();
            let rational = 5.0 * x1 * x1 / (1.0 + 25.0 * x1 * x1);
            DMatrix::from_row_slice(
                3,
                2,
                &[
                    2.0 * x1,
                    0.0,
                    2.0 * x1 * atan + rational,
                    0.0,
                    0.0,
                    2.0 * x2,
                ],
            )
        }),
        Box::new(|x| {
            let x1 = x[0];
            let x2 = x[1];
            DVector::from_vec(vec![x1 * x1, x2 * x2])
        }),
    )
}
