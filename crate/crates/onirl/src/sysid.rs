//! Derivative-free identification of the unknown dynamics parameters.
//!
//! Differentiating measured velocities is noisy, so the velocity dynamics are
//! instead integrated twice over sliding windows `tau1` and `tau2`. The
//! fundamental theorem of calculus turns the double integral of `dq/dt` into
//! a double difference of positions, leaving the affine relation
//!
//! ```text
//! pos_delta(t) = drift_int(t) + theta' * basis_int(t) + quadrature error
//! ```
//!
//! between quantities that are all computable from samples alone. Records of
//! that relation are kept in a bounded history stack whose Gram matrix is
//! curated for a large smallest eigenvalue, and the estimate `theta_hat` is
//! driven by a least-squares update law over the stored records, with a
//! forgetting-style gain matrix `gamma`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{DynamicsModel, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_bounds;

/// Windowed integral data evaluated at one time instant.
///
/// All fields are exactly zero for `t < T0 + tau1 + tau2`, where `T0` is the
/// trajectory start: the windows have not filled yet.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralRegressors {
    /// Double difference of positions `p(t) - p(t-tau2) - p(t-tau1) + p(t-tau1-tau2)`.
    pub pos_delta: DVector<f64>,
    /// Double integral of the known drift over the nested windows.
    pub drift_int: DVector<f64>,
    /// Double integral of the unknown-part basis over the nested windows.
    pub basis_int: DVector<f64>,
    /// Quadrature estimate of the neglected approximation-error integral;
    /// zero when the basis is exact.
    pub eps_bound: f64,
    pub t: f64,
}

/// One stored record of the affine relation.
#[derive(Debug, Clone, PartialEq)]
pub struct StackEntry {
    pub pos_delta: DVector<f64>,
    pub drift_int: DVector<f64>,
    pub basis_int: DVector<f64>,
    pub t: f64,
}

impl From<IntegralRegressors> for StackEntry {
    fn from(r: IntegralRegressors) -> Self {
        StackEntry {
            pos_delta: r.pos_delta,
            drift_int: r.drift_int,
            basis_int: r.basis_int,
            t: r.t,
        }
    }
}

/// Checks that `len` is a positive integer multiple of the grid step.
fn window_steps(len: f64, ts: f64, what: &str, t: f64) -> Result<usize> {
    if !(len > 0.0) {
        return Err(Error::invalid(format!(
            "{what} must be positive, got {len}"
        )));
    }
    let steps = len / ts;
    let rounded = steps.round();
    if (steps - rounded).abs() > 1e-9 * steps.max(1.0) || rounded < 1.0 {
        return Err(Error::InsufficientHistory {
            t,
            reason: format!("{what} = {len} is not a multiple of the sample step {ts}"),
        });
    }
    Ok(rounded as usize)
}

/// Nested trapezoid: cumulative inner integrals over `tau1`, trapezoid outer
/// integral over `tau2`. `values[r]` holds the integrand at grid offset
/// `base + r`; the result integrates offsets `[k1 + s]` for `s in 0..=k2`.
fn nested_trapezoid(values: &[DVector<f64>], k1: usize, k2: usize, ts: f64) -> DVector<f64> {
    let dim = values[0].len();
    debug_assert_eq!(values.len(), k1 + k2 + 1);

    let mut cumulative = Vec::with_capacity(values.len());
    cumulative.push(DVector::zeros(dim));
    for r in 1..values.len() {
        let step = 0.5 * ts * (&values[r - 1] + &values[r]);
        let next = &cumulative[r - 1] + step;
        cumulative.push(next);
    }

    let inner = |s: usize| &cumulative[k1 + s] - &cumulative[s];
    let mut outer = 0.5 * (inner(0) + inner(k2));
    for s in 1..k2 {
        outer += inner(s);
    }
    outer * ts
}

/// Evaluates the windowed regressors at time `t`.
///
/// `t` and both window edges must lie on the sample grid. Before the windows
/// have filled (`t < T0 + tau1 + tau2`) every output is exactly zero.
pub fn integral_regressors(
    traj: &Trajectory,
    model: &DynamicsModel,
    t: f64,
    tau1: f64,
    tau2: f64,
) -> Result<IntegralRegressors> {
    let ts = traj.ts();
    let k1 = window_steps(tau1, ts, "tau1", t)?;
    let k2 = window_steps(tau2, ts, "tau2", t)?;
    let idx = traj.index_at(t)?;

    let n = model.state_half_dim();
    let p = model.basis_dim();
    if idx < k1 + k2 {
        return Ok(IntegralRegressors {
            pos_delta: DVector::zeros(n),
            drift_int: DVector::zeros(n),
            basis_int: DVector::zeros(p),
            eps_bound: 0.0,
            t,
        });
    }

    let base = idx - k1 - k2;
    let window = &traj.samples()[base..=idx];

    let pos = |s: &crate::dynamics::TrajectorySample| s.x.rows(0, n).clone_owned();
    let pos_delta = pos(&window[k1 + k2]) - pos(&window[k1]) - pos(&window[k2]) + pos(&window[0]);

    let drift: Vec<DVector<f64>> = window.iter().map(|s| model.f_known(&s.x, &s.u)).collect();
    let basis_vals: Vec<DVector<f64>> = window.iter().map(|s| model.basis(&s.x, &s.u)).collect();
    let eps_norm: Vec<DVector<f64>> = window
        .iter()
        .map(|s| DVector::from_vec(vec![model.eps(&s.x, &s.u).norm()]))
        .collect();

    Ok(IntegralRegressors {
        pos_delta,
        drift_int: nested_trapezoid(&drift, k1, k2, ts),
        basis_int: nested_trapezoid(&basis_vals, k1, k2, ts),
        eps_bound: nested_trapezoid(&eps_norm, k1, k2, ts)[0],
        t,
    })
}

/// Model-quality metric: the velocity increment over `[t - window, t]` minus
/// the integrals of the known drift and the estimated unknown part, reduced
/// to a scalar by the Euclidean norm. Zero when `theta_hat` matches the true
/// parameters up to quadrature error.
pub fn eval_eta(
    traj: &Trajectory,
    model: &DynamicsModel,
    theta_hat: &DMatrix<f64>,
    t: f64,
    window: f64,
) -> Result<f64> {
    eta_impl(traj, model, &|_| theta_hat.clone(), t, window)
}

/// Same metric, but with the estimate held at the value recorded at each
/// sample inside the window. `trace[i]` is the estimate at grid index `i`
/// and must cover every index up to `t`.
pub fn eval_eta_recorded(
    traj: &Trajectory,
    model: &DynamicsModel,
    trace: &[DMatrix<f64>],
    t: f64,
    window: f64,
) -> Result<f64> {
    let idx = traj.index_at(t)?;
    if trace.len() <= idx {
        return Err(Error::invalid(format!(
            "estimate trace covers {} samples, need {}",
            trace.len(),
            idx + 1
        )));
    }
    eta_impl(traj, model, &|i| trace[i].clone(), t, window)
}

fn eta_impl(
    traj: &Trajectory,
    model: &DynamicsModel,
    theta_at: &dyn Fn(usize) -> DMatrix<f64>,
    t: f64,
    window: f64,
) -> Result<f64> {
    let ts = traj.ts();
    let k = window_steps(window, ts, "eta window", t)?;
    let idx = traj.index_at(t)?;
    if idx < k {
        return Err(Error::InsufficientHistory {
            t,
            reason: format!("eta window of {window} s extends before the trajectory start"),
        });
    }

    let n = model.state_half_dim();
    let start = idx - k;
    let integrand = |i: usize| -> DVector<f64> {
        let s = traj.get(i);
        model.f_known(&s.x, &s.u) + theta_at(i).transpose() * model.basis(&s.x, &s.u)
    };

    let mut integral = 0.5 * (integrand(start) + integrand(idx));
    for i in start + 1..idx {
        integral += integrand(i);
    }
    integral *= ts;

    let q_now = traj.get(idx).x.rows(n, n).clone_owned();
    let q_then = traj.get(start).x.rows(n, n).clone_owned();
    Ok((q_now - q_then - integral).norm())
}

/// Concurrent-learning estimator state: the parameter estimate, the
/// least-squares gain, and the curated record stack.
pub struct ParamEstimator {
    theta_hat: DMatrix<f64>,
    gamma: DMatrix<f64>,
    stack: Vec<StackEntry>,
    capacity: usize,
    k_theta: f64,
    beta1: f64,
    rank_threshold: f64,
}

impl ParamEstimator {
    /// `gamma0` must be symmetric positive definite.
    pub fn new(
        basis_dim: usize,
        vel_dim: usize,
        capacity: usize,
        k_theta: f64,
        beta1: f64,
        gamma0: DMatrix<f64>,
        rank_threshold: f64,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("stack capacity must be >= 1"));
        }
        if !(k_theta > 0.0) || !(beta1 > 0.0) {
            return Err(Error::invalid("adaptation gains must be positive"));
        }
        if gamma0.nrows() != basis_dim || gamma0.ncols() != basis_dim {
            return Err(Error::invalid("gamma0 must be basis_dim x basis_dim"));
        }
        if gamma0.clone().cholesky().is_none() {
            return Err(Error::invalid("gamma0 must be positive definite"));
        }
        Ok(ParamEstimator {
            theta_hat: DMatrix::zeros(basis_dim, vel_dim),
            gamma: gamma0,
            stack: Vec::with_capacity(capacity),
            capacity,
            k_theta,
            beta1,
            rank_threshold,
        })
    }

    pub fn theta_hat(&self) -> &DMatrix<f64> {
        &self.theta_hat
    }

    pub fn set_theta_hat(&mut self, theta: DMatrix<f64>) {
        assert_eq!(theta.shape(), self.theta_hat.shape());
        self.theta_hat = theta;
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn stack(&self) -> &[StackEntry] {
        &self.stack
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Gram matrix of the stored basis integrals, summed in storage order.
    pub fn basis_gram(&self) -> DMatrix<f64> {
        let p = self.theta_hat.nrows();
        let mut gram = DMatrix::zeros(p, p);
        for e in &self.stack {
            gram.ger(1.0, &e.basis_int, &e.basis_int, 1.0);
        }
        gram
    }

    fn gram_with_replacement(&self, replace: usize, candidate: &StackEntry) -> DMatrix<f64> {
        let p = self.theta_hat.nrows();
        let mut gram = DMatrix::zeros(p, p);
        for (i, e) in self.stack.iter().enumerate() {
            let g = if i == replace {
                &candidate.basis_int
            } else {
                &e.basis_int
            };
            gram.ger(1.0, g, g, 1.0);
        }
        gram
    }

    pub fn gram_lambda_min(&self) -> f64 {
        sym_eigen_bounds(&self.basis_gram()).0
    }

    /// True when the smallest Gram eigenvalue clears the configured
    /// excitation threshold.
    pub fn is_full_rank(&self) -> bool {
        self.gram_lambda_min() > self.rank_threshold
    }

    /// Offers one record to the stack. Appends while below capacity; once
    /// full, replaces the entry whose substitution maximizes the smallest
    /// Gram eigenvalue, and only when that strictly improves on the current
    /// stack. Returns whether the stack changed.
    pub fn stack_try_insert(&mut self, entry: StackEntry) -> bool {
        if self.stack.len() < self.capacity {
            self.stack.push(entry);
            return true;
        }
        let current = self.gram_lambda_min();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.stack.len() {
            // A bit-identical replacement reproduces the same Gram matrix, so
            // it can never strictly improve; skip the rebuild.
            let lam = if self.stack[i] == entry {
                current
            } else {
                sym_eigen_bounds(&self.gram_with_replacement(i, &entry)).0
            };
            if lam > current && best.is_none_or(|(_, b)| lam > b) {
                best = Some((i, lam));
            }
        }
        match best {
            Some((i, _)) => {
                self.stack[i] = entry;
                true
            }
            None => false,
        }
    }

    /// Advances the estimate and the gain by one explicit Euler step of the
    /// update laws, then re-symmetrizes the gain. Fails if the gain loses
    /// positive definiteness.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        let (p, n) = self.theta_hat.shape();
        let mut accum = DMatrix::zeros(p, n);
        let mut gram = DMatrix::zeros(p, p);
        for e in &self.stack {
            let residual = &e.pos_delta - &e.drift_int - self.theta_hat.transpose() * &e.basis_int;
            accum.ger(1.0, &e.basis_int, &residual, 1.0);
            gram.ger(1.0, &e.basis_int, &e.basis_int, 1.0);
        }
        self.theta_hat += dt * self.k_theta * &self.gamma * accum;

        let contraction = &self.gamma * gram * &self.gamma;
        self.gamma = &self.gamma + dt * (self.beta1 * &self.gamma - self.k_theta * contraction);
        self.gamma = 0.5 * (&self.gamma + self.gamma.transpose());

        if self.gamma.clone().cholesky().is_none() {
            return Err(Error::GainDivergence);
        }
        Ok(())
    }

    /// Eigenvalue extremes of the gain matrix, for monitoring.
    pub fn gamma_eigen_bounds(&self) -> (f64, f64) {
        sym_eigen_bounds(&self.gamma)
    }
}
