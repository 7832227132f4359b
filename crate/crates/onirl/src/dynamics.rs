//! Demonstrator dynamics and fixed-step trajectory generation.
//!
//! The observed agent has state `x = [p; q]` with position `p` and velocity
//! `q` in `R^n`, and the velocity dynamics decompose into a known drift, an
//! unknown part that is linear in a known basis, and an approximation error:
//!
//! ```text
//! dp/dt = q
//! dq/dt = f_known(x, u) + theta_true' * basis(x, u) + eps(x, u)
//! ```
//!
//! Trajectories are produced on a uniform grid by classic fourth-order
//! Runge-Kutta with the policy evaluated at every stage state, and are
//! immutable once built.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One timestamped observation of the demonstrator.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    /// State in `R^{2n}`, positions first, velocities second.
    pub x: DVector<f64>,
    /// Control in `R^m`.
    pub u: DVector<f64>,
}

/// A uniformly sampled trajectory, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    ts: f64,
    samples: Vec<TrajectorySample>,
}

impl Trajectory {
    /// Builds a trajectory from samples, validating uniform spacing.
    pub fn from_samples(samples: Vec<TrajectorySample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("a trajectory needs at least two samples"));
        }
        let ts = samples[1].t - samples[0].t;
        if !(ts > 0.0) || !ts.is_finite() {
            return Err(Error::invalid(format!(
                "sample spacing must be positive and finite, got {ts}"
            )));
        }
        let t0 = samples[0].t;
        let dim_x = samples[0].x.len();
        let dim_u = samples[0].u.len();
        for (i, s) in samples.iter().enumerate() {
            let expected = t0 + i as f64 * ts;
            if (s.t - expected).abs() > grid_tol(expected) {
                return Err(Error::invalid(format!(
                    "non-uniform spacing at sample {i}: t = {}, expected {expected}",
                    s.t
                )));
            }
            if s.x.len() != dim_x || s.u.len() != dim_u {
                return Err(Error::invalid(format!(
                    "inconsistent dimensions at sample {i}"
                )));
            }
        }
        Ok(Trajectory { ts, samples })
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &TrajectorySample {
        &self.samples[i]
    }

    /// Empty trajectory on a fixed grid, grown sample by sample. The caller
    /// is responsible for pushing samples on that grid; used by the
    /// experiment loop, which generates the grid itself.
    pub(crate) fn new_on_grid(ts: f64) -> Self {
        Trajectory {
            ts,
            samples: Vec::new(),
        }
    }

    pub(crate) fn push_on_grid(&mut self, sample: TrajectorySample) {
        debug_assert!(
            self.samples.is_empty()
                || (sample.t - (self.start_time() + self.samples.len() as f64 * self.ts)).abs()
                    <= grid_tol(sample.t)
        );
        self.samples.push(sample);
    }

    /// Maps a time to its grid index, failing when the time is off-grid or
    /// outside the recorded span.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let rel = (t - self.start_time()) / self.ts;
        let idx = rel.round();
        if (rel - idx).abs() * self.ts > grid_tol(t) {
            return Err(Error::InsufficientHistory {
                t,
                reason: format!("time not on the {}-spaced sample grid", self.ts),
            });
        }
        if idx < 0.0 || idx as usize >= self.samples.len() {
            return Err(Error::InsufficientHistory {
                t,
                reason: "time outside the recorded trajectory".into(),
            });
        }
        Ok(idx as usize)
    }
}

fn grid_tol(t: f64) -> f64 {
    1e-9 * t.abs().max(1.0)
}

type DynFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type GainFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A control-affine demonstrator model split into known and unknown parts.
///
/// `theta_true` is used only by the simulator and by test oracles; the
/// estimators never read it.
pub struct DynamicsModel {
    n: usize,
    m: usize,
    p: usize,
    f_known: DynFn,
    basis: DynFn,
    theta_true: DMatrix<f64>,
    g_eff: GainFn,
    eps: DynFn,
}

impl DynamicsModel {
    /// Assembles a model and checks basic structural invariants: dimensions
    /// are consistent and the lifted input gain has zero position rows
    /// (probed at a handful of states, since the maps are opaque).
    pub fn new(
        n: usize,
        m: usize,
        f_known: DynFn,
        basis: DynFn,
        theta_true: DMatrix<f64>,
        g_eff: GainFn,
        eps: DynFn,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::invalid("state and control dimensions must be >= 1"));
        }
        let p = theta_true.nrows();
        if theta_true.ncols() != n {
            return Err(Error::invalid(format!(
                "theta_true must have {n} columns, got {}",
                theta_true.ncols()
            )));
        }
        let model = DynamicsModel {
            n,
            m,
            p,
            f_known,
            basis,
            theta_true,
            g_eff,
            eps,
        };
        for probe in [0.0, 1.0, -0.7, 2.3] {
            let x = DVector::from_element(2 * n, probe);
            let g = (model.g_eff)(&x);
            if g.nrows() != 2 * n || g.ncols() != m {
                return Err(Error::invalid(format!(
                    "g_eff must map to a {}x{m} matrix",
                    2 * n
                )));
            }
            if g.rows(0, n).iter().any(|v| *v != 0.0) {
                return Err(Error::invalid(
                    "g_eff must have zero rows on the position block",
                ));
            }
        }
        Ok(model)
    }

    pub fn state_half_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn basis_dim(&self) -> usize {
        self.p
    }

    pub fn theta_true(&self) -> &DMatrix<f64> {
        &self.theta_true
    }

    pub fn f_known(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f_known)(x, u)
    }

    pub fn basis(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.basis)(x, u)
    }

    pub fn g_eff(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.g_eff)(x)
    }

    pub fn eps(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.eps)(x, u)
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != 2 * self.n {
            return Err(Error::invalid(format!(
                "state dimension {} does not match model (expected {})",
                x.len(),
                2 * self.n
            )));
        }
        if u.len() != self.m {
            return Err(Error::invalid(format!(
                "control dimension {} does not match model (expected {})",
                u.len(),
                self.m
            )));
        }
        Ok(())
    }
}

/// Full state derivative `[q; f_known + theta_true' basis + eps]`.
pub fn eval_dynamics(
    model: &DynamicsModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_dims(x, u)?;
    let n = model.state_half_dim();
    let q = x.rows(n, n);
    let accel =
        model.f_known(x, u) + model.theta_true().transpose() * model.basis(x, u) + model.eps(x, u);
    let mut dx = DVector::zeros(2 * n);
    dx.rows_mut(0, n).copy_from(&q);
    dx.rows_mut(n, n).copy_from(&accel);
    Ok(dx)
}

/// One fixed-step RK4 step of the closed loop `dx/dt = f(x, policy(x))`.
///
/// The policy is re-evaluated at every stage state, so both the live
/// experiment loop and `simulate` produce bit-identical trajectories.
pub fn rk4_closed_loop_step(
    model: &DynamicsModel,
    policy: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let f = |x: &DVector<f64>| -> Result<DVector<f64>> { eval_dynamics(model, x, &policy(x)) };
    let k1 = f(x)?;
    let k2 = f(&(x + 0.5 * dt * &k1))?;
    let k3 = f(&(x + 0.5 * dt * &k2))?;
    let k4 = f(&(x + dt * &k3))?;
    Ok(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Simulates the demonstrator under a feedback policy on a uniform grid.
///
/// Returns `floor(t_end/ts) + 1` samples with `t_i = i * ts`; the logged
/// control is the policy output at the sample state. Fails with a divergence
/// error carrying the offending time if the state leaves the finite range.
pub fn simulate(
    model: &DynamicsModel,
    policy: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    ts: f64,
    t_end: f64,
) -> Result<Trajectory> {
    if !(ts > 0.0) {
        return Err(Error::invalid("ts must be positive"));
    }
    if t_end < ts {
        return Err(Error::invalid("t_end must be at least one step"));
    }
    let steps_f = t_end / ts;
    let steps = steps_f.round();
    if (steps_f - steps).abs() > 1e-9 * steps.max(1.0) {
        return Err(Error::invalid(format!(
            "t_end = {t_end} is not an integer multiple of ts = {ts}"
        )));
    }
    let steps = steps as usize;

    let mut samples = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for i in 0..=steps {
        let t = i as f64 * ts;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t });
        }
        let u = policy(&x);
        samples.push(TrajectorySample { t, x: x.clone(), u });
        if i < steps {
            x = rk4_closed_loop_step(model, policy, &x, ts)?;
        }
    }
    Trajectory::from_samples(samples)
}
