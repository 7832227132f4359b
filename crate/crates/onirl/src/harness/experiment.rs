//! The interleaved online loop: simulate, identify, build rows, select,
//! solve, purge; plus the run report consumed by the exporters.
//!
//! One pass of the loop per sample instant, in a fixed order so that runs
//! are reproducible and a live run and a replay of its exported trajectory
//! perform the same arithmetic in the same order:
//!
//! 1. record the sample (integrate one step in live mode, read in replay),
//! 2. offer a windowed regressor record to the identifier once its windows
//!    have filled, then advance the identifier one Euler step,
//! 3. evaluate the model-quality metric,
//! 4. build a regression row at the current sample under the current
//!    dynamics estimate and offer it to the reward stack,
//! 5. gate the weight solve and decide on a purge,
//! 6. after a purge, optionally query the demonstrator at random states
//!    drawn from the observed state range (inflated 20%) to re-seed the
//!    emptied stack with informative rows.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::benchmark::{self, BenchmarkSpec};
use crate::dynamics::{rk4_closed_loop_step, Trajectory, TrajectorySample};
use crate::error::{Error, Result};
use crate::irl::{build_row, IrlStack, WeightEstimate};
use crate::purge::{purge_step, query_demonstrator, PurgeMode, PurgePolicy};
use crate::sysid::{eval_eta_recorded, integral_regressors, ParamEstimator};

use super::config::{ExperimentConfig, PurgeModeConfig};

/// One time-series record: time, error norm against ground truth, and the
/// raw estimate entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub t: f64,
    pub err_norm: f64,
    pub values: Vec<f64>,
}

/// One purge event: time, running purge count, the smallest stored quality
/// tag and the stack condition number immediately before emptying.
#[derive(Debug, Clone, PartialEq)]
pub struct PurgeEvent {
    pub t: f64,
    pub count: u32,
    pub eta_bar: f64,
    pub kappa: f64,
}

/// Everything a run produces, for export and for tests.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub theta_error_series: Vec<SeriesPoint>,
    pub weight_error_series: Vec<SeriesPoint>,
    pub purge_events: Vec<PurgeEvent>,
    /// Times at which a gated solve refreshed the weights.
    pub solve_times: Vec<f64>,
    /// `(t, lambda_min, lambda_max)` of the identifier gain matrix.
    pub gamma_eigen_series: Vec<(f64, f64, f64)>,
    /// `(t, lambda_min)` of the identifier stack's Gram matrix.
    pub gram_lambda_series: Vec<(f64, f64)>,
    pub final_theta: Vec<f64>,
    pub final_weights: Vec<f64>,
    pub purge_count: u32,
    pub wall_time_s: f64,
    /// The demonstrator trajectory the run observed.
    pub trajectory: Trajectory,
}

impl RunReport {
    /// Equality of all computed outputs; wall time is measurement metadata
    /// and is excluded.
    pub fn same_results(&self, other: &RunReport) -> bool {
        self.config == other.config
            && self.theta_error_series == other.theta_error_series
            && self.weight_error_series == other.weight_error_series
            && self.purge_events == other.purge_events
            && self.solve_times == other.solve_times
            && self.gamma_eigen_series == other.gamma_eigen_series
            && self.gram_lambda_series == other.gram_lambda_series
            && self.final_theta == other.final_theta
            && self.final_weights == other.final_weights
            && self.purge_count == other.purge_count
            && self.trajectory == other.trajectory
    }
}

enum Source {
    /// Integrate the benchmark closed loop while running.
    Live,
    /// Walk a prerecorded trajectory.
    Replay(Trajectory),
}

/// Runs the benchmark experiment live: the demonstrator is integrated step
/// by step and every estimator consumes the samples as they appear.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    run_with_source(cfg, Source::Live)
}

/// Runs the same loop over a prerecorded trajectory. The file must match
/// the configured step and cover the configured horizon.
pub fn run_from_trajectory(cfg: &ExperimentConfig, traj: Trajectory) -> Result<RunReport> {
    cfg.validate()?;
    let first = traj.get(0);
    if first.x.len() != 2 || first.u.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "trajectory has dimensions ({}, {}), the benchmark plant needs (2, 1)",
            first.x.len(),
            first.u.len()
        )));
    }
    if (traj.ts() - cfg.ts).abs() > 1e-9 * cfg.ts {
        return Err(Error::InvalidConfig(format!(
            "trajectory step {} does not match configured ts = {}",
            traj.ts(),
            cfg.ts
        )));
    }
    let needed = (cfg.t_end / cfg.ts).round() as usize;
    if traj.len() < needed + 1 {
        return Err(Error::InvalidConfig(format!(
            "trajectory has {} samples, the horizon needs {}",
            traj.len(),
            needed + 1
        )));
    }
    run_with_source(cfg, Source::Replay(traj))
}

fn run_with_source(cfg: &ExperimentConfig, source: Source) -> Result<RunReport> {
    let started = Instant::now();

    let spec = BenchmarkSpec::default();
    let model = benchmark::model_from_spec(&spec);
    let lib = benchmark::features();
    let theta_true = spec.theta_true();
    let w_true = spec.true_weights();
    let r1 = spec.r_weight;

    let ts = cfg.ts;
    let steps = (cfg.t_end / ts).round() as usize;
    let warmup_steps = ((cfg.tau1 + cfg.tau2) / ts).round() as usize;
    let eta_steps = (cfg.eta_window / ts).round() as usize;

    let mut estimator = ParamEstimator::new(
        model.basis_dim(),
        model.state_half_dim(),
        cfg.param_stack_capacity,
        cfg.k_theta,
        cfg.beta1,
        DMatrix::identity(model.basis_dim(), model.basis_dim()) * cfg.gamma0_scale,
        cfg.rank_threshold,
    )?;
    let mut stack = IrlStack::new(cfg.irl_stack_capacity, &lib, cfg.xi1, cfg.xi2, r1)?;
    let purge_policy = PurgePolicy {
        solve_cond_limit: cfg.kappa1,
        purge_cond_limit: cfg.kappa2,
        mode: match cfg.purge_mode {
            PurgeModeConfig::Metric => PurgeMode::Metric,
            PurgeModeConfig::Time => PurgeMode::Time,
        },
        epsilon_time: cfg.epsilon_time,
        w0: WeightEstimate::zeros(&lib, r1),
    };
    purge_policy.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let policy = benchmark::optimal_policy;

    let (mut traj, t0, mut x_live) = match &source {
        Source::Live => (
            Trajectory::new_on_grid(ts),
            0.0,
            DVector::from_vec(cfg.x0.clone()),
        ),
        Source::Replay(t) => (t.clone(), t.start_time(), DVector::zeros(2)),
    };

    let mut w = purge_policy.w0.clone();
    let mut trace: Vec<DMatrix<f64>> = Vec::with_capacity(steps + 1);
    let mut report = RunReport {
        config: cfg.clone(),
        theta_error_series: Vec::with_capacity(steps + 1),
        weight_error_series: Vec::with_capacity(steps + 1),
        purge_events: Vec::new(),
        solve_times: Vec::new(),
        gamma_eigen_series: Vec::with_capacity(steps + 1),
        gram_lambda_series: Vec::with_capacity(steps + 1),
        final_theta: Vec::new(),
        final_weights: Vec::new(),
        purge_count: 0,
        wall_time_s: 0.0,
        trajectory: Trajectory::new_on_grid(ts),
    };

    // Observed state range, for the query box.
    let mut range_lo = [f64::INFINITY; 2];
    let mut range_hi = [f64::NEG_INFINITY; 2];

    for i in 0..=steps {
        let t = t0 + i as f64 * ts;

        let (x_i, u_i) = match &source {
            Source::Live => {
                if x_live.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { t });
                }
                let u = policy(&x_live);
                traj.push_on_grid(TrajectorySample {
                    t,
                    x: x_live.clone(),
                    u: u.clone(),
                });
                (x_live.clone(), u)
            }
            Source::Replay(_) => {
                let s = traj.get(i);
                (s.x.clone(), s.u.clone())
            }
        };
        for d in 0..2 {
            range_lo[d] = range_lo[d].min(x_i[d]);
            range_hi[d] = range_hi[d].max(x_i[d]);
        }

        // Identification: windowed record, then one Euler step.
        if i >= warmup_steps {
            let record = integral_regressors(&traj, &model, t, cfg.tau1, cfg.tau2)?;
            estimator.stack_try_insert(record.into());
        }
        estimator.step(ts)?;
        trace.push(estimator.theta_hat().clone());

        let eta_now = if i >= eta_steps {
            eval_eta_recorded(&traj, &model, &trace, t, cfg.eta_window)?
        } else {
            f64::INFINITY
        };

        // Reward regression row from the current sample.
        let row = build_row(
            &x_i,
            &u_i,
            estimator.theta_hat(),
            eta_now,
            &lib,
            &model,
            r1,
            t,
        )?;
        stack.try_insert(row);

        // Gate the solve, decide on a purge.
        let kappa_pre = stack.condition_number();
        let eta_bar_pre = stack.min_stored_eta();
        let outcome = purge_step(&mut stack, &purge_policy, eta_now, t, &w);
        w = outcome.w;
        if outcome.solved {
            report.solve_times.push(t);
        }
        if outcome.purged {
            report.purge_events.push(PurgeEvent {
                t,
                count: stack.purge_count(),
                eta_bar: eta_bar_pre,
                kappa: kappa_pre,
            });
            for _ in 0..cfg.query_count {
                let x_query = sample_query_state(&mut rng, &range_lo, &range_hi);
                let sample = query_demonstrator(t, x_query, &policy);
                let query_row = build_row(
                    &sample.x,
                    &sample.u,
                    estimator.theta_hat(),
                    eta_now,
                    &lib,
                    &model,
                    r1,
                    t,
                )?;
                stack.try_insert(query_row);
            }
        }

        // Series bookkeeping.
        let theta_vals = flatten_row_major(estimator.theta_hat());
        let theta_err = (estimator.theta_hat() - &theta_true).norm();
        report.theta_error_series.push(SeriesPoint {
            t,
            err_norm: theta_err,
            values: theta_vals,
        });
        let w_stacked = w.stacked();
        report.weight_error_series.push(SeriesPoint {
            t,
            err_norm: (&w_stacked - &w_true).norm(),
            values: w_stacked.iter().copied().collect(),
        });
        let (gamma_lo, gamma_hi) = estimator.gamma_eigen_bounds();
        report.gamma_eigen_series.push((t, gamma_lo, gamma_hi));
        report
            .gram_lambda_series
            .push((t, estimator.gram_lambda_min()));

        if i < steps {
            if let Source::Live = source {
                x_live = rk4_closed_loop_step(&model, &policy, &x_live, ts)?;
            }
        }
    }

    report.final_theta = flatten_row_major(estimator.theta_hat());
    report.final_weights = w.stacked().iter().copied().collect();
    report.purge_count = stack.purge_count();
    report.trajectory = traj;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

fn sample_query_state(rng: &mut ChaCha8Rng, lo: &[f64; 2], hi: &[f64; 2]) -> DVector<f64> {
    let mut x = DVector::zeros(2);
    for d in 0..2 {
        let center = 0.5 * (lo[d] + hi[d]);
        let half = 0.5 * (hi[d] - lo[d]) * 1.2;
        x[d] = center + (2.0 * rng.random::<f64>() - 1.0) * half;
    }
    x
}

fn flatten_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}
