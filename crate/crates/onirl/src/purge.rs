//! Weight-update gating and history-stack purging.
//!
//! Regression rows are only as good as the dynamics estimate they were built
//! with. As identification improves, rows captured earlier become stale, so
//! the stack is emptied ("purged") whenever the current model-quality metric
//! beats every stored row's tag, and the weight estimate is only refreshed
//! while the stack is well conditioned. Between refreshes the previous
//! weights are held unchanged.

use nalgebra::DVector;

use crate::dynamics::TrajectorySample;
use crate::irl::{IrlStack, WeightEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PurgeMode {
    /// Purge when the current quality metric strictly beats every stored tag.
    Metric,
    /// Purge on a fixed time interval since the previous purge.
    Time,
}

/// Thresholds and mode for gating weight updates and purges.
#[derive(Debug, Clone)]
pub struct PurgePolicy {
    /// Largest acceptable condition number for a weight update.
    pub solve_cond_limit: f64,
    /// Largest acceptable condition number for a purge.
    pub purge_cond_limit: f64,
    pub mode: PurgeMode,
    /// Minimum spacing between purges in time mode, seconds.
    pub epsilon_time: f64,
    /// Initial weight guess held until the first gated solve.
    pub w0: WeightEstimate,
}

impl PurgePolicy {
    pub fn validate(&self) -> crate::error::Result<()> {
        if !(self.solve_cond_limit > 0.0) || !(self.purge_cond_limit > 0.0) {
            return Err(crate::error::Error::invalid(
                "condition-number thresholds must be positive",
            ));
        }
        if self.mode == PurgeMode::Time && !(self.epsilon_time > 0.0) {
            return Err(crate::error::Error::invalid(
                "epsilon_time must be positive in time mode",
            ));
        }
        Ok(())
    }
}

/// What one gate-and-purge pass did.
#[derive(Debug, Clone)]
pub struct PurgeStepOutcome {
    pub w: WeightEstimate,
    pub purged: bool,
    /// Whether the weights came from a fresh solve this pass.
    pub solved: bool,
}

/// One gate-and-purge pass over the stack at time `t`.
///
/// First the weight update: if the stack's condition number is below the
/// solve limit and the most recent insertion attempt was accepted, the
/// weights are re-solved; any solve failure (a transiently rank-deficient
/// stack right after a purge is normal) falls back to holding `w_prev`.
/// Then the purge decision: in metric mode the stack is emptied when its
/// condition number is below the purge limit and `eta_now` is strictly
/// smaller than every stored tag; in time mode when more than
/// `epsilon_time` has elapsed since the previous purge. Purging never
/// touches the weight estimate.
///
/// `eta_now` should be the current model-quality metric, `+inf` while the
/// metric window has not filled.
pub fn purge_step(
    stack: &mut IrlStack,
    policy: &PurgePolicy,
    eta_now: f64,
    t: f64,
    w_prev: &WeightEstimate,
) -> PurgeStepOutcome {
    let kappa = stack.condition_number();

    let mut solved = false;
    let w = if kappa < policy.solve_cond_limit && stack.last_insert_accepted() {
        match stack.solve_weights() {
            Ok(w) => {
                solved = true;
                w
            }
            Err(_) => w_prev.clone(),
        }
    } else {
        w_prev.clone()
    };

    let trigger = match policy.mode {
        PurgeMode::Metric => kappa < policy.purge_cond_limit && eta_now < stack.min_stored_eta(),
        PurgeMode::Time => match stack.last_purge_t {
            Some(last) => t - last > policy.epsilon_time,
            None => {
                // Count from the first observed instant.
                stack.last_purge_t = Some(t);
                false
            }
        },
    };

    // Emptying an already-empty stack is not a transition; don't count it.
    let purged = trigger && !stack.is_empty();
    if purged {
        stack.purge_now();
        stack.last_purge_t = Some(t);
    } else if trigger {
        stack.last_purge_t = Some(t);
    }

    PurgeStepOutcome { w, purged, solved }
}

/// Asks the demonstrator for its control at a chosen state, packaging the
/// response as a sample timestamped `t`. The caller is responsible for
/// drawing `x_query` from its configured query region and for routing the
/// sample through the stack's selection logic.
pub fn query_demonstrator(
    t: f64,
    x_query: DVector<f64>,
    demonstrator: &dyn Fn(&DVector<f64>) -> DVector<f64>,
) -> TrajectorySample {
    let u = demonstrator(&x_query);
    TrajectorySample { t, x: x_query, u }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::irl::{build_row, FeatureLibrary, IrlStack};
    use nalgebra::{DMatrix, DVector};

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn metric_policy(lib: &FeatureLibrary) -> PurgePolicy {
        PurgePolicy {
            solve_cond_limit: 1e6,
            purge_cond_limit: 1e6,
            mode: PurgeMode::Metric,
            epsilon_time: 2.0,
            w0: WeightEstimate::zeros(lib, 1.0),
        }
    }

    fn fill_stack(stack: &mut IrlStack, eta: f64) {
        let model = benchmark::model();
        let lib = benchmark::features();
        let states = [
            (1.0, 0.3),
            (-0.8, 1.2),
            (0.4, -1.5),
            (1.7, 0.9),
            (-1.2, -0.6),
            (0.2, 1.9),
        ];
        for (a, b) in states {
            let x = v2(a, b);
            let u = benchmark::optimal_policy(&x);
            let row = build_row(&x, &u, model.theta_true(), eta, &lib, &model, 1.0, 0.0).unwrap();
            stack.try_insert(row);
        }
    }

    #[test]
    fn initial_step_holds_the_initial_guess() {
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let policy = metric_policy(&lib);
        let out = purge_step(&mut stack, &policy, f64::INFINITY, 0.0, &policy.w0);
        assert_eq!(out.w, policy.w0);
        assert!(!out.purged);
        assert!(!out.solved);
        assert_eq!(stack.purge_count(), 0);
    }

    #[test]
    fn improved_metric_empties_the_stack() {
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let policy = metric_policy(&lib);
        fill_stack(&mut stack, 0.5);
        let out = purge_step(&mut stack, &policy, 0.1, 1.0, &policy.w0);
        assert!(out.purged);
        assert!(stack.is_empty());
        assert_eq!(stack.purge_count(), 1);
    }

    #[test]
    fn equal_metric_does_not_purge() {
        // The comparison is strict: eta_now == min stored tag holds the stack.
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let policy = metric_policy(&lib);
        fill_stack(&mut stack, 0.5);
        let out = purge_step(&mut stack, &policy, 0.5, 1.0, &policy.w0);
        assert!(!out.purged);
        assert_eq!(stack.purge_count(), 0);
        assert!(!stack.is_empty());
    }

    #[test]
    fn ill_conditioned_stack_blocks_the_purge() {
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let mut policy = metric_policy(&lib);
        policy.purge_cond_limit = 1.5; // below any realistic stack
        fill_stack(&mut stack, 0.5);
        let out = purge_step(&mut stack, &policy, 0.1, 1.0, &policy.w0);
        assert!(!out.purged);
    }

    #[test]
    fn weights_update_only_through_the_gate() {
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let mut policy = metric_policy(&lib);
        fill_stack(&mut stack, 0.5);

        // Gate closed: hold.
        policy.solve_cond_limit = 1.0;
        let held = purge_step(&mut stack, &policy, f64::INFINITY, 1.0, &policy.w0);
        assert_eq!(held.w, policy.w0);
        assert!(!held.solved);

        // Gate open: the exact rows give the true weights.
        policy.solve_cond_limit = 1e9;
        let solved = purge_step(&mut stack, &policy, f64::INFINITY, 1.0, &policy.w0);
        assert!(solved.solved);
        let expected = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 1.0, 1.0, 0.0, 1.0]);
        assert!((solved.w.stacked() - expected).norm() < 1e-8);
    }

    #[test]
    fn weights_are_held_bitwise_across_a_purge() {
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let mut policy = metric_policy(&lib);
        policy.solve_cond_limit = 1.0; // never solve
        fill_stack(&mut stack, 0.5);
        let w_before = WeightEstimate {
            w_v: DVector::from_vec(vec![0.1, 0.2, 0.3]),
            w_q: DVector::from_vec(vec![0.4, 0.5]),
            w_r_minus: DVector::zeros(0),
            r1: 1.0,
        };
        let out = purge_step(&mut stack, &policy, 0.01, 2.0, &w_before);
        assert!(out.purged);
        assert_eq!(out.w, w_before);
    }

    #[test]
    fn time_mode_purges_on_the_interval() {
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let mut policy = metric_policy(&lib);
        policy.mode = PurgeMode::Time;
        policy.epsilon_time = 1.0;

        fill_stack(&mut stack, 0.5);
        let p0 = purge_step(&mut stack, &policy, f64::INFINITY, 0.0, &policy.w0);
        assert!(!p0.purged, "first step only anchors the clock");
        let p1 = purge_step(&mut stack, &policy, f64::INFINITY, 0.5, &policy.w0);
        assert!(!p1.purged);
        let p2 = purge_step(&mut stack, &policy, f64::INFINITY, 1.5, &policy.w0);
        assert!(p2.purged, "interval elapsed, stack should be purged");
        assert_eq!(stack.purge_count(), 1);
    }

    #[test]
    fn queries_return_the_demonstrator_response() {
        let s = query_demonstrator(3.0, v2(0.0, 0.0), &benchmark::optimal_policy);
        assert_eq!(s.u[0], 0.0);
        let s = query_demonstrator(3.0, v2(0.0, 1.0), &benchmark::optimal_policy);
        assert_eq!(s.u[0], -3.0);
        assert_eq!(s.t, 3.0);
    }

    #[test]
    fn a_query_batch_fills_a_rank_sufficient_stack() {
        // Twenty uniform queries are far more than enough to span the five
        // unknowns of a capacity-5 stack.
        let model = benchmark::model();
        let lib = benchmark::features();
        let mut stack = IrlStack::new(5, &lib, 1.0, 1e-6, 1.0).unwrap();
        let mut seed = 0xd1342543de82ef95u64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            4.0 * ((seed >> 11) as f64 / (1u64 << 53) as f64) - 2.0
        };
        let theta_hat = DMatrix::zeros(3, 1); // rows need no true parameters
        for _ in 0..20 {
            let sample = query_demonstrator(0.0, v2(next(), next()), &benchmark::optimal_policy);
            let row = build_row(
                &sample.x, &sample.u, &theta_hat, 1.0, &lib, &model, 1.0, 0.0,
            )
            .unwrap();
            stack.try_insert(row);
        }
        assert!(stack.is_full());
        let (sigma, _) = stack.assemble();
        let sv = sigma.svd(false, false).singular_values;
        assert!(
            sv.min() > 1e-8 * sv.max(),
            "query stack is rank deficient: smin = {:.3e}",
            sv.min()
        );
    }
}
