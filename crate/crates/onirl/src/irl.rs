//! Reward and value recovery by minimizing an inverse Bellman residual.
//!
//! With the demonstrator assumed optimal, the Hamilton-Jacobi-Bellman
//! equation holds along its trajectory. Evaluating that equation with
//! parameterized value and cost functions yields a residual that is linear
//! in the unknown weights; a second linear relation comes from the
//! closed-form optimal controller. One control weight (`r1`) is taken as
//! known, which removes both the trivial all-zero solution and the scaling
//! ambiguity of reward recovery.
//!
//! Per retained sample the module builds one Bellman row plus `m` controller
//! rows. Rows are kept in a bounded stack curated by condition number; the
//! weights are the least-squares solution of the stacked system against the
//! known-weight right-hand side, computed by orthogonal factorization.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::linalg::spd_condition_number;

type FeatFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type GradFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Known feature maps for the value function and the running cost.
///
/// Control-cost features are fixed to elementwise squares of the control,
/// matching a diagonal quadratic control penalty.
pub struct FeatureLibrary {
    value_dim: usize,
    state_cost_dim: usize,
    control_dim: usize,
    sigma_v: FeatFn,
    grad_sigma_v: GradFn,
    sigma_q: FeatFn,
}

impl FeatureLibrary {
    pub fn new(
        value_dim: usize,
        state_cost_dim: usize,
        control_dim: usize,
        sigma_v: FeatFn,
        grad_sigma_v: GradFn,
        sigma_q: FeatFn,
    ) -> Self {
        FeatureLibrary {
            value_dim,
            state_cost_dim,
            control_dim,
            sigma_v,
            grad_sigma_v,
            sigma_q,
        }
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn state_cost_dim(&self) -> usize {
        self.state_cost_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Number of unknown weights: value + state-cost + all but the first
    /// control weight.
    pub fn weight_dim(&self) -> usize {
        self.value_dim + self.state_cost_dim + self.control_dim - 1
    }

    pub fn sigma_v(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.sigma_v)(x)
    }

    /// Jacobian of the value features, `value_dim x 2n`.
    pub fn grad_sigma_v(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.grad_sigma_v)(x)
    }

    pub fn sigma_q(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.sigma_q)(x)
    }

    /// Control-cost features: elementwise squares.
    pub fn sigma_u(&self, u: &DVector<f64>) -> DVector<f64> {
        u.map(|ui| ui * ui)
    }
}

/// Drift estimate `[q; f_known(x,u) + theta_hat' basis(x,u)]` used wherever
/// the true dynamics are needed but only the estimate is available.
pub fn y_hat(
    model: &DynamicsModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta_hat: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = model.state_half_dim();
    if x.len() != 2 * n {
        return Err(Error::invalid("state dimension mismatch"));
    }
    if theta_hat.nrows() != model.basis_dim() || theta_hat.ncols() != n {
        return Err(Error::invalid("theta_hat dimension mismatch"));
    }
    let accel = model.f_known(x, u) + theta_hat.transpose() * model.basis(x, u);
    let mut out = DVector::zeros(2 * n);
    out.rows_mut(0, n).copy_from(&x.rows(n, n));
    out.rows_mut(n, n).copy_from(&accel);
    Ok(out)
}

/// Hamilton-Jacobi-Bellman residual at one sample for a full weight vector
/// `[w_v; w_q; w_r]` (all control weights included).
pub fn inverse_bellman_error(
    x: &DVector<f64>,
    u: &DVector<f64>,
    w_full: &DVector<f64>,
    theta_hat: &DMatrix<f64>,
    lib: &FeatureLibrary,
    model: &DynamicsModel,
) -> Result<f64> {
    let (p, l, m) = (lib.value_dim, lib.state_cost_dim, lib.control_dim);
    if w_full.len() != p + l + m {
        return Err(Error::invalid(format!(
            "weight vector must have length {}, got {}",
            p + l + m,
            w_full.len()
        )));
    }
    if u.len() != m {
        return Err(Error::invalid("control dimension mismatch"));
    }
    let yh = y_hat(model, x, u, theta_hat)?;
    let value_term = w_full.rows(0, p).dot(&(lib.grad_sigma_v(x) * yh));
    let state_term = w_full.rows(p, l).dot(&lib.sigma_q(x));
    let control_term = w_full.rows(p + l, m).dot(&lib.sigma_u(u));
    Ok(value_term + state_term + control_term)
}

/// One sample's worth of regression data: the Bellman row, the controller
/// rows, and the right-hand-side slice contributed by the known weight.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlRow {
    /// `[grad_sigma_v * y_hat; sigma_q; sigma_u minus first]`.
    pub bellman_row: DVector<f64>,
    /// `m` rows: input-gain-projected value gradients in the value columns,
    /// zeros in the state-cost columns, `2*u_j` on the trailing diagonal.
    pub controller_rows: DMatrix<f64>,
    /// `[r1 * u_1^2; 2 r1 u_1; zeros(m-1)]`.
    pub rhs: DVector<f64>,
    pub t: f64,
    /// Model-quality metric at capture time.
    pub eta: f64,
}

impl IrlRow {
    /// Matrix content only (ignores time and quality tags), used to detect
    /// candidates that cannot change the stacked system.
    fn same_matrix_rows(&self, other: &IrlRow) -> bool {
        self.bellman_row == other.bellman_row
            && self.controller_rows == other.controller_rows
            && self.rhs == other.rhs
    }
}

/// Builds the regression rows for one `(x, u)` sample under the current
/// dynamics estimate.
#[allow(clippy::too_many_arguments)]
pub fn build_row(
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta_hat: &DMatrix<f64>,
    eta: f64,
    lib: &FeatureLibrary,
    model: &DynamicsModel,
    r1: f64,
    t: f64,
) -> Result<IrlRow> {
    let (p, l, m) = (lib.value_dim, lib.state_cost_dim, lib.control_dim);
    if u.len() != m || m != model.control_dim() {
        return Err(Error::invalid("control dimension mismatch"));
    }
    let cols = lib.weight_dim();

    let grad = lib.grad_sigma_v(x);
    let yh = y_hat(model, x, u, theta_hat)?;
    let sigma_u = lib.sigma_u(u);

    let mut bellman_row = DVector::zeros(cols);
    bellman_row.rows_mut(0, p).copy_from(&(&grad * yh));
    bellman_row.rows_mut(p, l).copy_from(&lib.sigma_q(x));
    if m > 1 {
        bellman_row
            .rows_mut(p + l, m - 1)
            .copy_from(&sigma_u.rows(1, m - 1));
    }

    // Input-gain projection of the value-feature gradients, one row per
    // control channel.
    let sigma_g = model.g_eff(x).transpose() * grad.transpose();
    let mut controller_rows = DMatrix::zeros(m, cols);
    controller_rows.columns_mut(0, p).copy_from(&sigma_g);
    for j in 1..m {
        controller_rows[(j, p + l + j - 1)] = 2.0 * u[j];
    }

    let mut rhs = DVector::zeros(1 + m);
    rhs[0] = r1 * sigma_u[0];
    rhs[1] = 2.0 * r1 * u[0];

    Ok(IrlRow {
        bellman_row,
        controller_rows,
        rhs,
        t,
        eta,
    })
}

/// Bounded stack of regression rows curated by condition number.
///
/// While below capacity every offered row is accepted. Once full, a
/// candidate replaces the stored row whose substitution gives the smallest
/// condition number of the stacked normal matrix, provided that number
/// improves on the current one by at least the factor `cond_accept_ratio`
/// and the replaced right-hand side keeps norm at least `rhs_floor`.
pub struct IrlStack {
    rows: Vec<IrlRow>,
    capacity: usize,
    value_dim: usize,
    state_cost_dim: usize,
    control_dim: usize,
    pub cond_accept_ratio: f64,
    pub rhs_floor: f64,
    pub r1: f64,
    last_insert_accepted: bool,
    purge_count: u32,
    pub(crate) last_purge_t: Option<f64>,
}

impl IrlStack {
    pub fn new(
        capacity: usize,
        lib: &FeatureLibrary,
        cond_accept_ratio: f64,
        rhs_floor: f64,
        r1: f64,
    ) -> Result<Self> {
        // Each entry contributes 1 + m matrix rows; the full stack must at
        // least be able to span the unknowns.
        if capacity * (1 + lib.control_dim()) < lib.weight_dim() {
            return Err(Error::invalid(format!(
                "stack capacity {capacity} cannot span the {} unknowns",
                lib.weight_dim()
            )));
        }
        if !(cond_accept_ratio >= 0.0) {
            return Err(Error::invalid("cond_accept_ratio must be >= 0"));
        }
        if !(rhs_floor > 0.0) {
            return Err(Error::invalid("rhs_floor must be > 0"));
        }
        if !(r1 > 0.0) {
            return Err(Error::invalid("the known control weight must be > 0"));
        }
        Ok(IrlStack {
            rows: Vec::with_capacity(capacity),
            capacity,
            value_dim: lib.value_dim(),
            state_cost_dim: lib.state_cost_dim(),
            control_dim: lib.control_dim(),
            cond_accept_ratio,
            rhs_floor,
            r1,
            last_insert_accepted: false,
            purge_count: 0,
            last_purge_t: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rows(&self) -> &[IrlRow] {
        &self.rows
    }

    /// Outcome of the most recent insertion attempt.
    pub fn last_insert_accepted(&self) -> bool {
        self.last_insert_accepted
    }

    /// Number of times the stack has been emptied.
    pub fn purge_count(&self) -> u32 {
        self.purge_count
    }

    fn weight_dim(&self) -> usize {
        self.value_dim + self.state_cost_dim + self.control_dim - 1
    }

    /// Normal matrix of the stacked rows, accumulated in storage order;
    /// `replace` substitutes one stored row by the candidate.
    fn normal_matrix(&self, replace: Option<(usize, &IrlRow)>) -> DMatrix<f64> {
        let k = self.weight_dim();
        let mut a = DMatrix::zeros(k, k);
        for (i, stored) in self.rows.iter().enumerate() {
            let row = match replace {
                Some((j, cand)) if j == i => cand,
                _ => stored,
            };
            a.ger(1.0, &row.bellman_row, &row.bellman_row, 1.0);
            for c in 0..row.controller_rows.nrows() {
                let cr = row.controller_rows.row(c).transpose();
                a.ger(1.0, &cr, &cr, 1.0);
            }
        }
        a
    }

    fn rhs_norm_with(&self, replace: Option<(usize, &IrlRow)>) -> f64 {
        let mut sq = 0.0;
        for (i, stored) in self.rows.iter().enumerate() {
            let row = match replace {
                Some((j, cand)) if j == i => cand,
                _ => stored,
            };
            sq += row.rhs.norm_squared();
        }
        sq.sqrt()
    }

    /// Condition number of the stacked normal matrix; infinite while the
    /// stack cannot span the unknowns.
    pub fn condition_number(&self) -> f64 {
        spd_condition_number(&self.normal_matrix(None))
    }

    pub fn rhs_norm(&self) -> f64 {
        self.rhs_norm_with(None)
    }

    /// Smallest stored quality tag; infinite on an empty stack.
    pub fn min_stored_eta(&self) -> f64 {
        self.rows
            .iter()
            .fold(f64::INFINITY, |acc, r| acc.min(r.eta))
    }

    /// Offers a row to the stack, returning whether it was kept.
    pub fn try_insert(&mut self, row: IrlRow) -> bool {
        if self.rows.len() < self.capacity {
            self.rows.push(row);
            self.last_insert_accepted = true;
            return true;
        }

        let kappa_old = self.condition_number();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.rows.len() {
            // Bit-identical matrix content reproduces the same stacked
            // system, so its condition number is exactly the current one.
            let kappa_i = if self.rows[i].same_matrix_rows(&row) {
                kappa_old
            } else {
                spd_condition_number(&self.normal_matrix(Some((i, &row))))
            };
            if kappa_i < self.cond_accept_ratio * kappa_old
                && self.rhs_norm_with(Some((i, &row))) >= self.rhs_floor
                && best.is_none_or(|(_, b)| kappa_i < b)
            {
                best = Some((i, kappa_i));
            }
        }
        match best {
            Some((i, _)) => {
                self.rows[i] = row;
                self.last_insert_accepted = true;
                true
            }
            None => {
                self.last_insert_accepted = false;
                false
            }
        }
    }

    /// Stacks the retained rows into the full regression matrix and
    /// right-hand vector: per sample, the Bellman row followed by the
    /// controller rows.
    pub fn assemble(&self) -> (DMatrix<f64>, DVector<f64>) {
        let k = self.weight_dim();
        let m = self.control_dim;
        let block = 1 + m;
        let mut sigma = DMatrix::zeros(self.rows.len() * block, k);
        let mut rhs = DVector::zeros(self.rows.len() * block);
        for (i, row) in self.rows.iter().enumerate() {
            sigma
                .row_mut(i * block)
                .copy_from(&row.bellman_row.transpose());
            sigma
                .rows_mut(i * block + 1, m)
                .copy_from(&row.controller_rows);
            rhs.rows_mut(i * block, block).copy_from(&row.rhs);
        }
        (sigma, rhs)
    }

    /// Least-squares weight estimate from the stacked system.
    ///
    /// Solved through a singular value decomposition of the stacked matrix
    /// rather than by inverting the normal matrix. Fails when the matrix is
    /// rank deficient (relative singular-value threshold `1e-8`) or when the
    /// right-hand side is below the configured floor.
    pub fn solve_weights(&self) -> Result<WeightEstimate> {
        let (sigma, rhs) = self.assemble();
        let k = self.weight_dim();

        let rhs_norm = rhs.norm();
        if rhs_norm < self.rhs_floor {
            return Err(Error::DegenerateRhs {
                norm: rhs_norm,
                floor: self.rhs_floor,
            });
        }
        if sigma.nrows() < k {
            return Err(Error::RankDeficient {
                smin: 0.0,
                tol: 0.0,
            });
        }

        let svd = sigma.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let tol = 1e-8 * smax;
        if !(smin > tol) {
            return Err(Error::RankDeficient { smin, tol });
        }

        let solution = svd
            .solve(&(-rhs), 0.0)
            .map_err(|e| Error::invalid(format!("least-squares solve failed: {e}")))?;
        let w = solution.column(0).clone_owned();

        let (p, l, m) = (self.value_dim, self.state_cost_dim, self.control_dim);
        Ok(WeightEstimate {
            w_v: w.rows(0, p).clone_owned(),
            w_q: w.rows(p, l).clone_owned(),
            w_r_minus: w.rows(p + l, m - 1).clone_owned(),
            r1: self.r1,
        })
    }

    /// Empties the stack and counts the purge.
    pub(crate) fn purge_now(&mut self) {
        self.rows.clear();
        self.purge_count += 1;
    }
}

/// Recovered weights, split by role, with the known first control weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEstimate {
    pub w_v: DVector<f64>,
    pub w_q: DVector<f64>,
    pub w_r_minus: DVector<f64>,
    pub r1: f64,
}

impl WeightEstimate {
    pub fn zeros(lib: &FeatureLibrary, r1: f64) -> Self {
        WeightEstimate {
            w_v: DVector::zeros(lib.value_dim()),
            w_q: DVector::zeros(lib.state_cost_dim()),
            w_r_minus: DVector::zeros(lib.control_dim() - 1),
            r1,
        }
    }

    /// Unknown weights in solve order `[w_v; w_q; w_r_minus]`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.w_v.len() + self.w_q.len() + self.w_r_minus.len());
        out.rows_mut(0, self.w_v.len()).copy_from(&self.w_v);
        out.rows_mut(self.w_v.len(), self.w_q.len())
            .copy_from(&self.w_q);
        out.rows_mut(self.w_v.len() + self.w_q.len(), self.w_r_minus.len())
            .copy_from(&self.w_r_minus);
        out
    }

    /// Full weight vector `[w_v; w_q; r1; w_r_minus]` including the known
    /// control weight, as consumed by the Bellman residual.
    pub fn full(&self) -> DVector<f64> {
        let m = 1 + self.w_r_minus.len();
        let base = self.w_v.len() + self.w_q.len();
        let mut out = DVector::zeros(base + m);
        out.rows_mut(0, self.w_v.len()).copy_from(&self.w_v);
        out.rows_mut(self.w_v.len(), self.w_q.len())
            .copy_from(&self.w_q);
        out[base] = self.r1;
        for j in 0..self.w_r_minus.len() {
            out[base + 1 + j] = self.w_r_minus[j];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::dynamics::simulate;
    use approx::assert_relative_eq;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn u1(a: f64) -> DVector<f64> {
        DVector::from_vec(vec![a])
    }

    fn true_full_weights() -> DVector<f64> {
        // [v1, v2, v3, q1, q2, r1]
        DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 1.0, 1.0, 0.0, 1.0, 1.0])
    }

    /// Central finite differences of the value features; the analytic
    /// Jacobian must match this on a grid.
    fn fd_jacobian(lib: &FeatureLibrary, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let p = lib.value_dim();
        let mut jac = DMatrix::zeros(p, x.len());
        for d in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[d] += h;
            minus[d] -= h;
            let diff = (lib.sigma_v(&plus) - lib.sigma_v(&minus)) / (2.0 * h);
            jac.column_mut(d).copy_from(&diff);
        }
        jac
    }

    #[test]
    fn control_cost_features_are_squares() {
        let lib = benchmark::features();
        assert_eq!(lib.sigma_u(&u1(0.0))[0], 0.0);
        for u in [-3.0, -0.5, 0.2, 4.0] {
            let s = lib.sigma_u(&u1(u));
            assert!(s[0] >= 0.0);
            assert_eq!(s[0], u * u);
        }
    }

    #[test]
    fn residual_vanishes_at_origin_for_any_weights() {
        let model = benchmark::model();
        let lib = benchmark::features();
        let w = DVector::from_vec(vec![3.0, -1.0, 2.0, 5.0, -4.0, 9.0]);
        let delta = inverse_bellman_error(
            &v2(0.0, 0.0),
            &u1(0.0),
            &w,
            model.theta_true(),
            &lib,
            &model,
        )
        .unwrap();
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn residual_vanishes_at_true_weights_and_parameters() {
        let model = benchmark::model();
        let lib = benchmark::features();
        let x = v2(0.3, -0.7);
        let u = benchmark::optimal_policy(&x);
        let delta = inverse_bellman_error(
            &x,
            &u,
            &true_full_weights(),
            model.theta_true(),
            &lib,
            &model,
        )
        .unwrap();
        assert!(delta.abs() <= 1e-10, "residual {delta:.3e}");
    }

    #[test]
    fn residual_detects_a_wrong_dynamics_estimate() {
        let model = benchmark::model();
        let lib = benchmark::features();
        let x = v2(0.3, -0.7);
        let u = benchmark::optimal_policy(&x);
        let zero_theta = DMatrix::zeros(3, 1);
        let delta =
            inverse_bellman_error(&x, &u, &true_full_weights(), &zero_theta, &lib, &model).unwrap();
        assert!(delta.abs() > 0.01, "residual {delta:.3e} too small");
    }

    #[test]
    fn row_shapes_match_the_unknown_count() {
        let model = benchmark::model();
        let lib = benchmark::features();
        let row = build_row(
            &v2(0.4, -0.2),
            &u1(0.6),
            model.theta_true(),
            1.0,
            &lib,
            &model,
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(row.bellman_row.len(), 5);
        assert_eq!(row.controller_rows.shape(), (1, 5));
        assert_eq!(row.rhs.len(), 2);
    }

    #[test]
    fn controller_row_on_the_velocity_axis() {
        // At x1 = 0 only the x2^2 feature has a nonzero gradient, so the
        // gain-projected row is (0, 0, 6*x2, 0, 0) and the rhs pairs 2*u.
        let model = benchmark::model();
        let lib = benchmark::features();
        for x2 in [-1.3, 0.4, 2.0] {
            let x = v2(0.0, x2);
            let u = u1(0.77);
            let row = build_row(&x, &u, model.theta_true(), 0.0, &lib, &model, 1.0, 0.0).unwrap();
            let expected = [0.0, 0.0, 6.0 * x2, 0.0, 0.0];
            for (c, e) in expected.iter().enumerate() {
                assert_relative_eq!(row.controller_rows[(0, c)], *e, epsilon = 1e-14);
            }
            assert_relative_eq!(row.rhs[1], 2.0 * 0.77, epsilon = 1e-15);

            // Cross-check the projection against a finite-difference Jacobian.
            let fd = fd_jacobian(&lib, &x, 1e-5);
            let sigma_g_fd = model.g_eff(&x).transpose() * fd.transpose();
            for c in 0..3 {
                assert_relative_eq!(
                    row.controller_rows[(0, c)],
                    sigma_g_fd[(0, c)],
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn multi_control_rows_carry_the_trailing_diagonal() {
        // Synthetic two-control plant: the second and later control channels
        // get their doubled control value in the trailing weight columns,
        // zero right-hand side.
        let model = DynamicsModel::new(
            1,
            2,
            Box::new(|_x, u| DVector::from_vec(vec![u[0] + 0.5 * u[1]])),
            Box::new(|x, _u| x.clone()),
            DMatrix::zeros(2, 1),
            Box::new(|_x| DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 2.0])),
            Box::new(|_x, _u| DVector::zeros(1)),
        )
        .unwrap();
        let lib = FeatureLibrary::new(
            2,
            1,
            2,
            Box::new(|x| DVector::from_vec(vec![x[0] * x[0], x[1] * x[1]])),
            Box::new(|x| DMatrix::from_row_slice(2, 2, &[2.0 * x[0], 0.0, 0.0, 2.0 * x[1]])),
            Box::new(|x| DVector::from_vec(vec![x[0] * x[0]])),
        );
        assert_eq!(lib.weight_dim(), 4); // 2 value + 1 state cost + 1 extra control

        let x = v2(0.7, -1.1);
        let u = DVector::from_vec(vec![0.4, -0.9]);
        let r1 = 2.5;
        let row = build_row(&x, &u, &DMatrix::zeros(2, 1), 0.0, &lib, &model, r1, 0.0).unwrap();

        assert_eq!(row.bellman_row.len(), 4);
        assert_eq!(row.controller_rows.shape(), (2, 4));
        assert_eq!(row.rhs.len(), 3);

        // Squared second control lands at the end of the Bellman row.
        assert_relative_eq!(row.bellman_row[3], u[1] * u[1], epsilon = 1e-15);
        // State-cost column of every controller row is zero.
        assert_eq!(row.controller_rows[(0, 2)], 0.0);
        assert_eq!(row.controller_rows[(1, 2)], 0.0);
        // First controller row has no trailing-diagonal entry; the second
        // carries 2*u2.
        assert_eq!(row.controller_rows[(0, 3)], 0.0);
        assert_relative_eq!(row.controller_rows[(1, 3)], 2.0 * u[1], epsilon = 1e-15);
        // Gain-projected value gradients fill the leading columns.
        let sigma_g = model.g_eff(&x).transpose() * lib.grad_sigma_v(&x).transpose();
        for j in 0..2 {
            for c in 0..2 {
                assert_relative_eq!(
                    row.controller_rows[(j, c)],
                    sigma_g[(j, c)],
                    epsilon = 1e-14
                );
            }
        }
        // Known-weight side: [r1*u1^2, 2*r1*u1, 0].
        assert_relative_eq!(row.rhs[0], r1 * u[0] * u[0], epsilon = 1e-15);
        assert_relative_eq!(row.rhs[1], 2.0 * r1 * u[0], epsilon = 1e-15);
        assert_eq!(row.rhs[2], 0.0);
    }

    #[test]
    fn analytic_jacobian_matches_central_differences_on_a_grid() {
        let lib = benchmark::features();
        for i in 0..21 {
            for j in 0..21 {
                let x = v2(-2.0 + 0.2 * i as f64, -2.0 + 0.2 * j as f64);
                let analytic = lib.grad_sigma_v(&x);
                let fd = fd_jacobian(&lib, &x, 1e-4);
                let err = (analytic - fd).abs().max();
                assert!(err <= 1e-6, "jacobian mismatch {err:.3e} at {x:?}");
            }
        }
    }

    #[test]
    fn true_weights_annihilate_the_stacked_rows() {
        let model = benchmark::model();
        let lib = benchmark::features();
        let x0 = v2(1.0, 1.0);
        let traj = simulate(&model, &benchmark::optimal_policy, &x0, 0.01, 5.0).unwrap();
        let w_true = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 1.0, 1.0, 0.0, 1.0]);
        for s in traj.samples().iter().step_by(7) {
            let row =
                build_row(&s.x, &s.u, model.theta_true(), 0.0, &lib, &model, 1.0, s.t).unwrap();
            let bellman = row.bellman_row.dot(&w_true) + row.rhs[0];
            let controller = (&row.controller_rows * &w_true)[0] + row.rhs[1];
            assert!(
                bellman.abs() <= 1e-10,
                "bellman residual {bellman:.3e} at t={}",
                s.t
            );
            assert!(
                controller.abs() <= 1e-10,
                "controller residual {controller:.3e} at t={}",
                s.t
            );
        }
    }

    fn rich_stack(capacity: usize, theta: &DMatrix<f64>) -> IrlStack {
        let model = benchmark::model();
        let lib = benchmark::features();
        let mut stack = IrlStack::new(capacity, &lib, 1.0, 1e-6, 1.0).unwrap();
        let traj = simulate(&model, &benchmark::optimal_policy, &v2(1.0, 1.0), 0.01, 3.0).unwrap();
        for s in traj.samples().iter().step_by(3) {
            let row = build_row(&s.x, &s.u, theta, 0.0, &lib, &model, 1.0, s.t).unwrap();
            stack.try_insert(row);
        }
        stack
    }

    #[test]
    fn exact_rows_recover_the_true_weights() {
        let model = benchmark::model();
        let stack = rich_stack(60, model.theta_true());
        let w = stack.solve_weights().unwrap();
        let expected = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 1.0, 1.0, 0.0, 1.0]);
        let err = (w.stacked() - expected).norm();
        assert!(err <= 1e-6, "weight error {err:.3e}");
        assert!(w.stacked().norm() > 0.0);
    }

    #[test]
    fn identical_rows_fail_the_rank_condition() {
        let model = benchmark::model();
        let lib = benchmark::features();
        let mut stack = IrlStack::new(10, &lib, 1.0, 1e-6, 1.0).unwrap();
        let row = build_row(
            &v2(0.5, -0.8),
            &u1(2.4),
            model.theta_true(),
            0.0,
            &lib,
            &model,
            1.0,
            0.0,
        )
        .unwrap();
        for _ in 0..10 {
            stack.try_insert(row.clone());
        }
        assert!(matches!(
            stack.solve_weights(),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn weight_error_scales_linearly_with_parameter_error() {
        let model = benchmark::model();
        let expected = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 1.0, 1.0, 0.0, 1.0]);
        let direction = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]) / 3.0f64.sqrt();

        let err_at = |delta: f64| {
            let theta = model.theta_true() + delta * &direction;
            let stack = rich_stack(60, &theta);
            (stack.solve_weights().unwrap().stacked() - &expected).norm()
        };

        // Fit the sensitivity constant at the smallest perturbation, then
        // require the larger ones to stay near the linear prediction.
        let e3 = err_at(1e-3);
        let slope = e3 / 1e-3;
        assert!(e3 <= slope * 1e-3 * 1.0 + 1e-12);
        let e2 = err_at(1e-2);
        let e1 = err_at(1e-1);
        assert!(
            e2 / (slope * 1e-2) < 3.0 && e2 / (slope * 1e-2) > 1.0 / 3.0,
            "1e-2 perturbation deviates from linear scaling: {e2:.3e} vs {:.3e}",
            slope * 1e-2
        );
        assert!(
            e1 / (slope * 1e-1) < 3.0 && e1 / (slope * 1e-1) > 1.0 / 3.0,
            "1e-1 perturbation deviates from linear scaling: {e1:.3e} vs {:.3e}",
            slope * 1e-1
        );
    }

    #[test]
    fn insertion_below_capacity_is_unconditional() {
        let model = benchmark::model();
        let lib = benchmark::features();
        let mut stack = IrlStack::new(8, &lib, 1.0, 1e-6, 1.0).unwrap();
        let row = build_row(
            &v2(0.1, 0.1),
            &u1(-0.3),
            model.theta_true(),
            0.5,
            &lib,
            &model,
            1.0,
            0.0,
        )
        .unwrap();
        assert!(stack.try_insert(row));
        assert!(stack.last_insert_accepted());
        assert_eq!(stack.len(), 1);
    }

    #[test]
    fn duplicates_cannot_displace_a_balanced_full_stack() {
        // With a well-spread full stack of comparable row norms and unit
        // accept ratio, re-offering any stored row must be discarded:
        // substituting it for itself leaves the condition number unchanged,
        // and overwriting any other row trades a direction for a repeat. The
        // brute-force scan below confirms the construction has no qualifying
        // slot, so a rejection here tests the selection logic and not luck.
        let model = benchmark::model();
        let lib = benchmark::features();
        let states: Vec<(f64, f64)> = (0..6)
            .map(|k| {
                let angle = 0.9 + k as f64 * std::f64::consts::PI / 3.0;
                (0.9 * angle.cos(), 0.9 * angle.sin())
            })
            .collect();
        let build = || {
            let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
            for (a, b) in &states {
                let x = v2(*a, *b);
                let u = benchmark::optimal_policy(&x);
                let row =
                    build_row(&x, &u, model.theta_true(), 0.1, &lib, &model, 1.0, 0.0).unwrap();
                stack.try_insert(row);
            }
            stack
        };

        let oracle_kappa = |rows: &[IrlRow]| -> f64 {
            let mut sigma = DMatrix::zeros(rows.len() * 2, 5);
            for (i, r) in rows.iter().enumerate() {
                sigma.row_mut(2 * i).copy_from(&r.bellman_row.transpose());
                sigma
                    .row_mut(2 * i + 1)
                    .copy_from(&r.controller_rows.row(0));
            }
            let sv = sigma.svd(false, false).singular_values;
            (sv.max() / sv.min()).powi(2)
        };

        for dup_idx in 0..6 {
            let mut stack = build();
            assert!(stack.is_full());
            let rows: Vec<IrlRow> = stack.rows().to_vec();
            let duplicate = rows[dup_idx].clone();

            let kappa_old = oracle_kappa(&rows);
            for i in 0..rows.len() {
                let mut replaced = rows.clone();
                replaced[i] = duplicate.clone();
                assert!(
                    !(oracle_kappa(&replaced) < kappa_old),
                    "construction admits an improving duplicate at slot {i}"
                );
            }

            assert!(!stack.try_insert(duplicate));
            assert!(!stack.last_insert_accepted());
            assert_eq!(stack.rows(), rows.as_slice());
        }
    }

    #[test]
    fn replacement_follows_the_exhaustive_condition_number_scan() {
        // Randomized streams against a brute-force oracle that rebuilds every
        // candidate stack and rates it by singular values of the tall matrix.
        let model = benchmark::model();
        let lib = benchmark::features();
        let mut stack = IrlStack::new(6, &lib, 1.0, 1e-6, 1.0).unwrap();
        let mut seed = 0x853c49e6748fea9bu64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            4.0 * ((seed >> 11) as f64 / (1u64 << 53) as f64) - 2.0
        };
        let make_row = |next: &mut dyn FnMut() -> f64| {
            let x = v2(next(), next());
            let u = u1(next());
            build_row(&x, &u, model.theta_true(), 0.1, &lib, &model, 1.0, 0.0).unwrap()
        };
        for _ in 0..6 {
            let row = make_row(&mut next);
            stack.try_insert(row);
        }

        let oracle_kappa = |rows: &[IrlRow]| -> f64 {
            let mut sigma = DMatrix::zeros(rows.len() * 2, 5);
            for (i, r) in rows.iter().enumerate() {
                sigma.row_mut(2 * i).copy_from(&r.bellman_row.transpose());
                sigma
                    .row_mut(2 * i + 1)
                    .copy_from(&r.controller_rows.row(0));
            }
            let sv = sigma.svd(false, false).singular_values;
            let (smin, smax) = (sv.min(), sv.max());
            if smin <= 0.0 {
                f64::INFINITY
            } else {
                (smax / smin).powi(2)
            }
        };

        let mut accepted_any = false;
        let mut rejected_any = false;
        for trial in 0..300 {
            let candidate = make_row(&mut next);
            let before: Vec<IrlRow> = stack.rows().to_vec();
            let kappa_old = oracle_kappa(&before);
            let mut oracle_best: Option<(usize, f64)> = None;
            for i in 0..before.len() {
                let mut replaced = before.clone();
                replaced[i] = candidate.clone();
                let kappa_i = oracle_kappa(&replaced);
                let rhs: f64 = replaced
                    .iter()
                    .map(|r| r.rhs.norm_squared())
                    .sum::<f64>()
                    .sqrt();
                if kappa_i < 1.0 * kappa_old
                    && rhs >= 1e-6
                    && oracle_best.is_none_or(|(_, b)| kappa_i < b)
                {
                    oracle_best = Some((i, kappa_i));
                }
            }
            let accepted = stack.try_insert(candidate.clone());
            assert_eq!(
                accepted,
                oracle_best.is_some(),
                "trial {trial}: greedy and oracle disagree"
            );
            if let Some((_, kappa_oracle)) = oracle_best {
                accepted_any = true;
                let changed: Vec<usize> = (0..before.len())
                    .filter(|&i| stack.rows()[i] != before[i])
                    .collect();
                assert_eq!(changed.len(), 1, "trial {trial}: expected one replacement");
                assert!(stack.rows()[changed[0]].same_matrix_rows(&candidate));
                let kappa_new = oracle_kappa(stack.rows());
                assert!(
                    kappa_new <= kappa_oracle * (1.0 + 1e-9),
                    "trial {trial}: greedy pick ({kappa_new:.6e}) worse than oracle ({kappa_oracle:.6e})"
                );
            } else {
                rejected_any = true;
                assert_eq!(stack.rows(), before.as_slice());
            }
        }
        assert!(
            accepted_any && rejected_any,
            "stream exercised both branches"
        );
    }

    #[test]
    fn clear_winner_is_replaced_at_the_oracle_index() {
        // Small stack of random rows; candidates that fix the worst-covered
        // direction must land exactly where the exhaustive scan puts them
        // whenever that scan has an unambiguous winner.
        let model = benchmark::model();
        let lib = benchmark::features();
        let mut stack = IrlStack::new(4, &lib, 1.0, 1e-6, 1.0).unwrap();
        let mut seed = 0x6c8e944d1f4a3c21u64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            4.0 * ((seed >> 11) as f64 / (1u64 << 53) as f64) - 2.0
        };
        let make_row = |next: &mut dyn FnMut() -> f64| {
            let x = v2(next(), next());
            let u = u1(next());
            build_row(&x, &u, model.theta_true(), 0.1, &lib, &model, 1.0, 0.0).unwrap()
        };
        for _ in 0..4 {
            let row = make_row(&mut next);
            stack.try_insert(row);
        }

        let oracle_kappa = |rows: &[IrlRow]| -> f64 {
            let mut sigma = DMatrix::zeros(rows.len() * 2, 5);
            for (i, r) in rows.iter().enumerate() {
                sigma.row_mut(2 * i).copy_from(&r.bellman_row.transpose());
                sigma
                    .row_mut(2 * i + 1)
                    .copy_from(&r.controller_rows.row(0));
            }
            let sv = sigma.svd(false, false).singular_values;
            if sv.min() <= 0.0 {
                f64::INFINITY
            } else {
                (sv.max() / sv.min()).powi(2)
            }
        };

        let mut checked = 0;
        for _ in 0..200 {
            let candidate = make_row(&mut next);
            let before: Vec<IrlRow> = stack.rows().to_vec();
            let kappa_old = oracle_kappa(&before);
            let mut scan: Vec<(usize, f64)> = Vec::new();
            for i in 0..before.len() {
                let mut replaced = before.clone();
                replaced[i] = candidate.clone();
                let kappa_i = oracle_kappa(&replaced);
                let rhs: f64 = replaced
                    .iter()
                    .map(|r| r.rhs.norm_squared())
                    .sum::<f64>()
                    .sqrt();
                if kappa_i < kappa_old && rhs >= 1e-6 {
                    scan.push((i, kappa_i));
                }
            }
            scan.sort_by(|a, b| a.1.total_cmp(&b.1));
            let unambiguous = match scan.as_slice() {
                [] => false,
                [_] => true,
                [(_, best), (_, second), ..] => *best < 0.99 * second,
            };
            let accepted = stack.try_insert(candidate.clone());
            if unambiguous {
                let (i, _) = scan[0];
                assert!(accepted);
                assert!(
                    stack.rows()[i].same_matrix_rows(&candidate),
                    "candidate not placed at the oracle's index {i}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 10, "too few unambiguous trials: {checked}");
    }

    #[test]
    fn purge_empties_and_counts() {
        let model = benchmark::model();
        let mut stack = rich_stack(20, model.theta_true());
        assert!(!stack.is_empty());
        stack.purge_now();
        assert!(stack.is_empty());
        assert_eq!(stack.purge_count(), 1);
        assert_eq!(stack.min_stored_eta(), f64::INFINITY);
        assert!(stack.condition_number().is_infinite());
    }

    #[test]
    fn degenerate_rhs_is_rejected_by_the_solver() {
        // Zero-control samples leave the known-weight side empty.
        let model = benchmark::model();
        let lib = benchmark::features();
        let mut stack = IrlStack::new(8, &lib, 1.0, 1e-6, 1.0).unwrap();
        for a in [0.2, -0.5, 1.0, 1.5, -1.1, 0.7, -1.9, 0.4] {
            let x = v2(a, 0.0); // zero velocity -> zero control
            let u = benchmark::optimal_policy(&x);
            let row = build_row(&x, &u, model.theta_true(), 0.0, &lib, &model, 1.0, 0.0).unwrap();
            stack.try_insert(row);
        }
        assert!(matches!(
            stack.solve_weights(),
            Err(Error::DegenerateRhs { .. })
        ));
    }
}
