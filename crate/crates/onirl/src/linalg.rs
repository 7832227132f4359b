//! Small dense symmetric eigenvalue helpers used by the history stacks.
//!
//! The stacks need eigenvalue extremes of Gram matrices that are at most a
//! handful of rows wide, thousands of times per simulated second. A cyclic
//! Jacobi sweep on a scratch copy is deterministic, allocation-light and
//! accurate to machine precision at these sizes, which keeps the greedy
//! selection decisions reproducible across runs.

use nalgebra::DMatrix;

/// Smallest and largest eigenvalue of a small symmetric matrix.
///
/// Runs cyclic Jacobi rotations until the off-diagonal mass is negligible
/// relative to the matrix norm. Input is assumed symmetric; only the values
/// are returned, so the rotations are not accumulated.
pub fn sym_eigen_bounds(a: &DMatrix<f64>) -> (f64, f64) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen_bounds needs a square matrix");
    if n == 0 {
        return (0.0, 0.0);
    }
    if n == 1 {
        return (a[(0, 0)], a[(0, 0)]);
    }

    let mut m = a.clone();
    let scale: f64 = m.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return (0.0, 0.0);
    }
    let tol = 1e-15 * scale;

    const MAX_SWEEPS: usize = 40;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                off = off.max(m[(p, q)].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                // Classic Jacobi rotation that annihilates the (p,q) entry.
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }

    let mut lo = m[(0, 0)];
    let mut hi = m[(0, 0)];
    for i in 1..n {
        let d = m[(i, i)];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Condition number of a symmetric positive semidefinite matrix,
/// `+inf` when the matrix is singular (or numerically indefinite).
pub fn spd_condition_number(a: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_eigen_bounds(a);
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi <= 0.0 {
        return f64::INFINITY;
    }
    hi / lo
}
