//! Dense primitives, linear conjugate gradient and finite differences.
//!
//! Storage is `nalgebra`'s column-major `DVector`/`DMatrix`; only index
//! semantics (`m[(row, col)]`) are relied upon elsewhere.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// A square linear map given only through its action on vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &Vector) -> Vector;
}

impl LinearOperator for Matrix {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.nrows(), self.ncols());
        self.nrows()
    }

    fn apply(&self, x: &Vector) -> Vector {
        self * x
    }
}

/// Wraps a closure as a [`LinearOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Vector) -> Vector> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&Vector) -> Vector> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &Vector) -> Vector {
        (self.f)(x)
    }
}

pub fn is_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub(crate) fn ensure_finite(v: &Vector, what: &'static str) -> Result<()> {
    if is_finite(v) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(what))
    }
}

/// Result of [`cg_solve`].
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vector,
    /// Operator applications performed (the initial residual is `b` since `x0 = 0`).
    pub iters: usize,
    pub residual: f64,
    pub trace: CgTrace,
}

/// Per-iteration record of the recurrences.
///
/// Iteration `k` moves `x_{k+1} = x_k + alphas[k] * directions[k]` where
/// `directions[k] = r_k + gammas[k] * directions[k-1]` (`gammas[0] = 0`, and a
/// restart also records zero). Equivalently
/// `x_{k+1} = (I - alphas[k] A) x_k + alphas[k] (b + gammas[k] directions[k-1])`.
#[derive(Debug, Clone, Default)]
pub struct CgTrace {
    /// `‖r_k‖` for `k = 0..=iters`, starting with `‖b‖`.
    pub residuals: Vec<f64>,
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub directions: Vec<Vector>,
}

/// Linear conjugate gradient for `op(x) = b` from `x0 = 0`.
///
/// Stops once `‖r‖ ≤ tol` or after `max_iter` operator applications and
/// returns the iterate with the smallest recorded residual. A direction with
/// `⟨d, A d⟩ ≤ 0` triggers a restart along the current residual; if that is
/// still not positive the operator is not SPD and the best iterate so far
/// is returned.
pub fn cg_solve<O: LinearOperator + ?Sized>(op: &O, b: &Vector, tol: f64, max_iter: usize) -> Result<CgSolution> {
    let n = op.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            what: "cg right-hand side",
            expected: n,
            actual: b.len(),
        });
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidConfig(format!(
            "cg needs tol > 0 and max_iter >= 1 (tol={tol}, max_iter={max_iter})"
        )));
    }
    ensure_finite(b, "cg right-hand side")?;

    let mut x = Vector::zeros(n);
    let mut r = b.clone();
    let mut rr = r.norm_squared();
    let mut trace = CgTrace {
        residuals: vec![rr.sqrt()],
        ..CgTrace::default()
    };
    let mut best = (rr.sqrt(), x.clone());
    if rr.sqrt() <= tol {
        return Ok(CgSolution {
            x,
            iters: 0,
            residual: best.0,
            trace,
        });
    }

    let mut d = r.clone();
    let mut gamma = 0.0;
    let mut iters = 0;
    while iters < max_iter {
        let mut ad = op.apply(&d);
        iters += 1;
        let mut dad = d.dot(&ad);
        if !(dad > 0.0) && gamma != 0.0 && iters < max_iter {
            d = r.clone();
            gamma = 0.0;
            ad = op.apply(&d);
            iters += 1;
            dad = d.dot(&ad);
        }
        if !dad.is_finite() {
            return Err(Error::NonFiniteValue("cg curvature"));
        }
        if dad <= 0.0 {
            break;
        }

        let alpha = rr / dad;
        x.axpy(alpha, &d, 1.0);
        r.axpy(-alpha, &ad, 1.0);
        ensure_finite(&x, "cg iterate")?;

        trace.alphas.push(alpha);
        trace.gammas.push(gamma);
        trace.directions.push(d.clone());

        let rr_new = r.norm_squared();
        let res = rr_new.sqrt();
        trace.residuals.push(res);
        if res < best.0 {
            best = (res, x.clone());
        }
        if res <= tol {
            break;
        }
        gamma = rr_new / rr;
        rr = rr_new;
        d = &r + gamma * &d;
    }

    Ok(CgSolution {
        x: best.1,
        iters,
        residual: best.0,
        trace,
    })
}

/// Central-difference gradient: component `i` is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut g = Vector::zeros(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let fp = f(&probe);
        probe[i] = xi - h;
        let fm = f(&probe);
        probe[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteValue("finite-difference probe"));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Jacobian-vector product of a vector field along `dir`.
pub fn finite_diff_directional<F>(f: F, x: &Vector, dir: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Vector,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let fp = f(&(x + h * dir));
    let fm = f(&(x - h * dir));
    let out = (fp - fm) / (2.0 * h);
    ensure_finite(&out, "finite-difference probe")?;
    Ok(out)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Vector, b: &Vector, floor: f64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gaussian elimination with partial pivoting, kept independent of nalgebra's solvers.
    fn gauss_solve(a: &Matrix, b: &Vector) -> Vector {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)]).chain([b[i]]).collect())
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, piv);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
            x[i] = (m[i][n] - s) / m[i][i];
        }
        Vector::from_vec(x)
    }

    fn random_spd(seed: u64, n: usize) -> (Matrix, Vector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &b * b.transpose() + Matrix::identity(n, n) * n as f64;
        let rhs = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        (m, rhs)
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let op = Matrix::identity(3, 3);
        let b = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let sol = cg_solve(&op, &b, 1e-12, 10).unwrap();
        assert_eq!(sol.iters, 1);
        assert!((sol.x - b).norm() < 1e-14);
    }

    #[test]
    fn diagonal_solve() {
        let op = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 4.0]));
        let b = Vector::from_vec(vec![2.0, 4.0]);
        let sol = cg_solve(&op, &b, 1e-12, 10).unwrap();
        assert!((sol.x - Vector::from_vec(vec![1.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn matches_dense_elimination_on_random_spd() {
        for seed in 0..10 {
            let (m, b) = random_spd(seed, 5);
            let sol = cg_solve(&m, &b, 1e-13, 50).unwrap();
            let direct = gauss_solve(&m, &b);
            assert!((sol.x - direct).norm() < 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn finite_termination_within_dimension() {
        for seed in 0..20 {
            for n in [2, 5, 8] {
                let (m, b) = random_spd(100 + seed, n);
                let sol = cg_solve(&m, &b, 1e-12, n).unwrap();
                assert!(sol.residual <= 1e-8 * b.norm(), "seed {seed} n {n}: {}", sol.residual);
                assert!(sol.iters <= n);
            }
        }
    }

    #[test]
    fn residual_trace_is_non_increasing() {
        for seed in 0..20 {
            let (m, b) = random_spd(200 + seed, 5);
            let sol = cg_solve(&m, &b, 1e-14, 5).unwrap();
            for w in sol.trace.residuals.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {:?}", sol.trace.residuals);
            }
        }
    }

    #[test]
    fn trace_reproduces_iterate_through_affine_recursion() {
        let (m, b) = random_spd(7, 6);
        let sol = cg_solve(&m, &b, 1e-14, 4).unwrap();
        let mut x = Vector::zeros(6);
        for k in 0..sol.trace.alphas.len() {
            let a = sol.trace.alphas[k];
            let mut q = b.clone();
            if k > 0 {
                q += sol.trace.gammas[k] * &sol.trace.directions[k - 1];
            }
            x = &x - a * (&m * &x) + a * q;
        }
        assert!((x - sol.x).norm() < 1e-10);
    }

    #[test]
    fn rejects_bad_arguments() {
        let op = Matrix::identity(2, 2);
        let b = Vector::from_vec(vec![1.0, 1.0]);
        assert!(cg_solve(&op, &b, 0.0, 3).is_err());
        assert!(cg_solve(&op, &b, 1e-8, 0).is_err());
        assert!(cg_solve(&op, &Vector::zeros(3), 1e-8, 3).is_err());
    }

    #[test]
    fn non_finite_operator_is_reported() {
        let op = FnOperator::new(2, |x: &Vector| x * f64::NAN);
        let b = Vector::from_vec(vec![1.0, 1.0]);
        assert_eq!(
            cg_solve(&op, &b, 1e-8, 3).unwrap_err(),
            Error::NonFiniteValue("cg curvature")
        );
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let sol = cg_solve(&Matrix::identity(3, 3), &Vector::zeros(3), 1e-10, 3).unwrap();
        assert_eq!(sol.iters, 0);
        assert_eq!(sol.x, Vector::zeros(3));
    }

    #[test]
    fn fd_of_squared_norm() {
        let x = Vector::from_vec(vec![1.0, -2.0]);
        let g = finite_diff_grad(|v| v.norm_squared(), &x, 1e-5).unwrap();
        assert!((g - Vector::from_vec(vec![2.0, -4.0])).norm() < 1e-6);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let x = Vector::from_vec(vec![0.3, 7.0, -1.0]);
        let g = finite_diff_grad(|_| 4.2, &x, 1e-5).unwrap();
        assert_eq!(g, Vector::zeros(3));
    }

    #[test]
    fn fd_of_quadratic_matches_affine_gradient() {
        let (m, b) = random_spd(11, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Vector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let f = |v: &Vector| 0.5 * v.dot(&(&m * v)) - b.dot(v);
        let g = finite_diff_grad(f, &x, 1e-5).unwrap();
        let exact = &m * &x - &b;
        assert!(relative_error(&g, &exact, 1e-12) < 1e-5);
    }

    #[test]
    fn fd_reports_non_finite_probe() {
        let x = Vector::from_vec(vec![0.0]);
        let err = finite_diff_grad(|v| if v[0] > 0.0 { f64::NAN } else { 0.0 }, &x, 1e-5);
        assert!(matches!(err, Err(Error::NonFiniteValue(_))));
    }
}
