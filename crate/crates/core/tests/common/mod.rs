//! Independent reference computations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use bilevel::problems::{gen_cleaning, gen_quadratic, CleaningProblem, QuadraticBilevel};
use bilevel::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian elimination with partial pivoting on a dense copy.
pub fn dense_solve(a: &Matrix, b: &Vector) -> Vector {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)]).chain(std::iter::once(b[i])).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for j in col..=n {
                m[row][j] -= f * m[col][j];
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

/// Ground truth for the quadratic family built from raw data matrices only:
/// `ω_λ` from the normal equations and `∇f = Jᵀ ∂_ωF` with
/// `J = −(A_iwᵀA_iw)⁻¹ A_iwᵀA_il`, all by elimination.
pub fn quadratic_truth(q: &QuadraticBilevel, lambda: &Vector) -> (Vector, Vector) {
    let n = q.a_iw().ncols();
    let gww = q.a_iw().transpose() * q.a_iw();
    let gwl = q.a_iw().transpose() * q.a_il();
    let omega = dense_solve(&gww, &(q.a_iw().transpose() * (q.b_i() - q.a_il() * lambda)));
    let p = (2.0 / q.samples() as f64) * q.a_o().transpose() * (q.a_o() * &omega - q.b_o());
    let mut grad = Vector::zeros(lambda.len());
    for j in 0..lambda.len() {
        let col = dense_solve(&gww, &gwl.column(j).into_owned());
        grad[j] = -col.dot(&p);
    }
    assert_eq!(omega.len(), n);
    (omega, grad)
}

pub fn reference_quadratic(seed: u64) -> QuadraticBilevel {
    gen_quadratic(seed, 5, 5, 10_000, 0.1f64.sqrt()).unwrap()
}

pub fn small_quadratic(seed: u64) -> QuadraticBilevel {
    gen_quadratic(seed, 4, 3, 200, 0.3).unwrap()
}

pub fn small_cleaning(seed: u64) -> CleaningProblem {
    gen_cleaning(seed, 40, 30, 3, 0.3, 2.0, 0.1).unwrap()
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
