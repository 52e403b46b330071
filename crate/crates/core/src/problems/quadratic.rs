//! Quadratic bilevel problems with closed-form ground truth.
//!
//! ```text
//! f(λ) = (1/N) ‖A_o ω_λ − b_o‖²
//! ω_λ  = argmin_ω (1/N) ‖A_il λ + A_iw ω − b_i‖²
//! ```
//!
//! Both objectives are per-sample means, so `μ_G` and `L` do not grow with
//! `N`. All second derivatives are constant.

use nalgebra::linalg::{Cholesky, SymmetricEigen};
use nalgebra::Dyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::problem::{BilevelOracle, SampleKey};

const MIN_GRAM_EIGENVALUE: f64 = 1e-8;
const MAX_RESAMPLES: usize = 16;

#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    a_o: Matrix,
    b_o: Vector,
    a_il: Matrix,
    a_iw: Matrix,
    b_i: Vector,
    // cached full-batch factors
    gram_ww: Matrix,
    gram_wl: Matrix,
    gram_oo: Matrix,
    aw_bi: Vector,
    ao_bo: Vector,
    chol_ww: Cholesky<f64, Dyn>,
    mu: f64,
    l: f64,
}

impl QuadraticBilevel {
    /// Builds an instance from its data matrices (rows are samples).
    pub fn from_parts(a_o: Matrix, b_o: Vector, a_il: Matrix, a_iw: Matrix, b_i: Vector) -> Result<Self> {
        let rows = a_o.nrows();
        for (what, actual) in [
            ("b_o rows", b_o.len()),
            ("A_il rows", a_il.nrows()),
            ("A_iw rows", a_iw.nrows()),
            ("b_i rows", b_i.len()),
        ] {
            if actual != rows {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: rows,
                    actual,
                });
            }
        }
        if a_o.ncols() != a_iw.ncols() {
            return Err(Error::DimensionMismatch {
                what: "A_o columns",
                expected: a_iw.ncols(),
                actual: a_o.ncols(),
            });
        }
        if rows == 0 || a_iw.ncols() == 0 || a_il.ncols() == 0 {
            return Err(Error::DegenerateInstance("empty quadratic instance".into()));
        }

        let gram_ww = a_iw.tr_mul(&a_iw);
        let eig = SymmetricEigen::new(gram_ww.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
        if !(lo >= MIN_GRAM_EIGENVALUE) {
            return Err(Error::DegenerateInstance(format!(
                "A_iw^T A_iw has smallest eigenvalue {lo:e}"
            )));
        }
        let chol_ww = Cholesky::new(gram_ww.clone())
            .ok_or_else(|| Error::DegenerateInstance("A_iw^T A_iw is not positive definite".into()))?;
        let scale = 2.0 / rows as f64;
        Ok(Self {
            gram_wl: a_iw.tr_mul(&a_il),
            gram_oo: a_o.tr_mul(&a_o),
            aw_bi: a_iw.tr_mul(&b_i),
            ao_bo: a_o.tr_mul(&b_o),
            gram_ww,
            chol_ww,
            mu: scale * lo,
            l: scale * hi,
            a_o,
            b_o,
            a_il,
            a_iw,
            b_i,
        })
    }

    /// Number of samples `N`.
    pub fn samples(&self) -> usize {
        self.a_o.nrows()
    }

    pub fn a_o(&self) -> &Matrix {
        &self.a_o
    }

    pub fn b_o(&self) -> &Vector {
        &self.b_o
    }

    pub fn a_il(&self) -> &Matrix {
        &self.a_il
    }

    pub fn a_iw(&self) -> &Matrix {
        &self.a_iw
    }

    pub fn b_i(&self) -> &Vector {
        &self.b_i
    }

    /// Second derivatives do not depend on `(λ, ω)`.
    pub fn constant_hessian(&self) -> bool {
        true
    }

    fn scale(&self) -> f64 {
        2.0 / self.samples() as f64
    }

    /// `ω_λ = (A_iwᵀA_iw)⁻¹ A_iwᵀ(b_i − A_il λ)`.
    pub fn inner_solve(&self, lambda: &Vector) -> Vector {
        self.chol_ww.solve(&(&self.aw_bi - &self.gram_wl * lambda))
    }

    /// `f(λ) = F(λ, ω_λ)`.
    pub fn value(&self, lambda: &Vector) -> f64 {
        self.outer_value(lambda, &self.inner_solve(lambda), &SampleKey::FullBatch)
    }

    /// Closed-form `∇f(λ) = (dω_λ/dλ)ᵀ ∂_ωF(λ, ω_λ)` with
    /// `dω_λ/dλ = −(A_iwᵀA_iw)⁻¹ A_iwᵀ A_il`.
    pub fn exact_hypergrad(&self, lambda: &Vector) -> Vector {
        let omega = self.inner_solve(lambda);
        let p = self.scale() * (&self.gram_oo * &omega - &self.ao_bo);
        let jac = -self.chol_ww.solve(&self.gram_wl);
        jac.tr_mul(&p)
    }

    /// Full-batch `∂²_ωG`, materialized.
    pub fn inner_hessian(&self) -> Matrix {
        self.scale() * &self.gram_ww
    }

    /// Full-batch `∂_ωλG` (m×n), materialized.
    pub fn cross_matrix(&self) -> Matrix {
        self.scale() * self.gram_wl.transpose()
    }

    /// Hessian of the reduced objective, `(dω_λ/dλ)ᵀ ∂²_ωF (dω_λ/dλ)` (m×m).
    pub fn outer_hessian(&self) -> Matrix {
        let jac = -self.chol_ww.solve(&self.gram_wl);
        self.scale() * jac.transpose() * &self.gram_oo * &jac
    }

    /// The λ minimizing `f`, from the normal equations of the reduced problem.
    pub fn outer_optimum(&self) -> Option<Vector> {
        // f(λ) = (1/N)‖A_o (c + J λ) − b_o‖², c = ω_0, J = dω_λ/dλ
        let jac = -self.chol_ww.solve(&self.gram_wl);
        let c = self.chol_ww.solve(&self.aw_bi);
        let a = (&self.a_o * &jac).transpose() * (&self.a_o * &jac);
        let rhs = (&self.a_o * &jac).transpose() * (&self.b_o - &self.a_o * c);
        a.cholesky().map(|ch| ch.solve(&rhs))
    }

    fn rows(&self, key: &SampleKey) -> Option<Vec<usize>> {
        key.indices(self.samples())
    }

    fn outer_residual_row(&self, i: usize, omega: &Vector) -> f64 {
        self.a_o.row(i).transpose().dot(omega) - self.b_o[i]
    }

    fn inner_residual_row(&self, i: usize, lambda: &Vector, omega: &Vector) -> f64 {
        self.a_il.row(i).transpose().dot(lambda) + self.a_iw.row(i).transpose().dot(omega) - self.b_i[i]
    }

    /// Mean of `F` over an explicit set of rows.
    pub fn outer_value_on(&self, rows: &[usize], omega: &Vector) -> f64 {
        rows.iter()
            .map(|&i| self.outer_residual_row(i, omega).powi(2))
            .sum::<f64>()
            / rows.len() as f64
    }

    /// Mean of `G` over an explicit set of rows.
    pub fn inner_value_on(&self, rows: &[usize], lambda: &Vector, omega: &Vector) -> f64 {
        rows.iter()
            .map(|&i| self.inner_residual_row(i, lambda, omega).powi(2))
            .sum::<f64>()
            / rows.len() as f64
    }
}

/// Draws an instance: entries of `A_o`, `A_il`, `A_iw` and the planted
/// `λ`, `ω`, `ω_λ` are uniform on `[0, 1)`; `b_o = A_o ω_λ + ε_o` and
/// `b_i = A_il λ + A_iw ω + ε_i` with Gaussian noise of standard deviation
/// `noise_std`.
pub fn gen_quadratic(seed: u64, n: usize, m: usize, samples: usize, noise_std: f64) -> Result<QuadraticBilevel> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig("quadratic dimensions must be at least 1".into()));
    }
    if samples < n + m {
        return Err(Error::InvalidConfig(format!(
            "need at least n + m = {} samples, got {samples}",
            n + m
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise_std must be finite and non-negative, got {noise_std}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).expect("validated noise level");
    let mut last_err = None;
    for _ in 0..MAX_RESAMPLES {
        let mut uniform = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random::<f64>());
        let a_o = uniform(samples, n);
        let a_il = uniform(samples, m);
        let a_iw = uniform(samples, n);
        let lambda = uniform(m, 1).column(0).into_owned();
        let omega = uniform(n, 1).column(0).into_owned();
        let omega_lambda = uniform(n, 1).column(0).into_owned();
        let mut eps = |len: usize| Vector::from_fn(len, |_, _| noise.sample(&mut rng));
        let b_o = &a_o * &omega_lambda + eps(samples);
        let b_i = &a_il * &lambda + &a_iw * &omega + eps(samples);
        match QuadraticBilevel::from_parts(a_o, b_o, a_il, a_iw, b_i) {
            Ok(q) => return Ok(q),
            Err(e @ Error::DegenerateInstance(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

impl BilevelOracle for QuadraticBilevel {
    fn outer_dim(&self) -> usize {
        self.a_il.ncols()
    }

    fn inner_dim(&self) -> usize {
        self.a_iw.ncols()
    }

    fn dataset_size(&self) -> usize {
        self.samples()
    }

    fn outer_value(&self, _lambda: &Vector, omega: &Vector, key: &SampleKey) -> f64 {
        match self.rows(key) {
            Some(rows) => self.outer_value_on(&rows, omega),
            None => (&self.a_o * omega - &self.b_o).norm_squared() / self.samples() as f64,
        }
    }

    fn inner_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Option<f64> {
        Some(match self.rows(key) {
            Some(rows) => self.inner_value_on(&rows, lambda, omega),
            None => (&self.a_il * lambda + &self.a_iw * omega - &self.b_i).norm_squared() / self.samples() as f64,
        })
    }

    fn grad_outer_lambda(&self, _lambda: &Vector, _omega: &Vector, _key: &SampleKey) -> Vector {
        Vector::zeros(self.outer_dim())
    }

    fn grad_outer_omega(&self, _lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        match self.rows(key) {
            Some(rows) => {
                let mut g = Vector::zeros(self.inner_dim());
                for &i in &rows {
                    let r = self.outer_residual_row(i, omega);
                    g += r * self.a_o.row(i).transpose();
                }
                g * (2.0 / rows.len() as f64)
            }
            None => self.scale() * (&self.gram_oo * omega - &self.ao_bo),
        }
    }

    fn grad_inner_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        match self.rows(key) {
            Some(rows) => {
                let mut g = Vector::zeros(self.inner_dim());
                for &i in &rows {
                    let r = self.inner_residual_row(i, lambda, omega);
                    g += r * self.a_iw.row(i).transpose();
                }
                g * (2.0 / rows.len() as f64)
            }
            None => self.scale() * (&self.gram_ww * omega + &self.gram_wl * lambda - &self.aw_bi),
        }
    }

    fn hvp_inner(&self, _lambda: &Vector, _omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        match self.rows(key) {
            Some(rows) => {
                let mut g = Vector::zeros(self.inner_dim());
                for &i in &rows {
                    let a = self.a_iw.row(i).transpose();
                    g += a.dot(v) * a;
                }
                g * (2.0 / rows.len() as f64)
            }
            None => self.scale() * (&self.gram_ww * v),
        }
    }

    fn cross_jvp_inner(&self, _lambda: &Vector, _omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        match self.rows(key) {
            Some(rows) => {
                let mut g = Vector::zeros(self.outer_dim());
                for &i in &rows {
                    let s = self.a_iw.row(i).transpose().dot(v);
                    g += s * self.a_il.row(i).transpose();
                }
                g * (2.0 / rows.len() as f64)
            }
            None => self.scale() * self.gram_wl.tr_mul(v),
        }
    }

    fn strong_convexity(&self) -> f64 {
        self.mu
    }

    fn smoothness(&self) -> f64 {
        self.l
    }
}
