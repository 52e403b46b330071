//! The oracle contract for bilevel problems.
//!
//! A problem `min_λ F(λ, ω_λ)`, `ω_λ = argmin_ω G(λ, ω)` is accessed only
//! through first-order gradients and matrix-free second-order products, so a
//! single "matrix-vector query" is one `hvp_inner` or `cross_jvp_inner` call.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Vector};

/// Selects which samples an oracle call averages over.
///
/// `MiniBatch` draws `batch_size` indices uniformly with replacement from a
/// generator seeded by `seed`, so the same key always selects the same samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKey {
    FullBatch,
    MiniBatch { seed: u64, batch_size: usize },
}

impl SampleKey {
    /// Sample indices into a dataset of `len` items, or `None` for the full batch.
    pub fn indices(&self, len: usize) -> Option<Vec<usize>> {
        match *self {
            SampleKey::FullBatch => None,
            SampleKey::MiniBatch { seed, batch_size } => {
                assert!(
                    batch_size >= 1 && len >= 1,
                    "mini-batch needs batch_size >= 1 and a non-empty dataset"
                );
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some((0..batch_size).map(|_| rng.random_range(0..len)).collect())
            }
        }
    }
}

/// Gradients and second-order products of a bilevel problem.
///
/// `λ ∈ R^m` is the outer variable and `ω ∈ R^n` the inner one. With
/// [`SampleKey::FullBatch`] every method must be deterministic; mini-batch
/// keys must give unbiased estimates of the full-batch values.
pub trait BilevelOracle: Sync {
    /// `m`, the dimension of λ.
    fn outer_dim(&self) -> usize;
    /// `n`, the dimension of ω.
    fn inner_dim(&self) -> usize;
    /// Smallest dataset the mini-batch keys sample from.
    fn dataset_size(&self) -> usize;

    /// `F(λ, ω)`.
    fn outer_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> f64;
    /// `G(λ, ω)`, when the problem can evaluate it.
    fn inner_value(&self, _lambda: &Vector, _omega: &Vector, _key: &SampleKey) -> Option<f64> {
        None
    }
    /// `∂_λ F(λ, ω) ∈ R^m`.
    fn grad_outer_lambda(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector;
    /// `∂_ω F(λ, ω) ∈ R^n`.
    fn grad_outer_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector;
    /// `∂_ω G(λ, ω) ∈ R^n`.
    fn grad_inner_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector;
    /// `∂²_ω G(λ, ω) v ∈ R^n`.
    fn hvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector;
    /// `∂_ωλ G(λ, ω) v ∈ R^m`, the mixed second derivative (m×n) applied to `v ∈ R^n`.
    fn cross_jvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector;

    /// `μ_G`: strong-convexity modulus of `G(λ, ·)` for every λ.
    fn strong_convexity(&self) -> f64;
    /// `L_{G,ω}`: smoothness of `G(λ, ·)` for every λ.
    fn smoothness(&self) -> f64;
}

impl<O: BilevelOracle + ?Sized> BilevelOracle for &O {
    fn outer_dim(&self) -> usize {
        (**self).outer_dim()
    }
    fn inner_dim(&self) -> usize {
        (**self).inner_dim()
    }
    fn dataset_size(&self) -> usize {
        (**self).dataset_size()
    }
    fn outer_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> f64 {
        (**self).outer_value(lambda, omega, key)
    }
    fn inner_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Option<f64> {
        (**self).inner_value(lambda, omega, key)
    }
    fn grad_outer_lambda(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        (**self).grad_outer_lambda(lambda, omega, key)
    }
    fn grad_outer_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        (**self).grad_outer_omega(lambda, omega, key)
    }
    fn grad_inner_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        (**self).grad_inner_omega(lambda, omega, key)
    }
    fn hvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        (**self).hvp_inner(lambda, omega, v, key)
    }
    fn cross_jvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        (**self).cross_jvp_inner(lambda, omega, v, key)
    }
    fn strong_convexity(&self) -> f64 {
        (**self).strong_convexity()
    }
    fn smoothness(&self) -> f64 {
        (**self).smoothness()
    }
}

/// Snapshot of per-method call counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OracleCalls {
    pub outer_value: u64,
    pub grad_outer_lambda: u64,
    pub grad_outer_omega: u64,
    pub grad_inner_omega: u64,
    pub hvp: u64,
    pub cross_jvp: u64,
}

impl OracleCalls {
    /// Matrix-vector queries: Hessian-vector plus cross-derivative products.
    pub fn hvp_class(&self) -> u64 {
        self.hvp + self.cross_jvp
    }

    pub fn since(&self, earlier: &OracleCalls) -> OracleCalls {
        OracleCalls {
            outer_value: self.outer_value - earlier.outer_value,
            grad_outer_lambda: self.grad_outer_lambda - earlier.grad_outer_lambda,
            grad_outer_omega: self.grad_outer_omega - earlier.grad_outer_omega,
            grad_inner_omega: self.grad_inner_omega - earlier.grad_inner_omega,
            hvp: self.hvp - earlier.hvp,
            cross_jvp: self.cross_jvp - earlier.cross_jvp,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    outer_value: AtomicU64,
    grad_outer_lambda: AtomicU64,
    grad_outer_omega: AtomicU64,
    grad_inner_omega: AtomicU64,
    hvp: AtomicU64,
    cross_jvp: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Forwards to an inner oracle and counts every call.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    counters: Counters,
}

impl<O: BilevelOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            counters: Counters::default(),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn calls(&self) -> OracleCalls {
        let c = &self.counters;
        OracleCalls {
            outer_value: c.outer_value.load(Ordering::Relaxed),
            grad_outer_lambda: c.grad_outer_lambda.load(Ordering::Relaxed),
            grad_outer_omega: c.grad_outer_omega.load(Ordering::Relaxed),
            grad_inner_omega: c.grad_inner_omega.load(Ordering::Relaxed),
            hvp: c.hvp.load(Ordering::Relaxed),
            cross_jvp: c.cross_jvp.load(Ordering::Relaxed),
        }
    }
}

impl<O: BilevelOracle> BilevelOracle for CountingOracle<O> {
    fn outer_dim(&self) -> usize {
        self.inner.outer_dim()
    }
    fn inner_dim(&self) -> usize {
        self.inner.inner_dim()
    }
    fn dataset_size(&self) -> usize {
        self.inner.dataset_size()
    }
    fn outer_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> f64 {
        bump(&self.counters.outer_value);
        self.inner.outer_value(lambda, omega, key)
    }
    fn inner_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Option<f64> {
        self.inner.inner_value(lambda, omega, key)
    }
    fn grad_outer_lambda(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        bump(&self.counters.grad_outer_lambda);
        self.inner.grad_outer_lambda(lambda, omega, key)
    }
    fn grad_outer_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        bump(&self.counters.grad_outer_omega);
        self.inner.grad_outer_omega(lambda, omega, key)
    }
    fn grad_inner_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        bump(&self.counters.grad_inner_omega);
        self.inner.grad_inner_omega(lambda, omega, key)
    }
    fn hvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        bump(&self.counters.hvp);
        self.inner.hvp_inner(lambda, omega, v, key)
    }
    fn cross_jvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        bump(&self.counters.cross_jvp);
        self.inner.cross_jvp_inner(lambda, omega, v, key)
    }
    fn strong_convexity(&self) -> f64 {
        self.inner.strong_convexity()
    }
    fn smoothness(&self) -> f64 {
        self.inner.smoothness()
    }
}

/// Pins every call to one sample key, whatever key the caller passes.
///
/// Estimators are written against full-batch semantics; evaluating them
/// through this view yields the stochastic estimate on a fixed mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct PinnedSample<O> {
    inner: O,
    key: SampleKey,
}

impl<O: BilevelOracle> PinnedSample<O> {
    pub fn new(inner: O, key: SampleKey) -> Self {
        Self { inner, key }
    }
}

impl<O: BilevelOracle> BilevelOracle for PinnedSample<O> {
    fn outer_dim(&self) -> usize {
        self.inner.outer_dim()
    }
    fn inner_dim(&self) -> usize {
        self.inner.inner_dim()
    }
    fn dataset_size(&self) -> usize {
        self.inner.dataset_size()
    }
    fn outer_value(&self, lambda: &Vector, omega: &Vector, _key: &SampleKey) -> f64 {
        self.inner.outer_value(lambda, omega, &self.key)
    }
    fn inner_value(&self, lambda: &Vector, omega: &Vector, _key: &SampleKey) -> Option<f64> {
        self.inner.inner_value(lambda, omega, &self.key)
    }
    fn grad_outer_lambda(&self, lambda: &Vector, omega: &Vector, _key: &SampleKey) -> Vector {
        self.inner.grad_outer_lambda(lambda, omega, &self.key)
    }
    fn grad_outer_omega(&self, lambda: &Vector, omega: &Vector, _key: &SampleKey) -> Vector {
        self.inner.grad_outer_omega(lambda, omega, &self.key)
    }
    fn grad_inner_omega(&self, lambda: &Vector, omega: &Vector, _key: &SampleKey) -> Vector {
        self.inner.grad_inner_omega(lambda, omega, &self.key)
    }
    fn hvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, _key: &SampleKey) -> Vector {
        self.inner.hvp_inner(lambda, omega, v, &self.key)
    }
    fn cross_jvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, _key: &SampleKey) -> Vector {
        self.inner.cross_jvp_inner(lambda, omega, v, &self.key)
    }
    fn strong_convexity(&self) -> f64 {
        self.inner.strong_convexity()
    }
    fn smoothness(&self) -> f64 {
        self.inner.smoothness()
    }
}

/// Norm beyond which an iterate counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub(crate) fn check_divergence(v: &Vector) -> Result<()> {
    let norm = v.norm();
    if !norm.is_finite() {
        return Err(Error::NonFiniteValue("iterate"));
    }
    if norm > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            norm,
            limit: DIVERGENCE_LIMIT,
        });
    }
    Ok(())
}

pub(crate) fn check_dim(what: &'static str, expected: usize, v: &Vector) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub omega_star: Vector,
    /// `‖∂_ω G‖` at `omega_star`.
    pub residual: f64,
    pub iters: usize,
}

/// Full-batch gradient descent on `G(λ, ·)` until `‖∂_ω G‖ ≤ tol` or `max_iter` steps.
pub fn solve_inner<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega0: &Vector,
    lr: f64,
    tol: f64,
    max_iter: usize,
) -> Result<InnerSolution> {
    check_dim("lambda", oracle.outer_dim(), lambda)?;
    check_dim("omega0", oracle.inner_dim(), omega0)?;
    let lr_max = 2.0 / oracle.smoothness();
    if !(lr > 0.0 && lr < lr_max) {
        return Err(Error::InvalidConfig(format!(
            "inner learning rate {lr} outside (0, 2/L) = (0, {lr_max})"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "inner tolerance must be positive, got {tol}"
        )));
    }
    let mut omega = omega0.clone();
    let mut grad = oracle.grad_inner_omega(lambda, &omega, &SampleKey::FullBatch);
    let mut iters = 0;
    while grad.norm() > tol && iters < max_iter {
        omega.axpy(-lr, &grad, 1.0);
        check_divergence(&omega)?;
        grad = oracle.grad_inner_omega(lambda, &omega, &SampleKey::FullBatch);
        iters += 1;
    }
    Ok(InnerSolution {
        residual: grad.norm(),
        omega_star: omega,
        iters,
    })
}

/// Runs `lrs.len()` gradient steps on `G(λ, ·)` and returns the whole trajectory
/// `ω_0, …, ω_K` (length `K + 1`).
pub fn inner_gd_trajectory<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega0: &Vector,
    lrs: &[f64],
    key: &SampleKey,
) -> Result<Vec<Vector>> {
    check_dim("lambda", oracle.outer_dim(), lambda)?;
    check_dim("omega0", oracle.inner_dim(), omega0)?;
    let mut traj = Vec::with_capacity(lrs.len() + 1);
    traj.push(omega0.clone());
    for &lr in lrs {
        let last = traj.last().expect("trajectory starts non-empty");
        let next = last - lr * oracle.grad_inner_omega(lambda, last, key);
        check_divergence(&next)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Outcome of one derivative check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsistencyReport {
    pub checks: Vec<CheckResult>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const PROBE_SEED: u64 = 0x5eed_d1ff;
const REL_FLOOR: f64 = 1e-8;

/// Compares the analytic full-batch derivatives of `oracle` at `(λ, ω)` with
/// central finite differences of step `h`.
///
/// Second-order products are probed along every coordinate direction plus one
/// seeded random direction. A check passes when its largest relative error is
/// at most `tol`; failures are reported, never raised.
pub fn check_oracle_consistency<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega: &Vector,
    h: f64,
    tol: f64,
) -> Result<ConsistencyReport> {
    check_dim("lambda", oracle.outer_dim(), lambda)?;
    check_dim("omega", oracle.inner_dim(), omega)?;
    let fb = SampleKey::FullBatch;
    let n = oracle.inner_dim();
    let mut report = ConsistencyReport::default();
    let mut push = |name: &'static str, err: f64| {
        report.checks.push(CheckResult {
            name,
            max_rel_error: err,
            passed: err <= tol,
        });
    };

    let fd = linalg::finite_diff_grad(|l| oracle.outer_value(l, omega, &fb), lambda, h)?;
    let an = oracle.grad_outer_lambda(lambda, omega, &fb);
    push("grad_outer_lambda", linalg::relative_error(&an, &fd, REL_FLOOR));

    let fd = linalg::finite_diff_grad(|w| oracle.outer_value(lambda, w, &fb), omega, h)?;
    let an = oracle.grad_outer_omega(lambda, omega, &fb);
    push("grad_outer_omega", linalg::relative_error(&an, &fd, REL_FLOOR));

    if oracle.inner_value(lambda, omega, &fb).is_some() {
        let fd = linalg::finite_diff_grad(|w| oracle.inner_value(lambda, w, &fb).unwrap_or(f64::NAN), omega, h)?;
        let an = oracle.grad_inner_omega(lambda, omega, &fb);
        push("grad_inner_omega", linalg::relative_error(&an, &fd, REL_FLOOR));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let mut directions: Vec<Vector> = (0..n)
        .map(|i| {
            let mut e = Vector::zeros(n);
            e[i] = 1.0;
            e
        })
        .collect();
    directions.push(Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));

    let mut hvp_err: f64 = 0.0;
    let mut cross_err: f64 = 0.0;
    for v in &directions {
        let fd = linalg::finite_diff_directional(|w| oracle.grad_inner_omega(lambda, w, &fb), omega, v, h)?;
        let an = oracle.hvp_inner(lambda, omega, v, &fb);
        hvp_err = hvp_err.max(linalg::relative_error(&an, &fd, REL_FLOOR));

        let fd = linalg::finite_diff_grad(|l| oracle.grad_inner_omega(l, omega, &fb).dot(v), lambda, h)?;
        let an = oracle.cross_jvp_inner(lambda, omega, v, &fb);
        cross_err = cross_err.max(linalg::relative_error(&an, &fd, REL_FLOOR));
    }
    push("hvp_inner", hvp_err);
    push("cross_jvp_inner", cross_err);
    Ok(report)
}
