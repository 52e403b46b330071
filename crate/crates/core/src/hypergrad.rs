//! Hyper-gradient estimators.
//!
//! Every approximate estimator here is an instance of one product-sum
//!
//! ```text
//! ∇f_K = ∂_λF(λ, ω_K) − Σ_{k<K} β_k s_k
//! ```
//!
//! with `M_s = I − β_s ∂²_ωG(λ, ω_s)` and two ways of forming `s_k`:
//!
//! - **backward**: `s_k = ∂_ωλG(λ, ω_k) · M_{k+1} M_{k+2} ⋯ M_{K−1} · p_K`
//!   (the unrolled-gradient / `A_k` recursion, accumulated against one terminal vector);
//! - **forward**: `s_k = ∂_ωλG(λ, ω_K) · M_{K−1} ⋯ M_{k+1} · p_k`, i.e.
//!   `v_{k+1} = M_k v_k + β_k p_k` from `v_0 = 0` and `∇f_K = ∂_λF − ∂_ωλG · v_K`.
//!
//! The factor orderings above are the ones produced by the respective
//! recursions; they only differ when the Hessian changes along `{ω_k}`.

use crate::error::{Error, Result};
use crate::linalg::{self, FnOperator, Vector};
use crate::problem::{self, check_dim, BilevelOracle, SampleKey};

const FB: SampleKey = SampleKey::FullBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Backward,
    Forward,
}

/// Inputs of the general product-sum: `omegas = ω_0…ω_K` (length `K + 1`),
/// `betas = β_0…β_{K−1}`, and `ps` holding `p_0…p_{K−1}` (forward) or the
/// single terminal `p_K` (backward).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradSequenceSpec {
    mode: Mode,
    omegas: Vec<Vector>,
    betas: Vec<f64>,
    ps: Vec<Vector>,
}

impl HyperGradSequenceSpec {
    pub fn new(mode: Mode, omegas: Vec<Vector>, betas: Vec<f64>, ps: Vec<Vector>) -> Result<Self> {
        let k = betas.len();
        if omegas.len() != k + 1 {
            return Err(Error::InvalidConfig(format!(
                "sequence spec needs K + 1 = {} inner states, got {}",
                k + 1,
                omegas.len()
            )));
        }
        let want_ps = match mode {
            Mode::Backward => 1,
            Mode::Forward => k,
        };
        if ps.len() != want_ps {
            return Err(Error::InvalidConfig(format!(
                "{mode:?} sequence spec needs {want_ps} p vectors, got {}",
                ps.len()
            )));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "step coefficients must be finite and non-negative, got {b}"
            )));
        }
        let n = omegas[0].len();
        for v in omegas.iter().chain(ps.iter()) {
            check_dim("sequence spec vector", n, v)?;
        }
        Ok(Self {
            mode,
            omegas,
            betas,
            ps,
        })
    }

    /// `K` steps with `ω_k ≡ omega`, `β_k ≡ beta` and `p ≡ p`.
    pub fn constant(mode: Mode, omega: &Vector, beta: f64, p: &Vector, k: usize) -> Result<Self> {
        let ps = match mode {
            Mode::Backward => vec![p.clone()],
            Mode::Forward => vec![p.clone(); k],
        };
        Self::new(mode, vec![omega.clone(); k + 1], vec![beta; k], ps)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// `K`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn omegas(&self) -> &[Vector] {
        &self.omegas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn ps(&self) -> &[Vector] {
        &self.ps
    }

    fn terminal(&self) -> &Vector {
        &self.omegas[self.steps()]
    }
}

/// `M_s w = w − β_s ∂²_ωG(λ, ω_s) w`.
fn contract<O: BilevelOracle + ?Sized>(oracle: &O, lambda: &Vector, omega: &Vector, beta: f64, w: &Vector) -> Vector {
    w - beta * oracle.hvp_inner(lambda, omega, w, &FB)
}

fn check_spec<O: BilevelOracle + ?Sized>(oracle: &O, lambda: &Vector, spec: &HyperGradSequenceSpec) -> Result<()> {
    check_dim("lambda", oracle.outer_dim(), lambda)?;
    check_dim("sequence spec state", oracle.inner_dim(), &spec.omegas[0])
}

/// Literal O(K²) evaluation of the product-sum, one product chain per term.
/// Serves as a brute-force reference for [`general_hypergrad_recursive`].
pub fn general_hypergrad_naive<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    spec: &HyperGradSequenceSpec,
) -> Result<Vector> {
    check_spec(oracle, lambda, spec)?;
    let k_total = spec.steps();
    let omegas = &spec.omegas;
    let mut sum = Vector::zeros(oracle.outer_dim());
    for k in 0..k_total {
        let term = match spec.mode {
            Mode::Backward => {
                let mut w = spec.ps[0].clone();
                for s in (k + 1..k_total).rev() {
                    w = contract(oracle, lambda, &omegas[s], spec.betas[s], &w);
                }
                oracle.cross_jvp_inner(lambda, &omegas[k], &w, &FB)
            }
            Mode::Forward => {
                let mut w = spec.ps[k].clone();
                for s in k + 1..k_total {
                    w = contract(oracle, lambda, &omegas[s], spec.betas[s], &w);
                }
                oracle.cross_jvp_inner(lambda, spec.terminal(), &w, &FB)
            }
        };
        sum.axpy(spec.betas[k], &term, 1.0);
    }
    let g = oracle.grad_outer_lambda(lambda, spec.terminal(), &FB) - sum;
    linalg::ensure_finite(&g, "hyper-gradient")?;
    Ok(g)
}

/// O(K) evaluation of the product-sum.
///
/// Backward mode walks `u ← M_k u` from `p_K` towards `k = 0`, accumulating
/// `β_k ∂_ωλG(λ, ω_k) u` (K cross products, K − 1 Hessian products, never
/// forming the m×n accumulator). Forward mode runs `v ← M_k v + β_k p_k`
/// (K Hessian products) and finishes with one cross product at `ω_K`.
pub fn general_hypergrad_recursive<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    spec: &HyperGradSequenceSpec,
) -> Result<Vector> {
    check_spec(oracle, lambda, spec)?;
    let k_total = spec.steps();
    let omegas = &spec.omegas;
    let correction = match spec.mode {
        Mode::Backward => {
            let mut acc = Vector::zeros(oracle.outer_dim());
            let mut u = spec.ps[0].clone();
            for k in (0..k_total).rev() {
                let c = oracle.cross_jvp_inner(lambda, &omegas[k], &u, &FB);
                acc.axpy(spec.betas[k], &c, 1.0);
                if k > 0 {
                    u = contract(oracle, lambda, &omegas[k], spec.betas[k], &u);
                }
            }
            acc
        }
        Mode::Forward => {
            let mut v = Vector::zeros(oracle.inner_dim());
            for k in 0..k_total {
                v = contract(oracle, lambda, &omegas[k], spec.betas[k], &v);
                v.axpy(spec.betas[k], &spec.ps[k], 1.0);
            }
            oracle.cross_jvp_inner(lambda, spec.terminal(), &v, &FB)
        }
    };
    let g = oracle.grad_outer_lambda(lambda, spec.terminal(), &FB) - correction;
    linalg::ensure_finite(&g, "hyper-gradient")?;
    Ok(g)
}

/// Implicit-function hyper-gradient `∂_λF − ∂_ωλG · (∂²_ωG)⁻¹ ∂_ωF` at `ω_star`,
/// with the linear system solved by CG to residual `tol`.
pub fn exact_hypergrad<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega_star: &Vector,
    tol: f64,
) -> Result<Vector> {
    check_dim("lambda", oracle.outer_dim(), lambda)?;
    check_dim("omega_star", oracle.inner_dim(), omega_star)?;
    let residual = oracle.grad_inner_omega(lambda, omega_star, &FB).norm();
    if residual > 10.0 * tol {
        return Err(Error::InnerNotConverged {
            residual,
            limit: 10.0 * tol,
        });
    }
    let n = oracle.inner_dim();
    let x = solve_adjoint(oracle, lambda, omega_star, tol, 10 * n + 100)?;
    let g = oracle.grad_outer_lambda(lambda, omega_star, &FB) - oracle.cross_jvp_inner(lambda, omega_star, &x, &FB);
    linalg::ensure_finite(&g, "hyper-gradient")?;
    Ok(g)
}

fn solve_adjoint<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<Vector> {
    Ok(cg_adjoint(oracle, lambda, omega, tol, max_iter)?.x)
}

fn cg_adjoint<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<linalg::CgSolution> {
    let b = oracle.grad_outer_omega(lambda, omega, &FB);
    let op = FnOperator::new(oracle.inner_dim(), |v: &Vector| oracle.hvp_inner(lambda, omega, v, &FB));
    linalg::cg_solve(&op, &b, tol, max_iter)
}

/// Which vector the unrolled estimator contracts against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BpVariant {
    /// Backward mode with the terminal `p_K = ∂_ωF(λ, ω̂_K)`: the exact
    /// derivative of `λ ↦ F(λ, ω̂_K(λ))` through the unrolled steps.
    #[default]
    Terminal,
    /// Forward mode with `p_k = ∂_ωF(λ, ω̂_k)` along the trajectory.
    PerStep,
}

/// Unrolled (back-propagation through time) estimator: `lrs.len()` gradient
/// steps from `omega0`, then the product-sum over that trajectory with
/// `β_k = lrs[k]`. Returns the estimate and the trajectory `ω̂_0…ω̂_K`.
pub fn bp_hypergrad<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega0: &Vector,
    lrs: &[f64],
) -> Result<(Vector, Vec<Vector>)> {
    bp_hypergrad_with(oracle, lambda, omega0, lrs, BpVariant::Terminal)
}

pub fn bp_hypergrad_with<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega0: &Vector,
    lrs: &[f64],
    variant: BpVariant,
) -> Result<(Vector, Vec<Vector>)> {
    let lr_max = 2.0 / oracle.smoothness();
    if let Some(lr) = lrs.iter().find(|lr| !(**lr > 0.0 && **lr < lr_max)) {
        return Err(Error::InvalidConfig(format!(
            "unrolled step {lr} outside (0, 2/L) = (0, {lr_max})"
        )));
    }
    let traj = problem::inner_gd_trajectory(oracle, lambda, omega0, lrs, &FB)?;
    let k = lrs.len();
    let spec = match variant {
        BpVariant::Terminal => {
            let p = oracle.grad_outer_omega(lambda, &traj[k], &FB);
            HyperGradSequenceSpec::new(Mode::Backward, traj.clone(), lrs.to_vec(), vec![p])?
        }
        BpVariant::PerStep => {
            let ps = traj[..k]
                .iter()
                .map(|w| oracle.grad_outer_omega(lambda, w, &FB))
                .collect();
            HyperGradSequenceSpec::new(Mode::Forward, traj.clone(), lrs.to_vec(), ps)?
        }
    };
    let g = general_hypergrad_recursive(oracle, lambda, &spec)?;
    Ok((g, traj))
}

/// Neumann-series estimator at a fixed inner state: the inverse Hessian is
/// replaced by `β Σ_{j=0}^{K} (I − β ∂²_ωG(λ, ω̂))^j`, i.e. the product-sum
/// with constant sequences over `K + 1` steps. Costs exactly `K + 1` Hessian
/// products and one cross product.
pub fn ns_hypergrad<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega_hat: &Vector,
    k: usize,
    beta: f64,
) -> Result<Vector> {
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "Neumann step must be positive, got {beta}"
        )));
    }
    let spec = ns_spec(oracle, lambda, omega_hat, k, beta)?;
    general_hypergrad_recursive(oracle, lambda, &spec)
}

/// The constant-sequence specification evaluated by [`ns_hypergrad`].
pub fn ns_spec<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega_hat: &Vector,
    k: usize,
    beta: f64,
) -> Result<HyperGradSequenceSpec> {
    check_dim("omega_hat", oracle.inner_dim(), omega_hat)?;
    let p = oracle.grad_outer_omega(lambda, omega_hat, &FB);
    HyperGradSequenceSpec::constant(Mode::Forward, omega_hat, beta, &p, k + 1)
}

/// Conjugate-gradient estimator: at most `k` CG iterations on
/// `∂²_ωG(λ, ω̂) x = ∂_ωF(λ, ω̂)`, then `∂_λF − ∂_ωλG · x`.
pub fn cg_hypergrad<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega_hat: &Vector,
    k: usize,
    tol: f64,
) -> Result<Vector> {
    check_dim("lambda", oracle.outer_dim(), lambda)?;
    check_dim("omega_hat", oracle.inner_dim(), omega_hat)?;
    let x = solve_adjoint(oracle, lambda, omega_hat, tol, k)?;
    let g = oracle.grad_outer_lambda(lambda, omega_hat, &FB) - oracle.cross_jvp_inner(lambda, omega_hat, &x, &FB);
    linalg::ensure_finite(&g, "hyper-gradient")?;
    Ok(g)
}

/// Forward-mode specification reproducing [`cg_hypergrad`]: CG's iterate obeys
/// `x_{k+1} = (I − α_k A) x_k + α_k (b + γ_k d_{k−1})`, so `β_k = α_k` and
/// `p_k = b + γ_k d_{k−1}` with `ω_k ≡ ω̂`.
pub fn cg_spec<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega_hat: &Vector,
    k: usize,
    tol: f64,
) -> Result<HyperGradSequenceSpec> {
    check_dim("omega_hat", oracle.inner_dim(), omega_hat)?;
    let sol = cg_adjoint(oracle, lambda, omega_hat, tol, k)?;
    let b = oracle.grad_outer_omega(lambda, omega_hat, &FB);
    let t = &sol.trace;
    let ps = (0..t.alphas.len())
        .map(|i| {
            if i == 0 || t.gammas[i] == 0.0 {
                b.clone()
            } else {
                &b + t.gammas[i] * &t.directions[i - 1]
            }
        })
        .collect();
    HyperGradSequenceSpec::new(
        Mode::Forward,
        vec![omega_hat.clone(); t.alphas.len() + 1],
        t.alphas.clone(),
        ps,
    )
}

/// One step of the persistent linear-system state:
/// `v ← β ∂_ωF(λ, ω; ξ_grad) + v − β ∂²_ωG(λ, ω; ξ_hvp) v`.
pub fn v_update<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega: &Vector,
    v: &Vector,
    beta: f64,
    grad_key: &SampleKey,
    hvp_key: &SampleKey,
) -> Vector {
    let hv = oracle.hvp_inner(lambda, omega, v, hvp_key);
    let p = oracle.grad_outer_omega(lambda, omega, grad_key);
    v + beta * (p - hv)
}

/// `∂_λF(λ, ω; ξ_grad) − ∂_ωλG(λ, ω; ξ_cross) v`.
pub fn hypergrad_from_v<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    omega: &Vector,
    v: &Vector,
    grad_key: &SampleKey,
    cross_key: &SampleKey,
) -> Vector {
    oracle.grad_outer_lambda(lambda, omega, grad_key) - oracle.cross_jvp_inner(lambda, omega, v, cross_key)
}
