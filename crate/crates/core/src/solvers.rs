//! Outer-loop solvers.
//!
//! [`fsla_run`] is the fully single-loop algorithm: each hyper-iteration moves
//! λ along a momentum direction `d`, takes one stochastic gradient step on ω,
//! one step of the linear-system state `v ← v + β(∂_ωF − ∂²_ωG v)`, and refreshes
//! `d` with a STORM-style correction
//!
//! ```text
//! d_{k+1} = ∇f_{k+1}(ξ_{k+1}) + (1 − η_{k+1}) (d_k − ∇f_k(ξ_{k+1}))
//! ```
//!
//! where both hyper-gradient estimates share the sample keys `ξ_{k+1,4}`,
//! `ξ_{k+1,5}`. A step costs one Hessian-vector product and two cross products.
//!
//! [`baseline_run`] uses the same outer update but recomputes the hyper-gradient
//! from scratch every iteration with `T` inner steps and a `K`-step estimator.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypergrad::{self, BpVariant};
use crate::linalg::Vector;
use crate::problem::{check_dim, check_divergence, BilevelOracle, CountingOracle, PinnedSample, SampleKey};

/// Step sizes at iteration `k`: `α_k = δ/√(k+1)`, `τ = c_τ α_k`,
/// `β = c_β α_k`, `η = min(c_η α_k, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub delta: f64,
    pub c_tau: f64,
    pub c_beta: f64,
    pub c_eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub eta: f64,
}

impl Schedule {
    /// Constants used for the cleaning task: `δ = 1000`, `c_τ = 1e-3`,
    /// `c_β = 1e-4`, `c_η = 9e-4`.
    pub const CLEANING_DEFAULTS: Schedule = Schedule {
        delta: 1000.0,
        c_tau: 1e-3,
        c_beta: 1e-4,
        c_eta: 9e-4,
    };

    /// Rejects non-positive constants and any schedule whose largest `β`
    /// (at `k = 0`) exceeds `1/L`.
    pub fn validate(&self, smoothness: f64) -> Result<()> {
        for (name, x) in [
            ("delta", self.delta),
            ("c_tau", self.c_tau),
            ("c_beta", self.c_beta),
            ("c_eta", self.c_eta),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidSchedule(format!(
                    "{name} must be positive and finite, got {x}"
                )));
            }
        }
        let beta_max = self.c_beta * self.delta;
        if beta_max > 1.0 / smoothness {
            return Err(Error::InvalidSchedule(format!(
                "beta = c_beta * delta = {beta_max} exceeds 1/L = {}",
                1.0 / smoothness
            )));
        }
        Ok(())
    }

    pub fn rates(&self, k: usize) -> Rates {
        let alpha = self.delta / ((k + 1) as f64).sqrt();
        Rates {
            alpha,
            tau: self.c_tau * alpha,
            beta: self.c_beta * alpha,
            eta: (self.c_eta * alpha).min(1.0),
        }
    }
}

/// Sampling regime for stochastic oracle calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Batch {
    #[default]
    Full,
    Mini(usize),
}

/// Key for sub-sample `slot` of iteration `step`, derived only from
/// `(seed, step, slot)`.
pub fn derive_key(seed: u64, step: usize, slot: usize, batch: Batch) -> SampleKey {
    match batch {
        Batch::Full => SampleKey::FullBatch,
        Batch::Mini(batch_size) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(step as u64);
            rng.set_word_pos(2 * slot as u128);
            SampleKey::MiniBatch {
                seed: rng.next_u64(),
                batch_size,
            }
        }
    }
}

fn check_batch<O: BilevelOracle + ?Sized>(oracle: &O, batch: Batch) -> Result<()> {
    if let Batch::Mini(b) = batch {
        if b == 0 || b > oracle.dataset_size() {
            return Err(Error::InvalidConfig(format!(
                "batch size {b} outside [1, {}]",
                oracle.dataset_size()
            )));
        }
    }
    Ok(())
}

/// Where the fresh hyper-gradient of a step is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepOrdering {
    /// `v_{k+1}` uses `ω_k`; the hyper-gradient uses the updated `ω_{k+1}`.
    #[default]
    Sequential,
    /// Both the `v` update and the hyper-gradient use `ω_k`.
    Lagged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FslaState {
    pub k: usize,
    pub lambda: Vector,
    pub omega: Vector,
    pub v: Vector,
    pub d: Vector,
    pub prev_lambda: Vector,
    pub prev_omega: Vector,
    pub prev_v: Vector,
    /// Inner state at which the hyper-gradient behind `d` was evaluated.
    /// Equals `omega` under [`StepOrdering::Sequential`].
    pub grad_omega: Vector,
}

impl FslaState {
    /// State at `k = 0` with `d_0 = ∂_λF − ∂_ωλG v_0` on the keys of step 0.
    pub fn new<O: BilevelOracle + ?Sized>(
        oracle: &O,
        lambda0: Vector,
        omega0: Vector,
        v0: Vector,
        batch: Batch,
        seed: u64,
    ) -> Result<Self> {
        check_dim("lambda0", oracle.outer_dim(), &lambda0)?;
        check_dim("omega0", oracle.inner_dim(), &omega0)?;
        check_dim("v0", oracle.inner_dim(), &v0)?;
        check_batch(oracle, batch)?;
        let d = hypergrad::hypergrad_from_v(
            oracle,
            &lambda0,
            &omega0,
            &v0,
            &derive_key(seed, 0, 3, batch),
            &derive_key(seed, 0, 4, batch),
        );
        check_divergence(&d)?;
        Ok(Self {
            k: 0,
            prev_lambda: lambda0.clone(),
            prev_omega: omega0.clone(),
            prev_v: v0.clone(),
            grad_omega: omega0.clone(),
            lambda: lambda0,
            omega: omega0,
            v: v0,
            d,
        })
    }
}

/// One hyper-iteration `k → k + 1`.
pub fn fsla_step<O: BilevelOracle + ?Sized>(
    state: &FslaState,
    sched: &Schedule,
    oracle: &O,
    batch: Batch,
    seed: u64,
    ordering: StepOrdering,
) -> Result<FslaState> {
    let step = state.k + 1;
    let r = sched.rates(state.k);
    if r.beta > 1.0 / oracle.smoothness() {
        return Err(Error::InvalidSchedule(format!(
            "beta = {} exceeds 1/L = {}",
            r.beta,
            1.0 / oracle.smoothness()
        )));
    }
    let keys: [SampleKey; 5] = std::array::from_fn(|slot| derive_key(seed, step, slot, batch));

    let lambda = &state.lambda - r.alpha * &state.d;
    let omega = &state.omega - r.tau * oracle.grad_inner_omega(&lambda, &state.omega, &keys[0]);
    let v = hypergrad::v_update(oracle, &lambda, &state.omega, &state.v, r.beta, &keys[1], &keys[2]);
    let grad_omega = match ordering {
        StepOrdering::Sequential => omega.clone(),
        StepOrdering::Lagged => state.omega.clone(),
    };
    let g_new = hypergrad::hypergrad_from_v(oracle, &lambda, &grad_omega, &v, &keys[3], &keys[4]);
    let g_old = hypergrad::hypergrad_from_v(oracle, &state.lambda, &state.grad_omega, &state.v, &keys[3], &keys[4]);
    let d = g_new + (1.0 - r.eta) * (&state.d - g_old);
    for x in [&lambda, &omega, &v, &d] {
        check_divergence(x)?;
    }
    Ok(FslaState {
        k: step,
        prev_lambda: state.lambda.clone(),
        prev_omega: state.omega.clone(),
        prev_v: state.v.clone(),
        lambda,
        omega,
        v,
        d,
        grad_omega,
    })
}

/// Quantities a monitor can report about the current iterate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    /// `‖∇f(λ)‖`, when ground truth is available.
    pub grad_norm: Option<f64>,
    /// `f(λ)`, when ground truth is available.
    pub outer_value: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Called with `(λ_k, ω_k)` after every iteration. Monitor work is not counted.
pub type Monitor<'a> = &'a (dyn Fn(&Vector, &Vector) -> Metrics + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub metrics: Metrics,
    /// Cumulative, including initialization.
    pub hvp_calls: u64,
    /// Cumulative, including initialization.
    pub cross_jvp_calls: u64,
    /// Elapsed nanoseconds since the run started, when timing is enabled.
    pub wall_ns: Option<u64>,
}

impl TraceRecord {
    pub fn hvp_class_calls(&self) -> u64 {
        self.hvp_calls + self.cross_jvp_calls
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    /// State before the first iteration (`k = 0`).
    pub initial: TraceRecord,
    /// One record per iteration, `k = 1..=steps`.
    pub records: Vec<TraceRecord>,
    pub final_lambda: Vector,
    pub final_omega: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub ordering: StepOrdering,
    /// Fill [`TraceRecord::wall_ns`]. Off by default so traces are reproducible.
    pub timing: bool,
}

struct Recorder<'a, O> {
    oracle: &'a CountingOracle<O>,
    monitor: Option<Monitor<'a>>,
    start: Option<Instant>,
}

impl<'a, O: BilevelOracle> Recorder<'a, O> {
    fn record(&self, k: usize, lambda: &Vector, omega: &Vector) -> TraceRecord {
        let calls = self.oracle.calls();
        TraceRecord {
            k,
            metrics: self.monitor.map(|m| m(lambda, omega)).unwrap_or_default(),
            hvp_calls: calls.hvp,
            cross_jvp_calls: calls.cross_jvp,
            wall_ns: self.start.map(|s| s.elapsed().as_nanos() as u64),
        }
    }
}

/// Runs `steps` FSLA iterations from `(λ0, ω0)` with `v_0 = 0`.
/// Deterministic for a fixed `seed`.
#[allow(clippy::too_many_arguments)]
pub fn fsla_run<O: BilevelOracle>(
    oracle: &O,
    sched: &Schedule,
    lambda0: &Vector,
    omega0: &Vector,
    steps: usize,
    batch: Batch,
    seed: u64,
    monitor: Option<Monitor<'_>>,
    opts: RunOptions,
) -> Result<RunTrace> {
    if steps == 0 {
        return Err(Error::InvalidConfig("a run needs at least one step".into()));
    }
    sched.validate(oracle.smoothness())?;
    let counted = CountingOracle::new(oracle);
    let rec = Recorder {
        oracle: &counted,
        monitor,
        start: opts.timing.then(Instant::now),
    };
    let mut state = FslaState::new(
        &counted,
        lambda0.clone(),
        omega0.clone(),
        Vector::zeros(oracle.inner_dim()),
        batch,
        seed,
    )
    .map_err(|e| e.at_step(0))?;
    let initial = rec.record(0, &state.lambda, &state.omega);
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        state = fsla_step(&state, sched, &counted, batch, seed, opts.ordering).map_err(|e| e.at_step(state.k + 1))?;
        records.push(rec.record(state.k, &state.lambda, &state.omega));
    }
    Ok(RunTrace {
        initial,
        records,
        final_lambda: state.lambda,
        final_omega: state.omega,
    })
}

/// Hyper-gradient estimator used by a baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Unroll `K` inner steps at the inner learning rate and differentiate through them.
    Bp,
    /// Neumann series with `K + 1` terms; `beta` defaults to `2/(μ + L)`.
    Ns { beta: Option<f64> },
    /// At most `K` conjugate-gradient iterations.
    Cg { tol: f64 },
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Bp => "BP",
            Estimator::Ns { .. } => "NS",
            Estimator::Cg { .. } => "CG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub estimator: Estimator,
    /// Inner gradient steps per hyper-iteration.
    pub t: usize,
    /// Estimator steps.
    pub k: usize,
    /// Continue the inner solve from the previous ω instead of `ω0`.
    pub warm_start: bool,
    /// Inner learning rate; defaults to `1/L`.
    pub inner_lr: Option<f64>,
    pub schedule: Schedule,
}

impl BaselineConfig {
    pub fn validate(&self, smoothness: f64) -> Result<()> {
        if self.t == 0 {
            return Err(Error::InvalidConfig("baseline needs T >= 1 inner steps".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("baseline needs K >= 1 estimator steps".into()));
        }
        let lr = self.inner_lr(smoothness);
        if !(lr > 0.0 && lr < 2.0 / smoothness) {
            return Err(Error::InvalidConfig(format!(
                "inner learning rate {lr} outside (0, 2/L)"
            )));
        }
        match self.estimator {
            Estimator::Ns { beta: Some(b) } if !(b > 0.0 && b.is_finite()) => {
                return Err(Error::InvalidConfig(format!("Neumann step must be positive, got {b}")));
            }
            Estimator::Cg { tol } if !(tol > 0.0) => {
                return Err(Error::InvalidConfig(format!(
                    "CG tolerance must be positive, got {tol}"
                )));
            }
            _ => {}
        }
        self.schedule.validate(smoothness)
    }

    fn inner_lr(&self, smoothness: f64) -> f64 {
        self.inner_lr.unwrap_or(1.0 / smoothness)
    }

    /// `METHOD-T-K`, e.g. `NS-1-10`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.estimator.name(), self.t, self.k)
    }
}

fn estimate<O: BilevelOracle + ?Sized>(
    oracle: &O,
    cfg: &BaselineConfig,
    lambda: &Vector,
    omega: &Vector,
    key: SampleKey,
) -> Result<Vector> {
    let pinned = PinnedSample::new(oracle, key);
    match cfg.estimator {
        Estimator::Bp => {
            let lrs = vec![cfg.inner_lr(oracle.smoothness()); cfg.k];
            Ok(hypergrad::bp_hypergrad_with(&pinned, lambda, omega, &lrs, BpVariant::Terminal)?.0)
        }
        Estimator::Ns { beta } => {
            let beta = beta.unwrap_or(2.0 / (oracle.strong_convexity() + oracle.smoothness()));
            hypergrad::ns_hypergrad(&pinned, lambda, omega, cfg.k, beta)
        }
        Estimator::Cg { tol } => hypergrad::cg_hypergrad(&pinned, lambda, omega, cfg.k, tol),
    }
}

/// Runs `T` inner steps from `start` with per-step keys in slots `1..=T`.
fn inner_steps<O: BilevelOracle + ?Sized>(
    oracle: &O,
    cfg: &BaselineConfig,
    lambda: &Vector,
    start: &Vector,
    step: usize,
    batch: Batch,
    seed: u64,
) -> Result<Vector> {
    let lr = cfg.inner_lr(oracle.smoothness());
    let mut omega = start.clone();
    for i in 0..cfg.t {
        let key = derive_key(seed, step, 1 + i, batch);
        omega -= lr * oracle.grad_inner_omega(lambda, &omega, &key);
        check_divergence(&omega)?;
    }
    Ok(omega)
}

/// Baseline solver: per hyper-iteration, `T` inner steps (warm or cold), a
/// fresh `K`-step estimate on one pinned mini-batch, and the same momentum
/// update as [`fsla_run`]. The correction term re-runs the estimator at the
/// previous `(λ, ω̂)` on the same batch.
#[allow(clippy::too_many_arguments)]
pub fn baseline_run<O: BilevelOracle>(
    oracle: &O,
    cfg: &BaselineConfig,
    lambda0: &Vector,
    omega0: &Vector,
    steps: usize,
    batch: Batch,
    seed: u64,
    monitor: Option<Monitor<'_>>,
    opts: RunOptions,
) -> Result<RunTrace> {
    if steps == 0 {
        return Err(Error::InvalidConfig("a run needs at least one step".into()));
    }
    cfg.validate(oracle.smoothness())?;
    check_dim("lambda0", oracle.outer_dim(), lambda0)?;
    check_dim("omega0", oracle.inner_dim(), omega0)?;
    check_batch(oracle, batch)?;
    let counted = CountingOracle::new(oracle);
    let rec = Recorder {
        oracle: &counted,
        monitor,
        start: opts.timing.then(Instant::now),
    };

    let init = || -> Result<(Vector, Vector)> {
        let omega = inner_steps(&counted, cfg, lambda0, omega0, 0, batch, seed)?;
        let d = estimate(&counted, cfg, lambda0, &omega, derive_key(seed, 0, 0, batch))?;
        Ok((omega, d))
    };
    let (mut omega, mut d) = init().map_err(|e| e.at_step(0))?;
    let mut lambda = lambda0.clone();
    let initial = rec.record(0, &lambda, &omega);
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let step = k + 1;
        let r = cfg.schedule.rates(k);
        let mut advance = || -> Result<()> {
            let new_lambda = &lambda - r.alpha * &d;
            let start = if cfg.warm_start { &omega } else { omega0 };
            let new_omega = inner_steps(&counted, cfg, &new_lambda, start, step, batch, seed)?;
            let key = derive_key(seed, step, 0, batch);
            let g_new = estimate(&counted, cfg, &new_lambda, &new_omega, key)?;
            let g_old = estimate(&counted, cfg, &lambda, &omega, key)?;
            let new_d = g_new + (1.0 - r.eta) * (&d - g_old);
            check_divergence(&new_lambda)?;
            check_divergence(&new_d)?;
            lambda = new_lambda;
            omega = new_omega;
            d = new_d;
            Ok(())
        };
        advance().map_err(|e| e.at_step(step))?;
        records.push(rec.record(step, &lambda, &omega));
    }
    Ok(RunTrace {
        initial,
        records,
        final_lambda: lambda,
        final_omega: omega,
    })
}
