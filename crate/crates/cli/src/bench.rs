//! Experiment runners. Each returns a [`CsvReport`]; none of them touch the
//! filesystem.

use std::sync::Mutex;

use bilevel::hypergrad::{
    bp_hypergrad, cg_hypergrad, general_hypergrad_recursive, hypergrad_from_v, ns_hypergrad, v_update,
    HyperGradSequenceSpec, Mode,
};
use bilevel::problem::{check_oracle_consistency, inner_gd_trajectory};
use bilevel::problems::{gen_cleaning, gen_quadratic, CleaningProblem, QuadraticBilevel, SyntheticOmegaSeq};
use bilevel::solvers::{baseline_run, fsla_run, Batch, Metrics, RunOptions, RunTrace, Schedule};
use bilevel::{BilevelOracle, CountingOracle, SampleKey, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentKind, MethodConfig};
use crate::report::{Cell, CsvReport};

const FB: SampleKey = SampleKey::FullBatch;

pub fn quadratic_instance(cfg: &ExperimentConfig) -> bilevel::Result<QuadraticBilevel> {
    let q = &cfg.quadratic;
    gen_quadratic(cfg.seed, q.inner_dim, q.outer_dim, q.samples, q.noise_std)
}

pub fn cleaning_instance(cfg: &ExperimentConfig) -> bilevel::Result<CleaningProblem> {
    let c = &cfg.cleaning;
    gen_cleaning(cfg.seed, c.train, c.val, c.dim, c.gamma, c.separation, c.ridge)
}

/// Default FSLA schedule for a quadratic instance: `δ = 1/L_f` with `L_f` the
/// largest eigenvalue of the reduced Hessian, inner steps `τ_k = 1/(L√(k+1))`,
/// `β_k = 0.9/(L√(k+1))` and momentum weight `η_k = min(1/√(k+1), 1)`.
pub fn quadratic_schedule(q: &QuadraticBilevel) -> Schedule {
    let outer = q.outer_hessian().symmetric_eigenvalues().max();
    let delta = 1.0 / outer;
    let l = q.smoothness();
    Schedule {
        delta,
        c_tau: 1.0 / (l * delta),
        c_beta: 0.9 / (l * delta),
        c_eta: 1.0 / delta,
    }
}

/// The fixed outer point used by the hyper-gradient benchmark.
pub fn bench_lambda(seed: u64, m: usize) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Vector::from_fn(m, |_, _| rng.random_range(-1.0..1.0))
}

fn unit_direction(seed: u64, n: usize) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1fa);
    let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let norm = v.norm();
    v / norm
}

pub const HYPERGRAD_COLUMNS: [&str; 6] = ["method", "k", "error", "error_sq", "hvp_calls", "cross_jvp_calls"];

fn hypergrad_row(method: &str, k: usize, estimate: &Vector, truth: &Vector, calls: bilevel::OracleCalls) -> Vec<Cell> {
    let err = (estimate - truth).norm();
    vec![
        method.into(),
        k.into(),
        err.into(),
        (err * err).into(),
        calls.hvp.into(),
        calls.cross_jvp.into(),
    ]
}

/// Estimation error of BP, NS, CG and the FSLA `v`-recursion against the
/// closed-form hyper-gradient at a fixed seeded λ, for every K in the grid.
///
/// All four consume the same inner trajectory: `K` gradient steps at rate β
/// from `ω_0 = 0`. BP differentiates through it, the `v`-recursion runs along
/// it, and NS and CG are evaluated at its last point. The `alpha-*` curves hold
/// `ω_k = ω_λ + ω̃/K^α` for all `K` forward steps at `β = 1/L`.
pub fn run_hypergrad_bench(cfg: &ExperimentConfig) -> bilevel::Result<CsvReport> {
    let q = quadratic_instance(cfg)?;
    let h = &cfg.hypergrad;
    let lambda = bench_lambda(cfg.seed, q.outer_dim());
    let truth = q.exact_hypergrad(&lambda);
    let omega0 = Vector::zeros(q.inner_dim());
    let beta = h.beta;

    let rows: Vec<Vec<Vec<Cell>>> = h
        .k_grid
        .par_iter()
        .map(|&k| -> bilevel::Result<Vec<Vec<Cell>>> {
            let lrs = vec![beta; k];
            let traj = inner_gd_trajectory(&q, &lambda, &omega0, &lrs, &FB)?;
            let last = &traj[k];
            let mut rows = Vec::new();

            let counted = CountingOracle::new(&q);
            let (g, _) = bp_hypergrad(&counted, &lambda, &omega0, &lrs)?;
            rows.push(hypergrad_row("BP", k, &g, &truth, counted.calls()));

            let counted = CountingOracle::new(&q);
            let g = ns_hypergrad(&counted, &lambda, last, k, beta)?;
            rows.push(hypergrad_row("NS", k, &g, &truth, counted.calls()));

            let counted = CountingOracle::new(&q);
            let g = cg_hypergrad(&counted, &lambda, last, k, h.tol)?;
            rows.push(hypergrad_row("CG", k, &g, &truth, counted.calls()));

            let counted = CountingOracle::new(&q);
            let mut v = Vector::zeros(q.inner_dim());
            for w in &traj[..k] {
                v = v_update(&counted, &lambda, w, &v, beta, &FB, &FB);
            }
            let g = hypergrad_from_v(&counted, &lambda, last, &v, &FB, &FB);
            rows.push(hypergrad_row("FSLA-v", k, &g, &truth, counted.calls()));
            Ok(rows)
        })
        .collect::<bilevel::Result<_>>()?;

    let omega_star = q.inner_solve(&lambda);
    let tilde = unit_direction(cfg.seed, q.inner_dim());
    let alpha_beta = 1.0 / q.smoothness();
    let alpha_rows: Vec<Vec<Cell>> = h
        .alphas
        .par_iter()
        .flat_map_iter(|&alpha| h.k_grid.iter().map(move |&k| (alpha, k)))
        .map(|(alpha, k)| -> bilevel::Result<Vec<Cell>> {
            let seq = SyntheticOmegaSeq::new(omega_star.clone(), tilde.clone(), alpha)?;
            let counted = CountingOracle::new(&q);
            let g = held_sequence_estimate(&counted, &lambda, &seq, k, alpha_beta)?;
            Ok(hypergrad_row(&format!("alpha-{alpha}"), k, &g, &truth, counted.calls()))
        })
        .collect::<bilevel::Result<_>>()?;

    let mut report = CsvReport::new(HYPERGRAD_COLUMNS);
    for row in rows.into_iter().flatten().chain(alpha_rows) {
        report.push(row);
    }
    Ok(report)
}

/// `K` forward-mode steps with every `ω_k` held at `ω_λ + ω̃/K^α`.
pub fn held_sequence_estimate<O: BilevelOracle + ?Sized>(
    oracle: &O,
    lambda: &Vector,
    seq: &SyntheticOmegaSeq,
    k: usize,
    beta: f64,
) -> bilevel::Result<Vector> {
    let w = seq.at(k);
    let p = oracle.grad_outer_omega(lambda, &w, &FB);
    let spec = HyperGradSequenceSpec::constant(Mode::Forward, &w, beta, &p, k)?;
    general_hypergrad_recursive(oracle, lambda, &spec)
}

pub const SOLVER_COLUMNS: [&str; 9] = [
    "method",
    "k",
    "grad_norm",
    "outer_value",
    "val_loss",
    "auc",
    "hvp_calls",
    "cross_jvp_calls",
    "wall_ns",
];

enum SolverProblem {
    Quadratic(Box<QuadraticBilevel>),
    Cleaning(CleaningProblem),
}

/// Runs every configured method (in parallel) on the quadratic instance for
/// `fsla-run` or the cleaning task for `clean-bench`, one row per method and
/// hyper-iteration.
///
/// Quadratic rows carry `‖∇f(λ_k)‖` and `f(λ_k)`; cleaning rows carry the
/// validation loss at `ω_k` and the AUC of `−λ_k` as a corruption score.
pub fn run_solver_bench(cfg: &ExperimentConfig, timing: bool) -> bilevel::Result<CsvReport> {
    let problem = match cfg.experiment {
        ExperimentKind::CleanBench => SolverProblem::Cleaning(cleaning_instance(cfg)?),
        _ => SolverProblem::Quadratic(Box::new(quadratic_instance(cfg)?)),
    };
    let opts = RunOptions {
        ordering: cfg.solver.ordering.into(),
        timing,
    };
    let batch = match cfg.solver.batch {
        0 => Batch::Full,
        b => Batch::Mini(b),
    };
    let runs: Vec<Vec<Vec<Cell>>> = cfg
        .methods
        .par_iter()
        .map(|m| match &problem {
            SolverProblem::Quadratic(q) => run_quadratic(cfg, q, m, batch, opts),
            SolverProblem::Cleaning(c) => run_cleaning(cfg, c, m, batch, opts),
        })
        .collect::<bilevel::Result<_>>()?;
    let mut report = CsvReport::new(SOLVER_COLUMNS);
    for row in runs.into_iter().flatten() {
        report.push(row);
    }
    Ok(report)
}

fn run_method<O: BilevelOracle>(
    oracle: &O,
    m: &MethodConfig,
    schedule: Schedule,
    cfg: &ExperimentConfig,
    batch: Batch,
    opts: RunOptions,
    monitor: &(dyn Fn(&Vector, &Vector) -> Metrics + Sync),
) -> bilevel::Result<RunTrace> {
    let lambda0 = Vector::zeros(oracle.outer_dim());
    let omega0 = Vector::zeros(oracle.inner_dim());
    let steps = cfg.solver.steps;
    match m.baseline_config(schedule) {
        None => fsla_run(
            oracle,
            &schedule,
            &lambda0,
            &omega0,
            steps,
            batch,
            cfg.seed,
            Some(monitor),
            opts,
        ),
        Some(bc) => baseline_run(
            oracle,
            &bc,
            &lambda0,
            &omega0,
            steps,
            batch,
            cfg.seed,
            Some(monitor),
            opts,
        ),
    }
}

fn trace_rows(label: &str, trace: &RunTrace, auc: Option<&[f64]>) -> Vec<Vec<Cell>> {
    trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                label.into(),
                r.k.into(),
                r.metrics.grad_norm.into(),
                r.metrics.outer_value.into(),
                r.metrics.val_loss.into(),
                // entry 0 belongs to the initial point
                auc.map(|a| a[i + 1]).into(),
                r.hvp_calls.into(),
                r.cross_jvp_calls.into(),
                r.wall_ns.into(),
            ]
        })
        .collect()
}

fn run_quadratic(
    cfg: &ExperimentConfig,
    q: &QuadraticBilevel,
    m: &MethodConfig,
    batch: Batch,
    opts: RunOptions,
) -> bilevel::Result<Vec<Vec<Cell>>> {
    let schedule = cfg.solver.schedule.map_or_else(|| quadratic_schedule(q), Into::into);
    let monitor = |l: &Vector, _: &Vector| Metrics {
        grad_norm: Some(q.exact_hypergrad(l).norm()),
        outer_value: Some(q.value(l)),
        val_loss: None,
    };
    let trace = run_method(q, m, schedule, cfg, batch, opts, &monitor)?;
    Ok(trace_rows(&m.label(), &trace, None))
}

fn run_cleaning(
    cfg: &ExperimentConfig,
    c: &CleaningProblem,
    m: &MethodConfig,
    batch: Batch,
    opts: RunOptions,
) -> bilevel::Result<Vec<Vec<Cell>>> {
    let schedule = cfg.solver.schedule.map_or(Schedule::CLEANING_DEFAULTS, Into::into);
    let aucs = Mutex::new(Vec::with_capacity(cfg.solver.steps + 1));
    let monitor = |l: &Vector, w: &Vector| {
        aucs.lock().expect("monitor lock").push(c.corruption_auc(l));
        Metrics {
            grad_norm: None,
            outer_value: None,
            val_loss: Some(c.val_loss(w)),
        }
    };
    let trace = run_method(c, m, schedule, cfg, batch, opts, &monitor)?;
    let aucs = aucs.into_inner().expect("monitor lock");
    Ok(trace_rows(&m.label(), &trace, Some(&aucs)))
}

pub const ORACLE_COLUMNS: [&str; 5] = ["problem", "point", "check", "max_rel_error", "passed"];

/// Result of [`run_oracle_check`]: per-check rows plus the number of failed
/// checks.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheckOutcome {
    pub report: CsvReport,
    pub failures: usize,
}

/// A quadratic whose mixed second derivative is off by 10%. Used to confirm
/// that the self-check detects a wrong oracle.
pub struct BrokenOracle(pub QuadraticBilevel);

impl BilevelOracle for BrokenOracle {
    fn outer_dim(&self) -> usize {
        self.0.outer_dim()
    }
    fn inner_dim(&self) -> usize {
        self.0.inner_dim()
    }
    fn dataset_size(&self) -> usize {
        self.0.dataset_size()
    }
    fn outer_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> f64 {
        self.0.outer_value(lambda, omega, key)
    }
    fn inner_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Option<f64> {
        self.0.inner_value(lambda, omega, key)
    }
    fn grad_outer_lambda(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        self.0.grad_outer_lambda(lambda, omega, key)
    }
    fn grad_outer_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        self.0.grad_outer_omega(lambda, omega, key)
    }
    fn grad_inner_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        self.0.grad_inner_omega(lambda, omega, key)
    }
    fn hvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        self.0.hvp_inner(lambda, omega, v, key)
    }
    fn cross_jvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        1.1 * self.0.cross_jvp_inner(lambda, omega, v, key)
    }
    fn strong_convexity(&self) -> f64 {
        self.0.strong_convexity()
    }
    fn smoothness(&self) -> f64 {
        self.0.smoothness()
    }
}

fn check_points<O: BilevelOracle>(
    name: &str,
    oracle: &O,
    cfg: &ExperimentConfig,
    report: &mut CsvReport,
) -> bilevel::Result<usize> {
    let o = &cfg.oracle_check;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut failures = 0;
    for point in 0..o.points {
        let lambda = Vector::from_fn(oracle.outer_dim(), |_, _| rng.random_range(-1.0..1.0));
        let omega = Vector::from_fn(oracle.inner_dim(), |_, _| rng.random_range(-1.0..1.0));
        let rep = check_oracle_consistency(oracle, &lambda, &omega, o.h, o.tol)?;
        failures += rep.failures();
        for c in rep.checks {
            report.push(vec![
                name.into(),
                point.into(),
                c.name.into(),
                c.max_rel_error.into(),
                (if c.passed { "true" } else { "false" }).into(),
            ]);
        }
    }
    Ok(failures)
}

/// Finite-difference self-check of every listed problem at seeded points.
pub fn run_oracle_check(cfg: &ExperimentConfig) -> bilevel::Result<OracleCheckOutcome> {
    let mut report = CsvReport::new(ORACLE_COLUMNS);
    let mut failures = 0;
    for name in &cfg.oracle_check.problems {
        failures += match name.as_str() {
            "quadratic" => check_points(name, &quadratic_instance(cfg)?, cfg, &mut report)?,
            "cleaning" => check_points(name, &cleaning_instance(cfg)?, cfg, &mut report)?,
            "broken" => check_points(name, &BrokenOracle(quadratic_instance(cfg)?), cfg, &mut report)?,
            other => {
                return Err(bilevel::Error::InvalidConfig(format!("unknown problem `{other}`")));
            }
        };
    }
    Ok(OracleCheckOutcome { report, failures })
}
