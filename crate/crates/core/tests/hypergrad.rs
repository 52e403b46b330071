mod common;

use bilevel::hypergrad::{
    bp_hypergrad, bp_hypergrad_with, cg_hypergrad, cg_spec, exact_hypergrad, general_hypergrad_naive,
    general_hypergrad_recursive, hypergrad_from_v, ns_hypergrad, ns_spec, v_update, BpVariant, HyperGradSequenceSpec,
    Mode,
};
use bilevel::linalg::{finite_diff_grad, relative_error};
use bilevel::problem::inner_gd_trajectory;
use bilevel::problems::{QuadraticBilevel, SyntheticOmegaSeq};
use bilevel::{BilevelOracle, CountingOracle, Error, Matrix, SampleKey, Vector};
use common::*;
use rand::Rng;

const FB: SampleKey = SampleKey::FullBatch;

/// `ω_λ = λ` with an identity inner Hessian: `N = n` rows, `A_iw = √(N/2) I`,
/// `A_il = −A_iw`, `b_i = 0`.
fn identity_inner(a_o: Matrix, b_o: Vector) -> QuadraticBilevel {
    let n = a_o.ncols();
    assert_eq!(a_o.nrows(), n);
    let s = (n as f64 / 2.0).sqrt();
    let eye = Matrix::identity(n, n) * s;
    QuadraticBilevel::from_parts(a_o, b_o, -eye.clone(), eye, Vector::zeros(n)).unwrap()
}

fn random_spec<O: BilevelOracle>(o: &O, seed: u64, mode: Mode) -> (Vector, HyperGradSequenceSpec) {
    let mut r = rng(seed);
    let k = r.random_range(0..=8);
    let n = o.inner_dim();
    let lambda = random_vector(&mut r, o.outer_dim(), 1.0);
    let omegas: Vec<Vector> = (0..=k).map(|_| random_vector(&mut r, n, 1.0)).collect();
    let betas: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0) / o.smoothness()).collect();
    let n_ps = if mode == Mode::Backward { 1 } else { k };
    let ps = (0..n_ps).map(|_| random_vector(&mut r, n, 1.0)).collect();
    (lambda, HyperGradSequenceSpec::new(mode, omegas, betas, ps).unwrap())
}

#[test]
fn recursive_matches_naive_on_fifty_specs() {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mode = if seed % 2 == 0 { Mode::Backward } else { Mode::Forward };
        let (a, b) = if seed % 4 < 2 {
            let q = gen_quadratic_dims(seed);
            let (l, s) = random_spec(&q, seed, mode);
            (
                general_hypergrad_naive(&q, &l, &s).unwrap(),
                general_hypergrad_recursive(&q, &l, &s).unwrap(),
            )
        } else {
            let c = small_cleaning(seed);
            let (l, s) = random_spec(&c, seed, mode);
            (
                general_hypergrad_naive(&c, &l, &s).unwrap(),
                general_hypergrad_recursive(&c, &l, &s).unwrap(),
            )
        };
        worst = worst.max((a - b).amax());
    }
    assert!(worst <= 1e-10, "max deviation {worst:e}");
}

fn gen_quadratic_dims(seed: u64) -> QuadraticBilevel {
    let n = 1 + (seed as usize % 6);
    let m = 1 + (seed as usize / 6 % 6);
    bilevel::problems::gen_quadratic(seed, n, m, 60, 0.2).unwrap()
}

#[test]
fn empty_sum_and_single_term() {
    let c = small_cleaning(1);
    let mut r = rng(1);
    let l = random_vector(&mut r, c.outer_dim(), 1.0);
    let w0 = random_vector(&mut r, 3, 1.0);
    let w1 = random_vector(&mut r, 3, 1.0);
    let p = random_vector(&mut r, 3, 1.0);

    for mode in [Mode::Backward, Mode::Forward] {
        let s = HyperGradSequenceSpec::new(
            mode,
            vec![w0.clone()],
            vec![],
            if mode == Mode::Backward {
                vec![p.clone()]
            } else {
                vec![]
            },
        )
        .unwrap();
        let expect = c.grad_outer_lambda(&l, &w0, &FB);
        assert_eq!(general_hypergrad_naive(&c, &l, &s).unwrap(), expect);
        assert_eq!(general_hypergrad_recursive(&c, &l, &s).unwrap(), expect);
    }

    let beta = 0.3;
    let s = HyperGradSequenceSpec::new(
        Mode::Backward,
        vec![w0.clone(), w1.clone()],
        vec![beta],
        vec![p.clone()],
    )
    .unwrap();
    let expect = c.grad_outer_lambda(&l, &w1, &FB) - beta * c.cross_jvp_inner(&l, &w0, &p, &FB);
    assert!((general_hypergrad_naive(&c, &l, &s).unwrap() - &expect).amax() < 1e-15);
    assert!((general_hypergrad_recursive(&c, &l, &s).unwrap() - &expect).amax() < 1e-15);
}

#[test]
fn zero_steps_sizes_leave_only_the_direct_term() {
    let q = small_quadratic(2);
    let mut r = rng(2);
    let l = random_vector(&mut r, 3, 1.0);
    let omegas: Vec<Vector> = (0..6).map(|_| random_vector(&mut r, 4, 1.0)).collect();
    let ps: Vec<Vector> = (0..5).map(|_| random_vector(&mut r, 4, 1.0)).collect();
    let s = HyperGradSequenceSpec::new(Mode::Forward, omegas.clone(), vec![0.0; 5], ps).unwrap();
    let g = general_hypergrad_recursive(&q, &l, &s).unwrap();
    assert_eq!(g, q.grad_outer_lambda(&l, &omegas[5], &FB));
}

#[test]
fn spec_rejects_inconsistent_lengths() {
    let w = Vector::zeros(2);
    assert!(HyperGradSequenceSpec::new(Mode::Forward, vec![w.clone(); 2], vec![0.1; 2], vec![w.clone(); 2]).is_err());
    assert!(HyperGradSequenceSpec::new(Mode::Backward, vec![w.clone(); 3], vec![0.1; 2], vec![w.clone(); 2]).is_err());
    assert!(HyperGradSequenceSpec::new(Mode::Forward, vec![w.clone(); 2], vec![-0.1], vec![w.clone()]).is_err());
    assert!(HyperGradSequenceSpec::new(Mode::Forward, vec![w.clone(); 2], vec![f64::NAN], vec![w]).is_err());
}

#[test]
fn exact_matches_finite_differences_and_dense_truth() {
    for seed in 0..3 {
        let q = reference_quadratic(seed);
        let mut r = rng(100 + seed);
        let l = random_vector(&mut r, 5, 1.0);
        let (w_star, truth) = quadratic_truth(&q, &l);
        let g = exact_hypergrad(&q, &l, &w_star, 1e-12).unwrap();
        assert!(relative_error(&g, &truth, 1e-12) < 1e-8);
        assert!(relative_error(&q.exact_hypergrad(&l), &truth, 1e-12) < 1e-8);
        let fd = finite_diff_grad(|x| q.outer_value(x, &q.inner_solve(x), &FB), &l, 1e-5).unwrap();
        assert!(relative_error(&g, &fd, 1e-12) < 1e-4);
    }
}

#[test]
fn exact_on_cleaning_matches_finite_differences_of_the_solved_inner() {
    let c = small_cleaning(4);
    let mut r = rng(4);
    let l = random_vector(&mut r, c.outer_dim(), 1.0);
    let solve = |x: &Vector| c.fit_inner(x, 1e-13, 200_000).unwrap();
    let g = exact_hypergrad(&c, &l, &solve(&l), 1e-12).unwrap();
    let fd = finite_diff_grad(|x| c.val_loss(&solve(x)), &l, 1e-5).unwrap();
    assert!(
        relative_error(&g, &fd, 1e-10) < 1e-4,
        "{}",
        relative_error(&g, &fd, 1e-10)
    );
}

#[test]
fn exact_on_identity_inner_collapses_to_the_outer_gradient() {
    let mut r = rng(5);
    let a_o = Matrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0));
    let b_o = random_vector(&mut r, 3, 1.0);
    let q = identity_inner(a_o.clone(), b_o.clone());
    let l = random_vector(&mut r, 3, 1.0);
    assert!((q.inner_solve(&l) - &l).amax() < 1e-12);
    let g = exact_hypergrad(&q, &l, &l, 1e-12).unwrap();
    let expect = (2.0 / 3.0) * a_o.transpose() * (&a_o * &l - &b_o);
    assert!((g - expect).amax() < 1e-12);

    let opt = q.outer_optimum().unwrap();
    assert!(exact_hypergrad(&q, &opt, &opt, 1e-12).unwrap().norm() < 1e-9);
}

#[test]
fn exact_refuses_an_unconverged_inner_state() {
    let q = small_quadratic(6);
    let l = Vector::zeros(3);
    let w = q.inner_solve(&l).add_scalar(0.5);
    let err = exact_hypergrad(&q, &l, &w, 1e-8).unwrap_err();
    assert!(matches!(err, Error::InnerNotConverged { .. }));
}

#[test]
fn ns_is_the_constant_sequence_special_case() {
    for seed in 0..5 {
        let c = small_cleaning(seed);
        let mut r = rng(seed);
        let l = random_vector(&mut r, c.outer_dim(), 1.0);
        let w = random_vector(&mut r, 3, 1.0);
        let beta = 0.8 / c.smoothness();
        for k in [0, 1, 4, 9] {
            let p = c.grad_outer_omega(&l, &w, &FB);
            let spec = HyperGradSequenceSpec::constant(Mode::Forward, &w, beta, &p, k + 1).unwrap();
            assert_eq!(spec, ns_spec(&c, &l, &w, k, beta).unwrap());
            let a = ns_hypergrad(&c, &l, &w, k, beta).unwrap();
            let b = general_hypergrad_recursive(&c, &l, &spec).unwrap();
            assert!((a - b).amax() <= 1e-12);
        }
    }
}

#[test]
fn ns_with_zero_steps_is_one_neumann_term() {
    let c = small_cleaning(7);
    let l = Vector::from_element(c.outer_dim(), 0.2);
    let w = Vector::from_element(3, -0.4);
    let beta = 0.1;
    let p = c.grad_outer_omega(&l, &w, &FB);
    let expect = c.grad_outer_lambda(&l, &w, &FB) - beta * c.cross_jvp_inner(&l, &w, &p, &FB);
    assert!((ns_hypergrad(&c, &l, &w, 0, beta).unwrap() - expect).amax() < 1e-15);
}

#[test]
fn ns_call_budget() {
    let c = CountingOracle::new(small_cleaning(8));
    let l = Vector::zeros(40);
    let w = Vector::zeros(3);
    for k in [0usize, 3, 10] {
        let before = c.calls();
        ns_hypergrad(&c, &l, &w, k, 0.1).unwrap();
        let d = c.calls().since(&before);
        assert_eq!(d.hvp, k as u64 + 1);
        assert_eq!(d.cross_jvp, 1);
    }
}

#[test]
fn ns_converges_to_exact_at_the_inner_optimum() {
    let q = reference_quadratic(0);
    let l = random_vector(&mut rng(9), 5, 1.0);
    let w = q.inner_solve(&l);
    let truth = q.exact_hypergrad(&l);
    // the per-sample-mean form of a 2e-5 step over 10 000 samples
    let g = ns_hypergrad(&q, &l, &w, 2000, 0.2).unwrap();
    assert!((&g - &truth).norm() < 1e-4, "{}", (&g - &truth).norm());
    let g = ns_hypergrad(&q, &l, &w, 2000, 1.0 / q.smoothness()).unwrap();
    assert!((&g - &truth).norm() < 1e-6);
}

#[test]
fn identity_hessian_makes_short_estimators_exact() {
    let mut r = rng(10);
    let a_o = Matrix::from_fn(4, 4, |_, _| r.random_range(-1.0..1.0));
    let q = identity_inner(a_o, random_vector(&mut r, 4, 1.0));
    let l = random_vector(&mut r, 4, 1.0);
    let truth = q.exact_hypergrad(&l);
    assert!((ns_hypergrad(&q, &l, &l, 1, 1.0).unwrap() - &truth).amax() < 1e-12);
    assert!((cg_hypergrad(&q, &l, &l, 1, 1e-14).unwrap() - &truth).amax() < 1e-12);
}

#[test]
fn cg_terminates_at_the_dimension() {
    for seed in 0..10 {
        let q = reference_quadratic(seed);
        let l = random_vector(&mut rng(seed), 5, 1.0);
        let w = q.inner_solve(&l);
        let g = cg_hypergrad(&q, &l, &w, 5, 1e-14).unwrap();
        assert!((g - q.exact_hypergrad(&l)).norm() <= 1e-7);
    }
}

#[test]
fn cg_error_shrinks_with_more_iterations() {
    for seed in 0..5 {
        let q = reference_quadratic(seed);
        let l = random_vector(&mut rng(seed), 5, 1.0);
        let w = q.inner_solve(&l);
        let truth = q.exact_hypergrad(&l);
        let errs: Vec<f64> = (1..=5)
            .map(|k| (cg_hypergrad(&q, &l, &w, k, 1e-14).unwrap() - &truth).norm())
            .collect();
        for pair in errs.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "seed {seed}: {errs:?}");
        }
    }
}

#[test]
fn cg_is_a_forward_mode_specification() {
    for seed in 0..10 {
        let c = small_cleaning(seed);
        let mut r = rng(seed);
        let l = random_vector(&mut r, c.outer_dim(), 1.0);
        let w = random_vector(&mut r, 3, 1.0);
        for k in 1..=3 {
            let spec = cg_spec(&c, &l, &w, k, 1e-14).unwrap();
            assert_eq!(spec.mode(), Mode::Forward);
            let a = general_hypergrad_recursive(&c, &l, &spec).unwrap();
            let b = cg_hypergrad(&c, &l, &w, k, 1e-14).unwrap();
            assert!((a - b).amax() <= 1e-10);
        }
    }
}

#[test]
fn bp_without_steps_is_the_direct_term() {
    let c = small_cleaning(11);
    let l = Vector::from_element(40, 0.5);
    let w0 = Vector::from_element(3, 0.1);
    let (g, traj) = bp_hypergrad(&c, &l, &w0, &[]).unwrap();
    assert_eq!(traj, vec![w0.clone()]);
    assert_eq!(g, c.grad_outer_lambda(&l, &w0, &FB));
}

#[test]
fn bp_differentiates_the_unrolled_trajectory() {
    let c = small_cleaning(12);
    let mut r = rng(12);
    let l = random_vector(&mut r, c.outer_dim(), 1.0);
    let w0 = random_vector(&mut r, 3, 1.0);
    let lrs: Vec<f64> = (0..6).map(|i| (0.5 + 0.1 * i as f64) / c.smoothness()).collect();
    let (g, _) = bp_hypergrad(&c, &l, &w0, &lrs).unwrap();
    let unrolled = |x: &Vector| {
        let traj = inner_gd_trajectory(&c, x, &w0, &lrs, &FB).unwrap();
        c.outer_value(x, traj.last().unwrap(), &FB)
    };
    let fd = finite_diff_grad(unrolled, &l, 1e-5).unwrap();
    assert!(
        relative_error(&g, &fd, 1e-10) < 1e-6,
        "{}",
        relative_error(&g, &fd, 1e-10)
    );
}

#[test]
fn bp_per_step_variant_uses_trajectory_gradients() {
    let c = small_cleaning(13);
    let l = Vector::from_element(40, 0.1);
    let w0 = Vector::from_element(3, 0.2);
    let lrs = vec![0.5 / c.smoothness(); 4];
    let (g, traj) = bp_hypergrad_with(&c, &l, &w0, &lrs, BpVariant::PerStep).unwrap();
    let ps = traj[..4].iter().map(|w| c.grad_outer_omega(&l, w, &FB)).collect();
    let spec = HyperGradSequenceSpec::new(Mode::Forward, traj.clone(), lrs.clone(), ps).unwrap();
    assert_eq!(g, general_hypergrad_recursive(&c, &l, &spec).unwrap());
}

#[test]
fn bp_rejects_unstable_steps() {
    let q = small_quadratic(14);
    let z = Vector::zeros(3);
    let err = bp_hypergrad(&q, &z, &Vector::zeros(4), &[2.0 / q.smoothness()]).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn bp_equals_ns_when_the_hessian_is_constant() {
    for seed in 0..5 {
        let q = small_quadratic(seed);
        assert!(q.constant_hessian());
        let mut r = rng(seed);
        let l = random_vector(&mut r, 3, 1.0);
        let w0 = random_vector(&mut r, 4, 1.0);
        let beta = 0.7 / q.smoothness();
        for k in 1..=6 {
            let (g, traj) = bp_hypergrad(&q, &l, &w0, &vec![beta; k]).unwrap();
            let terminal = &traj[k];
            // the backward formulation is invariant to the ω-sequence here
            let p = q.grad_outer_omega(&l, terminal, &FB);
            let held =
                HyperGradSequenceSpec::new(Mode::Backward, vec![terminal.clone(); k + 1], vec![beta; k], vec![p])
                    .unwrap();
            assert!((&g - general_hypergrad_recursive(&q, &l, &held).unwrap()).amax() <= 1e-10);
            // K unrolled steps contribute K Neumann terms
            assert!((&g - ns_hypergrad(&q, &l, terminal, k - 1, beta).unwrap()).amax() <= 1e-10);
        }
    }
}

#[test]
fn longer_unrolls_estimate_better() {
    let mut wins = 0;
    for seed in 0..5 {
        let q = reference_quadratic(seed);
        let l = random_vector(&mut rng(seed), 5, 1.0);
        let truth = q.exact_hypergrad(&l);
        let w0 = Vector::zeros(5);
        let err = |k: usize| (bp_hypergrad(&q, &l, &w0, &vec![0.2; k]).unwrap().0 - &truth).norm();
        if err(50) < err(10) {
            wins += 1;
        }
    }
    assert_eq!(wins, 5);
}

#[test]
fn v_update_basics() {
    let q = CountingOracle::new(small_quadratic(15));
    let mut r = rng(15);
    let l = random_vector(&mut r, 3, 1.0);
    let w = random_vector(&mut r, 4, 1.0);
    let p = q.grad_outer_omega(&l, &w, &FB);
    let v_star = dense_solve(&q.inner().inner_hessian(), &p);

    let before = q.calls();
    let fixed = v_update(&q, &l, &w, &v_star, 0.3, &FB, &FB);
    assert_eq!(q.calls().since(&before).hvp, 1);
    assert!((fixed - &v_star).amax() < 1e-12);

    let v = random_vector(&mut r, 4, 1.0);
    assert_eq!(v_update(&q, &l, &w, &v, 0.0, &FB, &FB), v);

    let beta = 1.0 / q.smoothness();
    let mut v = Vector::zeros(4);
    for _ in 0..500 {
        v = v_update(&q, &l, &w, &v, beta, &FB, &FB);
    }
    assert!((v - v_star).norm() < 1e-6);
}

#[test]
fn v_recursion_contracts_and_stays_bounded() {
    for seed in 0..5 {
        let c = small_cleaning(seed);
        let mut r = rng(seed);
        let l = random_vector(&mut r, c.outer_dim(), 1.0);
        let w = random_vector(&mut r, 3, 1.0);
        let p = c.grad_outer_omega(&l, &w, &FB);
        let mut hess = Matrix::zeros(3, 3);
        for j in 0..3 {
            let mut e = Vector::zeros(3);
            e[j] = 1.0;
            hess.set_column(j, &c.hvp_inner(&l, &w, &e, &FB));
        }
        let v_star = dense_solve(&hess, &p);
        let (mu, big_l) = (c.strong_convexity(), c.smoothness());
        let bound = p.norm() / mu;
        for beta in [0.3 / big_l, 1.0 / big_l] {
            let mut v = random_vector(&mut r, 3, 1.0);
            v *= bound * r.random_range(0.0..1.0) / v.norm();
            for _ in 0..200 {
                let next = v_update(&c, &l, &w, &v, beta, &FB, &FB);
                assert!((&next - &v_star).norm() <= (1.0 - beta * mu) * (&v - &v_star).norm() + 1e-12);
                assert!(next.norm() <= bound + 1e-9);
                v = next;
            }
        }
    }
}

#[test]
fn hypergrad_from_v_cases() {
    let q = small_quadratic(16);
    let mut r = rng(16);
    let l = random_vector(&mut r, 3, 1.0);
    let w = random_vector(&mut r, 4, 1.0);
    assert_eq!(
        hypergrad_from_v(&q, &l, &w, &Vector::zeros(4), &FB, &FB),
        q.grad_outer_lambda(&l, &w, &FB)
    );

    let v = random_vector(&mut r, 4, 1.0);
    let dense = q.grad_outer_lambda(&l, &w, &FB) - q.cross_matrix() * &v;
    assert!((hypergrad_from_v(&q, &l, &w, &v, &FB, &FB) - dense).amax() < 1e-12);

    let ws = q.inner_solve(&l);
    let v_star = dense_solve(&q.inner_hessian(), &q.grad_outer_omega(&l, &ws, &FB));
    let g = hypergrad_from_v(&q, &l, &ws, &v_star, &FB, &FB);
    assert!((g - exact_hypergrad(&q, &l, &ws, 1e-12).unwrap()).amax() < 1e-9);
}

/// `ω_k ≡ ω_λ + ω̃ / K^α` for every step of a `K`-step forward estimate.
fn held_sequence_error(q: &QuadraticBilevel, l: &Vector, seq: &SyntheticOmegaSeq, k: usize, beta: f64) -> f64 {
    let w = seq.at(k);
    let p = q.grad_outer_omega(l, &w, &FB);
    let spec = HyperGradSequenceSpec::constant(Mode::Forward, &w, beta, &p, k).unwrap();
    (general_hypergrad_recursive(q, l, &spec).unwrap() - q.exact_hypergrad(l)).norm()
}

#[test]
fn error_tracks_the_inner_sequence_error() {
    let q = reference_quadratic(1);
    let l = random_vector(&mut rng(17), 5, 1.0);
    let ws = q.inner_solve(&l);
    let beta = 1.0 / q.smoothness();
    let ks: Vec<usize> = (4..=12).map(|p| 1 << p).collect();
    for alpha in [1.0, 0.5] {
        let seq = SyntheticOmegaSeq::new(ws.clone(), Vector::from_element(5, 1.0), alpha).unwrap();
        let errs: Vec<f64> = ks.iter().map(|&k| held_sequence_error(&q, &l, &seq, k, beta)).collect();
        let e_omega: Vec<f64> = ks.iter().map(|&k| seq.error_at(k)).collect();
        let slope = loglog_slope(&e_omega, &errs);
        assert!((slope - 1.0).abs() <= 0.2, "alpha {alpha}: slope {slope}");
    }
}

#[test]
fn decaying_steps_give_square_root_rate() {
    // β_k = c/(k + k0) with k0 = cL so every step contracts; inner error Θ(k^-1/2)
    let q = reference_quadratic(2);
    let l = random_vector(&mut rng(18), 5, 1.0);
    let ws = q.inner_solve(&l);
    let c = 2.0 / q.strong_convexity();
    let k0 = c * q.smoothness();
    let seq = SyntheticOmegaSeq::new(ws, Vector::from_element(5, 1.0), 0.5).unwrap();
    let truth = q.exact_hypergrad(&l);
    let ks: Vec<usize> = (4..=12).map(|p| 1 << p).collect();
    let errs: Vec<f64> = ks
        .iter()
        .map(|&k| {
            let omegas: Vec<Vector> = (1..=k + 1).map(|i| seq.at(i)).collect();
            let betas = (0..k).map(|i| c / (i as f64 + 1.0 + k0)).collect();
            let ps = omegas[..k].iter().map(|w| q.grad_outer_omega(&l, w, &FB)).collect();
            let spec = HyperGradSequenceSpec::new(Mode::Forward, omegas, betas, ps).unwrap();
            (general_hypergrad_recursive(&q, &l, &spec).unwrap() - &truth).norm()
        })
        .collect();
    let kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let half = kf.len() / 2;
    let slope = loglog_slope(&kf[half..], &errs[half..]);
    assert!((slope + 0.5).abs() <= 0.15, "slope {slope}, errors {errs:?}");
}
