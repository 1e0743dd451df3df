use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sista::bench::gen_synthetic_bundle;
use sista::ot::{self, CostParams, ObservedPlan, Potentials, Problem};
use sista::preprocess::build_problem;
use sista::Error;

fn random_problem(k: usize, n: usize, seed: u64) -> Problem {
    gen_synthetic_bundle(k, n, seed).unwrap().to_problem(None, None).unwrap()
}

fn random_point(k: usize, n: usize, rng: &mut ChaCha8Rng, scale: f64) -> (Potentials, CostParams) {
    let mut draw = |len: usize| Array1::from_shape_fn(len, |_| scale * rng.random_range(-1.0..1.0));
    let u = draw(n);
    let v = draw(n);
    let beta = draw(k);
    (Potentials::new(u, v), CostParams::new(beta))
}

/// Straight double loop over the support, with the cost rebuilt term by term.
fn brute_force_f(problem: &Problem, pot: &Potentials, beta: &CostParams) -> f64 {
    let n = problem.n();
    let obs = problem.plan();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !obs.support()[[i, j]] {
                continue;
            }
            let mut c = 0.0;
            for k in 0..problem.k() {
                c += beta.beta[k] * problem.basis().matrix(k)[[i, j]];
            }
            let s = pot.u[i] + pot.v[j] - c;
            total += s.exp() + obs.entries()[[i, j]] * (c - pot.u[i] - pot.v[j]);
        }
    }
    total
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn objective_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, n) in [(1, 2), (3, 5), (10, 20)] {
        let problem = random_problem(k, n, 10 + k as u64);
        for _ in 0..10 {
            let (pot, beta) = random_point(k, n, &mut rng, 1.0);
            let lib = ot::dual_objective(&pot, &beta, &problem).unwrap();
            let oracle = brute_force_f(&problem, &pot, &beta);
            assert!(rel_err(lib, oracle) < 1e-12, "{lib} vs {oracle}");
        }
    }
}

#[test]
fn structural_zeros_drop_out_of_every_sum() {
    let mut plan = Array2::from_elem((4, 4), 1.0);
    plan[[0, 3]] = 0.0;
    plan[[2, 1]] = 0.0;
    let raw = gen_synthetic_bundle(2, 4, 3).unwrap().basis;
    let problem = build_problem(ObservedPlan::new(plan).unwrap(), raw, 0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (pot, beta) = random_point(2, 4, &mut rng, 1.0);
    let pi = ot::plan(&pot, &beta, &problem).unwrap();
    assert_eq!(pi[[0, 3]], 0.0);
    assert_eq!(pi[[2, 1]], 0.0);
    let lib = ot::dual_objective(&pot, &beta, &problem).unwrap();
    assert!(rel_err(lib, brute_force_f(&problem, &pot, &beta)) < 1e-12);
}

fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

#[test]
fn gradients_match_finite_differences_of_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for (k, n) in [(3, 5), (10, 20)] {
        let problem = random_problem(k, n, 20 + k as u64);
        for _ in 0..10 {
            let (pot, beta) = random_point(k, n, &mut rng, 0.5);
            let gb = ot::grad_beta(&pot, &beta, &problem).unwrap();
            let (gu, gv) = ot::grad_uv(&pot, &beta, &problem).unwrap();
            for c in 0..k {
                let fd = central_difference(
                    |t| {
                        let mut b = beta.clone();
                        b.beta[c] += t;
                        brute_force_f(&problem, &pot, &b)
                    },
                    h,
                );
                assert!((fd - gb[c]).abs() <= 1e-5 * gb[c].abs().max(1.0), "beta {c}: {fd} vs {}", gb[c]);
            }
            for i in 0..n {
                let fd_u = central_difference(
                    |t| {
                        let mut p = pot.clone();
                        p.u[i] += t;
                        brute_force_f(&problem, &p, &beta)
                    },
                    h,
                );
                let fd_v = central_difference(
                    |t| {
                        let mut p = pot.clone();
                        p.v[i] += t;
                        brute_force_f(&problem, &p, &beta)
                    },
                    h,
                );
                assert!((fd_u - gu[i]).abs() <= 1e-5 * gu[i].abs().max(1.0));
                assert!((fd_v - gv[i]).abs() <= 1e-5 * gv[i].abs().max(1.0));
            }
        }
    }
}

#[test]
fn half_steps_hit_their_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 7, 50, 200] {
        let k = 3;
        let problem = random_problem(k, n, n as u64);
        let (pot, beta) = random_point(k, n, &mut rng, 1.0);
        let u = ot::sinkhorn_u_update(pot.v.view(), &beta, &problem).unwrap();
        let pi = ot::plan(&Potentials::new(u.clone(), pot.v.clone()), &beta, &problem).unwrap();
        for (i, row) in pi.rows().into_iter().enumerate() {
            let p = problem.plan().p()[i];
            assert!(rel_err(row.sum(), p) <= 1e-12);
        }
        let v = ot::sinkhorn_v_update(u.view(), &beta, &problem).unwrap();
        let pi = ot::plan(&Potentials::new(u, v), &beta, &problem).unwrap();
        for (j, col) in pi.columns().into_iter().enumerate() {
            let q = problem.plan().q()[j];
            assert!(rel_err(col.sum(), q) <= 1e-12);
        }
    }
}

#[test]
fn u_update_is_the_exact_block_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let problem = random_problem(4, 9, 6);
    let (pot, beta) = random_point(4, 9, &mut rng, 1.0);
    let u = ot::sinkhorn_u_update(pot.v.view(), &beta, &problem).unwrap();
    let at = |u: &Array1<f64>| ot::dual_objective(&Potentials::new(u.clone(), pot.v.clone()), &beta, &problem).unwrap();
    let f0 = at(&u);
    for i in 0..9 {
        for step in [1e-3, -1e-3, 0.5, -0.5] {
            let mut w = u.clone();
            w[i] += step;
            assert!(at(&w) >= f0 - 1e-14);
        }
    }
}

#[test]
fn sinkhorn_converges_to_stationary_potentials() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let problem = random_problem(5, 30, 7);
    let (_, beta) = random_point(5, 30, &mut rng, 0.5);
    let out = ot::sinkhorn_solve(&beta, &problem, 1e-13, 10_000).unwrap();
    assert!(out.converged);
    assert!(out.potentials.is_normalized());
    let (gu, gv) = ot::grad_uv(&out.potentials, &beta, &problem).unwrap();
    assert!(gu.iter().chain(gv.iter()).all(|g| g.abs() < 1e-12));
}

#[test]
fn objective_is_invariant_to_the_potential_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let problem = random_problem(3, 6, 8);
    let (pot, beta) = random_point(3, 6, &mut rng, 1.0);
    let f0 = ot::dual_objective(&pot, &beta, &problem).unwrap();
    for c in [-3.0, 0.7, 12.0] {
        let shifted = Potentials::new(&pot.u + c, &pot.v - c);
        let f1 = ot::dual_objective(&shifted, &beta, &problem).unwrap();
        assert!(rel_err(f0, f1) < 1e-12);
    }
}

#[test]
fn overflowing_exponent_is_reported() {
    let problem = random_problem(2, 3, 9);
    let pot = Potentials::new(Array1::from_elem(3, 400.0), Array1::from_elem(3, 400.0));
    let err = ot::dual_objective(&pot, &CostParams::zeros(2), &problem).unwrap_err();
    assert!(matches!(err, Error::Overflow { .. }), "{err}");
}

#[test]
fn rejects_plans_with_empty_margins_and_negative_entries() {
    let mut plan = Array2::from_elem((3, 3), 1.0);
    plan.row_mut(1).fill(0.0);
    assert!(matches!(
        ObservedPlan::new(plan).unwrap_err(),
        Error::ZeroMargin { axis: "row", index: 1 }
    ));
    let mut plan = Array2::from_elem((3, 3), 1.0);
    plan[[2, 0]] = -1.0;
    assert!(matches!(ObservedPlan::new(plan).unwrap_err(), Error::NegativeEntry { .. }));
    let raw = Array3::<f64>::zeros((2, 3, 4));
    assert!(build_problem(ObservedPlan::new(Array2::from_elem((3, 3), 1.0)).unwrap(), raw, 0.0, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_is_convex_along_segments(seed in 0u64..1000, t in 0.0f64..1.0) {
        let problem = random_problem(3, 5, seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pa, ba) = random_point(3, 5, &mut rng, 1.0);
        let (pb, bb) = random_point(3, 5, &mut rng, 1.0);
        let mix = |a: &Array1<f64>, b: &Array1<f64>| a * (1.0 - t) + b * t;
        let pm = Potentials::new(mix(&pa.u, &pb.u), mix(&pa.v, &pb.v));
        let bm = CostParams::new(mix(&ba.beta, &bb.beta));
        let f = |p: &Potentials, b: &CostParams| ot::dual_objective(p, b, &problem).unwrap();
        let chord = (1.0 - t) * f(&pa, &ba) + t * f(&pb, &bb);
        prop_assert!(f(&pm, &bm) <= chord + 1e-12 * chord.abs().max(1.0));
    }

    #[test]
    fn model_plan_is_positive_on_support(seed in 0u64..1000) {
        let problem = random_problem(2, 4, seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pot, beta) = random_point(2, 4, &mut rng, 2.0);
        let pi = ot::plan(&pot, &beta, &problem).unwrap();
        prop_assert!(pi.iter().all(|&x| x > 0.0 && x.is_finite()));
    }
}
