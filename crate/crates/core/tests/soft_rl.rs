use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use sobirl::mdp::{induced_transition, sample_rollout, Policy, Start, TabularMdp};
use sobirl::reward::RewardModel;
use sobirl::rng::RngKey;
use sobirl::soft::{
    fixed_point_map, phi_derivatives, policy_evaluation, soft_bellman_apply, soft_value_from_q,
    softmax_policy, solve_soft_optimal, solve_soft_optimal_capped,
};
use sobirl::verify::{random_mdp, random_policy, random_vector};
use sobirl::Error;

const LN2: f64 = std::f64::consts::LN_2;

/// One state, two self-loop actions.
fn two_armed(gamma: f64, tau: f64) -> TabularMdp {
    TabularMdp::new(
        1,
        2,
        DMatrix::from_element(2, 1, 1.0),
        gamma,
        tau,
        DVector::from_element(1, 1.0),
    )
    .unwrap()
}

#[test]
fn bellman_loop1_cases() {
    let mdp = TabularMdp::loop1(0.9, 0.5);
    let r = DVector::from_element(1, 1.0);
    assert!((soft_bellman_apply(&mdp, &r, &DVector::zeros(1))[0] - 1.0).abs() < 1e-15);
    assert!(
        (soft_bellman_apply(&mdp, &r, &DVector::from_element(1, 10.0))[0] - 10.0).abs() < 1e-14
    );
}

#[test]
fn solve_loop1() {
    let mdp = TabularMdp::loop1(0.9, 0.5);
    let sol = solve_soft_optimal(
        &mdp,
        &DVector::from_element(1, 1.0),
        &DVector::zeros(1),
        1e-12,
    )
    .unwrap();
    assert!((sol.q_star[0] - 10.0).abs() < 1e-11);
    assert!((sol.v_star[0] - 10.0).abs() < 1e-11);
    assert_eq!(sol.pi_star.prob(0, 0), 1.0);
}

#[test]
fn solve_symmetric_two_armed() {
    let mdp = two_armed(0.5, 1.0);
    let sol = solve_soft_optimal(&mdp, &DVector::zeros(2), &DVector::zeros(2), 1e-12).unwrap();
    assert!((sol.q_star[0] - LN2).abs() < 1e-11 && (sol.q_star[1] - LN2).abs() < 1e-11);
    assert!((sol.v_star[0] - 2.0 * LN2).abs() < 1e-11);
    assert!((sol.pi_star.prob(0, 0) - 0.5).abs() < 1e-15);
}

#[test]
fn solution_satisfies_consistency_on_random_instance() {
    let mut rng = RngKey::new(11).rng();
    let mdp = random_mdp(&mut rng, 5, 3, 0.9, 0.7);
    let r = random_vector(&mut rng, 15, 1.0);
    let sol = solve_soft_optimal(&mdp, &r, &DVector::zeros(15), 1e-10).unwrap();
    assert!(sol.residual <= 1e-10);
    assert!(sol.error_bound <= 1e-10);
    let tq = soft_bellman_apply(&mdp, &r, &sol.q_star);
    assert!((tq - &sol.q_star).amax() <= 1e-10);
    for s in 0..5 {
        let lse = 0.7
            * (0..3)
                .map(|a| (sol.q_star[s * 3 + a] / 0.7).exp())
                .sum::<f64>()
                .ln();
        assert!((sol.v_star[s] - lse).abs() < 1e-8);
        for a in 0..3 {
            let implied = ((sol.q_star[s * 3 + a] - sol.v_star[s]) / 0.7).exp();
            assert!((sol.pi_star.prob(s, a) - implied).abs() < 1e-8);
        }
    }
}

#[test]
fn error_bound_covers_true_distance() {
    let mut rng = RngKey::new(12).rng();
    let mdp = random_mdp(&mut rng, 4, 2, 0.8, 0.5);
    let r = random_vector(&mut rng, 8, 1.0);
    let reference = solve_soft_optimal(&mdp, &r, &DVector::zeros(8), 1e-14).unwrap();
    for tol in [1e-2, 1e-4, 1e-6] {
        let sol = solve_soft_optimal(&mdp, &r, &DVector::zeros(8), tol).unwrap();
        let dist = (&sol.q_star - &reference.q_star).amax();
        assert!(dist <= sol.error_bound + 1e-13 && sol.error_bound <= tol);
    }
}

#[test]
fn iteration_cap_is_reported() {
    let mdp = TabularMdp::loop1(0.99, 0.5);
    let err = solve_soft_optimal_capped(
        &mdp,
        &DVector::from_element(1, 1.0),
        &DVector::zeros(1),
        1e-12,
        10,
    );
    assert!(matches!(err, Err(Error::IterationCap { .. })));
}

#[test]
fn warm_start_that_passes_is_returned_unchanged() {
    let mdp = TabularMdp::loop1(0.9, 0.5);
    let r = DVector::from_element(1, 1.0);
    let sol = solve_soft_optimal(&mdp, &r, &DVector::from_element(1, 10.0), 1e-6).unwrap();
    assert_eq!(sol.iterations, 0);
    assert_eq!(sol.q_star[0], 10.0);
}

#[test]
fn softmax_cases() {
    let pi = softmax_policy(&DVector::from_vec(vec![1.0, 1.0]), 2, 1.0);
    assert_eq!(pi.row(0), &[0.5, 0.5]);
    let pi = softmax_policy(&DVector::from_vec(vec![3f64.ln(), 0.0]), 2, 1.0);
    assert!((pi.prob(0, 0) - 0.75).abs() < 1e-15 && (pi.prob(0, 1) - 0.25).abs() < 1e-15);
}

#[test]
fn softmax_survives_large_inputs() {
    let pi = softmax_policy(&DVector::from_vec(vec![1e4, 1e4 - 1.0]), 2, 1.0);
    assert!(pi.probs().iter().all(|p| p.is_finite()));
    let v = soft_value_from_q(&DVector::from_vec(vec![1e4, 1e4]), 2, 1.0);
    assert!((v[0] - 1e4 - LN2).abs() < 1e-9);
}

#[test]
fn soft_value_cases() {
    let v = soft_value_from_q(&DVector::from_vec(vec![0.0, 0.0]), 2, 2.0);
    assert!((v[0] - 2.0 * LN2).abs() < 1e-15);
    assert!((v[0] - 1.386294).abs() < 1e-6);
    let v = soft_value_from_q(&DVector::from_vec(vec![-3.5, 4.25]), 1, 0.3);
    assert_eq!(v.as_slice(), &[-3.5, 4.25]);
}

#[test]
fn policy_evaluation_loop1() {
    let mdp = TabularMdp::loop1(0.9, 0.5);
    let pv =
        policy_evaluation(&mdp, &DVector::from_element(1, 1.0), &Policy::uniform(1, 1)).unwrap();
    assert!((pv.v_pi[0] - 10.0).abs() < 1e-12 && (pv.q_pi[0] - 10.0).abs() < 1e-12);
}

#[test]
fn policy_evaluation_matches_optimum_on_symmetric_instance() {
    let mdp = two_armed(0.5, 1.0);
    let pv = policy_evaluation(&mdp, &DVector::zeros(2), &Policy::uniform(1, 2)).unwrap();
    assert!((pv.v_pi[0] - 2.0 * LN2).abs() < 1e-12);
}

#[test]
fn policy_evaluation_rejects_zero_probability() {
    let mdp = two_armed(0.5, 1.0);
    let err = policy_evaluation(&mdp, &DVector::zeros(2), &Policy::deterministic(1, 2, &[0]));
    assert!(matches!(err, Err(Error::EntropyUndefined { s: 0, a: 1 })));
}

#[test]
fn policy_evaluation_identities() {
    let mut rng = RngKey::new(13).rng();
    let mdp = random_mdp(&mut rng, 4, 3, 0.85, 0.6);
    let r = random_vector(&mut rng, 12, 1.0);
    let pi = random_policy(&mut rng, 4, 3, 2.0);
    let pv = policy_evaluation(&mdp, &r, &pi).unwrap();
    let q = &r + 0.85 * (mdp.transitions() * &pv.v_pi);
    assert!((q - &pv.q_pi).amax() < 1e-9);
    for s in 0..4 {
        let v: f64 = (0..3)
            .map(|a| pi.prob(s, a) * (-0.6 * pi.prob(s, a).ln() + pv.q_pi[s * 3 + a]))
            .sum();
        assert!((v - pv.v_pi[s]).abs() < 1e-9);
    }
}

#[test]
fn policy_evaluation_matches_monte_carlo() {
    let mut rng = RngKey::new(14).rng();
    let gamma = 0.8;
    let mdp = random_mdp(&mut rng, 3, 2, gamma, 0.5);
    let r = random_vector(&mut rng, 6, 1.0);
    let pi = random_policy(&mut rng, 3, 2, 1.0);
    let pv = policy_evaluation(&mdp, &r, &pi).unwrap();
    // per-step soft reward r - tau log pi; the tail beyond 120 steps is below 1e-11
    let key = RngKey::new(99);
    let n = 20_000;
    let returns: Vec<f64> = (0..n)
        .map(|j| {
            let d = sample_rollout(&mdp, &pi, Start::State(1), 120, &mut key.rng_at(j));
            let mut g = 0.0;
            let mut disc = 1.0;
            for &(s, a) in &d.steps {
                g += disc * (r[s * 2 + a] - 0.5 * pi.prob(s, a).ln());
                disc *= gamma;
            }
            g
        })
        .collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!(
        (mean - pv.v_pi[1]).abs() <= 4.0 * se,
        "MC {mean} vs {} (se {se})",
        pv.v_pi[1]
    );
}

#[test]
fn fixed_point_map_loop1_is_affine() {
    let mdp = TabularMdp::loop1(0.9, 0.5);
    for v in [-2.0, 0.0, 3.5] {
        let out = fixed_point_map(
            &mdp,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, v),
        );
        assert!((out[0] - (1.0 + 0.9 * v)).abs() < 1e-14);
    }
}

#[test]
fn fixed_point_map_fixes_v_star() {
    let mut rng = RngKey::new(15).rng();
    let mdp = random_mdp(&mut rng, 4, 3, 0.9, 0.4);
    let r = random_vector(&mut rng, 12, 1.0);
    let sol = solve_soft_optimal(&mdp, &r, &DVector::zeros(12), 1e-12).unwrap();
    assert!((fixed_point_map(&mdp, &r, &sol.v_star) - &sol.v_star).amax() < 1e-8);
}

#[test]
fn phi_derivatives_loop1() {
    let mdp = TabularMdp::loop1(0.9, 0.5);
    let der = phi_derivatives(
        &mdp,
        &RewardModel::tabular(1),
        &DVector::from_element(1, 1.0),
        &DVector::zeros(1),
    )
    .unwrap();
    assert!((der.d_v[(0, 0)] - 0.9).abs() < 1e-15);
    assert_eq!(der.d_x[(0, 0)], 1.0);
}

#[test]
fn phi_derivatives_at_v_star_equal_scaled_transition() {
    let mut rng = RngKey::new(16).rng();
    let mdp = random_mdp(&mut rng, 5, 3, 0.9, 0.8);
    let x = random_vector(&mut rng, 15, 1.0);
    let rm = RewardModel::tabular(15);
    let sol = solve_soft_optimal(&mdp, &x, &DVector::zeros(15), 1e-12).unwrap();
    let der = phi_derivatives(&mdp, &rm, &x, &sol.v_star).unwrap();
    let target = 0.9 * induced_transition(&mdp, &sol.pi_star).unwrap();
    assert!((der.d_v - target).amax() <= 1e-8);
}

#[test]
fn phi_derivatives_match_central_differences() {
    let mut rng = RngKey::new(17).rng();
    let (ns, na) = (4, 3);
    let mdp = random_mdp(&mut rng, ns, na, 0.8, 0.6);
    let rm = RewardModel::linear(DMatrix::from_fn(ns * na, 2, |_, _| {
        rng.random_range(-1.0..1.0)
    }));
    let x = random_vector(&mut rng, 2, 1.0);
    let v = random_vector(&mut rng, ns, 2.0);
    let der = phi_derivatives(&mdp, &rm, &x, &v).unwrap();
    let h = 1e-5;
    let phi = |x: &DVector<f64>, v: &DVector<f64>| fixed_point_map(&mdp, &rm.reward(x).unwrap(), v);
    let mut fd_v = DMatrix::zeros(ns, ns);
    for j in 0..ns {
        let mut vp = v.clone();
        vp[j] += h;
        let mut vm = v.clone();
        vm[j] -= h;
        fd_v.set_column(j, &((phi(&x, &vp) - phi(&x, &vm)) / (2.0 * h)));
    }
    let mut fd_x = DMatrix::zeros(ns, 2);
    for j in 0..2 {
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        fd_x.set_column(j, &((phi(&xp, &v) - phi(&xm, &v)) / (2.0 * h)));
    }
    assert!((&fd_v - &der.d_v).norm() / der.d_v.norm() <= 1e-6);
    assert!((&fd_x - &der.d_x).norm() / der.d_x.norm() <= 1e-6);
}

fn random_q_pair(seed: u64, n: usize) -> (DVector<f64>, DVector<f64>) {
    let mut rng = RngKey::new(seed).fork(3).rng();
    (
        random_vector(&mut rng, n, 5.0),
        random_vector(&mut rng, n, 5.0),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bellman_is_a_contraction(seed in 0u64..1_000_000, ns in 1usize..6, na in 1usize..4, gamma in 0.1f64..0.99) {
        let mut rng = RngKey::new(seed).rng();
        let tau = rng.random_range(0.1..2.0);
        let mdp = random_mdp(&mut rng, ns, na, gamma, tau);
        let r = random_vector(&mut rng, ns * na, 1.0);
        let (q1, q2) = random_q_pair(seed, ns * na);
        let lhs = (soft_bellman_apply(&mdp, &r, &q1) - soft_bellman_apply(&mdp, &r, &q2)).amax();
        prop_assert!(lhs <= gamma * (&q1 - &q2).amax() + 1e-12);
    }

    #[test]
    fn fixed_point_map_is_a_contraction(seed in 0u64..1_000_000, ns in 1usize..6, na in 1usize..4) {
        let mut rng = RngKey::new(seed).rng();
        let mdp = random_mdp(&mut rng, ns, na, 0.9, 0.5);
        let r = random_vector(&mut rng, ns * na, 1.0);
        let v1 = random_vector(&mut rng, ns, 4.0);
        let v2 = random_vector(&mut rng, ns, 4.0);
        let lhs = (fixed_point_map(&mdp, &r, &v1) - fixed_point_map(&mdp, &r, &v2)).amax();
        prop_assert!(lhs <= 0.9 * (&v1 - &v2).amax() + 1e-12);
    }

    #[test]
    fn log_sum_exp_bounds(seed in 0u64..1_000_000, na in 1usize..6, tau in 0.05f64..3.0) {
        let mut rng = RngKey::new(seed).rng();
        let q = random_vector(&mut rng, 3 * na, 10.0);
        let v = soft_value_from_q(&q, na, tau);
        for s in 0..3 {
            let m = (0..na).map(|a| q[s * na + a]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v[s] >= m - 1e-12);
            prop_assert!(v[s] <= m + tau * (na as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(seed in 0u64..1_000_000, c in -50.0f64..50.0) {
        let mut rng = RngKey::new(seed).rng();
        let q = random_vector(&mut rng, 6, 5.0);
        let a = softmax_policy(&q, 3, 0.7);
        let b = softmax_policy(&q.add_scalar(c), 3, 0.7);
        prop_assert!((a.probs() - b.probs()).amax() <= 1e-12);
        for s in 0..2 {
            prop_assert!((a.row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_log_is_two_lipschitz(seed in 0u64..1_000_000, tau in 0.1f64..2.0) {
        let (q1, q2) = random_q_pair(seed, 8);
        let l1 = softmax_policy(&q1, 4, tau).log_probs().unwrap();
        let l2 = softmax_policy(&q2, 4, tau).log_probs().unwrap();
        prop_assert!((l1 - l2).amax() <= 2.0 * (&q1 - &q2).amax() / tau + 1e-12);
    }

    #[test]
    fn tabular_environment_drift(seed in 0u64..1_000_000, gamma in 0.1f64..0.95) {
        let mut rng = RngKey::new(seed).rng();
        let mdp = random_mdp(&mut rng, 3, 2, gamma, 0.5);
        let pi = random_policy(&mut rng, 3, 2, 2.0);
        let r1 = random_vector(&mut rng, 6, 1.0);
        let r2 = random_vector(&mut rng, 6, 1.0);
        let q1 = policy_evaluation(&mdp, &r1, &pi).unwrap().q_pi;
        let q2 = policy_evaluation(&mdp, &r2, &pi).unwrap().q_pi;
        prop_assert!((q1 - q2).amax() <= (&r1 - &r2).amax() / (1.0 - gamma) + 1e-10);
    }
}
