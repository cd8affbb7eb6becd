//! Entropy-regularized dynamic programming: the soft Bellman operator, soft
//! value iteration, softmax recovery, policy evaluation and the fixed-point
//! map `phi(x, v) = tau * log sum_a exp((r(x) + gamma P v) / tau)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{induced_transition, resolvent_matrix, Policy, TabularMdp};
use crate::reward::RewardModel;

pub const DEFAULT_ITER_CAP: usize = 1_000_000;

/// Max-shifted `tau * log sum exp(row / tau)`.
pub fn log_sum_exp(row: &[f64], tau: f64) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = row.iter().map(|q| ((q - m) / tau).exp()).sum();
    m + tau * sum.ln()
}

fn softmax_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, q) in out.iter_mut().zip(row) {
        *o = ((q - m) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn soft_value_from_q(q: &DVector<f64>, n_actions: usize, tau: f64) -> DVector<f64> {
    let n_states = q.len() / n_actions;
    DVector::from_fn(n_states, |s, _| {
        log_sum_exp(&q.as_slice()[s * n_actions..(s + 1) * n_actions], tau)
    })
}

pub fn softmax_policy(q: &DVector<f64>, n_actions: usize, tau: f64) -> Policy {
    let n_states = q.len() / n_actions;
    let mut probs = DVector::zeros(q.len());
    for s in 0..n_states {
        let range = s * n_actions..(s + 1) * n_actions;
        softmax_into(
            &q.as_slice()[range.clone()],
            tau,
            &mut probs.as_mut_slice()[range],
        );
    }
    Policy::from_normalized(n_states, n_actions, probs)
}

/// `T(Q) = r + gamma P V(Q)`.
pub fn soft_bellman_apply(
    mdp: &TabularMdp,
    reward: &DVector<f64>,
    q: &DVector<f64>,
) -> DVector<f64> {
    let v = soft_value_from_q(q, mdp.n_actions(), mdp.tau());
    reward + mdp.gamma() * (mdp.transitions() * v)
}

#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub q_star: DVector<f64>,
    pub v_star: DVector<f64>,
    pub pi_star: Policy,
    /// `||T(Q) - Q||_inf` of the returned `Q`.
    pub residual: f64,
    /// Upper bound on `||Q - Q*||_inf`.
    pub error_bound: f64,
    pub iterations: usize,
}

impl SoftSolution {
    /// `prior_bound` is any already-known bound on `||q - Q*||_inf`.
    fn from_q(
        mdp: &TabularMdp,
        reward: &DVector<f64>,
        q: DVector<f64>,
        prior_bound: f64,
        iterations: usize,
    ) -> Self {
        let tq = soft_bellman_apply(mdp, reward, &q);
        let residual = (&tq - &q).amax();
        let v_star = soft_value_from_q(&q, mdp.n_actions(), mdp.tau());
        let pi_star = softmax_policy(&q, mdp.n_actions(), mdp.tau());
        let error_bound = (residual / (1.0 - mdp.gamma())).min(prior_bound);
        Self {
            error_bound,
            q_star: q,
            v_star,
            pi_star,
            residual,
            iterations,
        }
    }
}

/// Soft value iteration from `q_init` until `||T(Q) - Q||_inf <= tol (1 - gamma)`.
///
/// Tolerances below the floating-point floor of the iterate are clamped to
/// that floor.
pub fn solve_soft_optimal(
    mdp: &TabularMdp,
    reward: &DVector<f64>,
    q_init: &DVector<f64>,
    tol: f64,
) -> Result<SoftSolution> {
    solve_soft_optimal_capped(mdp, reward, q_init, tol, DEFAULT_ITER_CAP)
}

pub fn solve_soft_optimal_capped(
    mdp: &TabularMdp,
    reward: &DVector<f64>,
    q_init: &DVector<f64>,
    tol: f64,
    cap: usize,
) -> Result<SoftSolution> {
    if q_init.len() != mdp.n_sa() || reward.len() != mdp.n_sa() {
        return Err(Error::Dimension(
            "reward and q_init must have |S||A| entries".into(),
        ));
    }
    let mut q = q_init.clone();
    let mut iterations = 0;
    loop {
        let tq = soft_bellman_apply(mdp, reward, &q);
        let residual = (&tq - &q).amax();
        if !residual.is_finite() {
            return Err(Error::IterationCap {
                iters: iterations,
                residual,
            });
        }
        let floor = 8.0 * f64::EPSILON * (1.0 + tq.amax());
        if residual <= (tol * (1.0 - mdp.gamma())).max(floor) {
            // a warm start that already passes is returned unchanged
            return Ok(SoftSolution::from_q(
                mdp,
                reward,
                q,
                f64::INFINITY,
                iterations,
            ));
        }
        if iterations >= cap {
            return Err(Error::IterationCap {
                iters: iterations,
                residual,
            });
        }
        q = tq;
        iterations += 1;
    }
}

/// `N` sweeps of the soft Bellman operator.
pub fn bellman_sweeps(
    mdp: &TabularMdp,
    reward: &DVector<f64>,
    q: &DVector<f64>,
    n: usize,
) -> DVector<f64> {
    let mut q = q.clone();
    for _ in 0..n {
        q = soft_bellman_apply(mdp, reward, &q);
    }
    q
}

#[derive(Debug, Clone)]
pub struct PolicyValues {
    pub v_pi: DVector<f64>,
    pub q_pi: DVector<f64>,
}

/// Soft evaluation of `policy`; the entropy term is dropped when `tau == 0`.
pub fn policy_evaluation(
    mdp: &TabularMdp,
    reward: &DVector<f64>,
    policy: &Policy,
) -> Result<PolicyValues> {
    policy.check_shape(mdp)?;
    let na = mdp.n_actions();
    let tau = mdp.tau();
    let log_pi = if tau > 0.0 {
        Some(policy.log_probs()?)
    } else {
        None
    };
    let c = DVector::from_fn(mdp.n_states(), |s, _| {
        (0..na)
            .map(|a| {
                let i = s * na + a;
                let ent = log_pi.as_ref().map_or(0.0, |l| tau * l[i]);
                policy.probs()[i] * (reward[i] - ent)
            })
            .sum()
    });
    let p_pi = induced_transition(mdp, policy)?;
    let v_pi = linalg::solve_vec(&resolvent_matrix(mdp, &p_pi), &c, "policy evaluation")?;
    let q_pi = reward + mdp.gamma() * (mdp.transitions() * &v_pi);
    Ok(PolicyValues { v_pi, q_pi })
}

pub fn fixed_point_map(mdp: &TabularMdp, reward: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let inner = reward + mdp.gamma() * (mdp.transitions() * v);
    soft_value_from_q(&inner, mdp.n_actions(), mdp.tau())
}

#[derive(Debug, Clone)]
pub struct PhiDerivatives {
    /// `|S| x |S|`.
    pub d_v: DMatrix<f64>,
    /// `|S| x n`.
    pub d_x: DMatrix<f64>,
    pub aux_policy: Policy,
}

pub fn phi_derivatives(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<PhiDerivatives> {
    let r = rm.reward(x)?;
    Ok(phi_derivatives_at(mdp, &r, &rm.jacobian(), v))
}

/// Partial derivatives of `phi` given `r(x)` and its Jacobian.
pub fn phi_derivatives_at(
    mdp: &TabularMdp,
    r: &DVector<f64>,
    jac: &DMatrix<f64>,
    v: &DVector<f64>,
) -> PhiDerivatives {
    let inner = r + mdp.gamma() * (mdp.transitions() * v);
    let aux_policy = softmax_policy(&inner, mdp.n_actions(), mdp.tau());
    let d_v = mdp.gamma() * induced_transition(mdp, &aux_policy).expect("shapes agree");
    let d_x = state_average(mdp, &aux_policy, jac);
    PhiDerivatives {
        d_v,
        d_x,
        aux_policy,
    }
}

/// Row `s` is `sum_a pi(a|s) m[(s,a), :]`.
pub fn state_average(mdp: &TabularMdp, policy: &Policy, m: &DMatrix<f64>) -> DMatrix<f64> {
    let na = mdp.n_actions();
    let mut out = DMatrix::zeros(mdp.n_states(), m.ncols());
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let w = policy.prob(s, a);
            if w != 0.0 {
                let src = m.row(s * na + a);
                let mut row = out.row_mut(s);
                row += src * w;
            }
        }
    }
    out
}
