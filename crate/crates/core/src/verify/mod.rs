//! Executable checks: a finite-difference hyper-gradient oracle, the property
//! suite over random instances, and the closed-form constants and step sizes.

mod constants;
mod properties;

pub use constants::*;
pub use properties::*;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::mdp::{Policy, TabularMdp};
use crate::objectives::{evaluate_upper, UpperObjective};
use crate::reward::RewardModel;
use crate::rng::RngKey;
use crate::soft::{softmax_policy, solve_soft_optimal};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub worst_margin: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn from_margins(name: &str, margins: &[f64]) -> Self {
        let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            name: name.to_string(),
            instances: margins.len(),
            worst_margin: worst,
            pass: worst >= 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<CheckReport>,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Central differences of `phi(x) = f(x, pi*(x))` with step `delta (1 + |x_i|)`.
pub fn fd_hypergrad(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    obj: &UpperObjective,
    delta: f64,
    lower_tol: f64,
) -> Result<DVector<f64>> {
    let base = solve_soft_optimal(mdp, &rm.reward(x)?, &DVector::zeros(mdp.n_sa()), lower_tol)?;
    let phi = |xp: &DVector<f64>| -> Result<f64> {
        let sol = solve_soft_optimal(mdp, &rm.reward(xp)?, &base.q_star, lower_tol)?;
        Ok(evaluate_upper(obj, rm, xp, &sol.pi_star)?.f)
    };
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = delta * (1.0 + x[i].abs());
        let mut xp = x.clone();
        xp[i] += h;
        let fp = phi(&xp)?;
        xp[i] = x[i] - h;
        let fm = phi(&xp)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Dirichlet(1) row.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}

/// Dense random MDP with Dirichlet rows and a strictly positive `rho`.
pub fn random_mdp<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    tau: f64,
) -> TabularMdp {
    let n_sa = n_states * n_actions;
    let rows: Vec<Vec<f64>> = (0..n_sa).map(|_| random_simplex(rng, n_states)).collect();
    let p = DMatrix::from_fn(n_sa, n_states, |i, j| rows[i][j]);
    let rho = DVector::from_vec(random_simplex(rng, n_states));
    TabularMdp::new(n_states, n_actions, p, gamma, tau, rho).expect("random rows are normalized")
}

/// Strictly positive policy from uniform logits in `[-scale, scale]`.
pub fn random_policy<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    scale: f64,
) -> Policy {
    let logits = DVector::from_fn(n_states * n_actions, |_, _| {
        scale * (2.0 * rng.random::<f64>() - 1.0)
    });
    softmax_policy(&logits, n_actions, 1.0)
}

pub fn random_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// `n` random instances with `|S|` in `1..=max_states`, `|A|` in `1..=max_actions`,
/// `gamma` in `[0.5, 0.95)` and `tau` in `[0.2, 2)`.
pub fn random_instances(
    n: usize,
    max_states: usize,
    max_actions: usize,
    seed: u64,
) -> Vec<TabularMdp> {
    let key = RngKey::new(seed).fork(0x1257);
    (0..n)
        .map(|i| {
            let mut rng = key.rng_at(i as u64);
            let ns = rng.random_range(1..=max_states);
            let na = rng.random_range(1..=max_actions);
            let gamma = rng.random_range(0.5..0.95);
            let tau = rng.random_range(0.2..2.0);
            random_mdp(&mut rng, ns, na, gamma, tau)
        })
        .collect()
}

/// A complete bilevel problem for oracle comparisons.
#[derive(Debug, Clone)]
pub struct BilevelInstance {
    pub mdp: TabularMdp,
    pub rm: RewardModel,
    pub obj: UpperObjective,
    pub x: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveChoice {
    Shaping,
    Preference,
}

/// Random lower/upper pair on shared spaces with a tabular or linear reward.
///
/// Shaping instances use `|S| <= 5, |A| <= 3`; preference instances use
/// `|S| <= 4, |A| <= 3` at horizon 2 with stochastic labels.
pub fn random_bilevel_instance(choice: ObjectiveChoice, seed: u64, index: u64) -> BilevelInstance {
    use crate::objectives::{LabelMode, PreferenceConfig, UpperMdp};
    let mut rng = RngKey::new(seed).fork(0xb11e).fork(index).rng();
    let max_s = if choice == ObjectiveChoice::Shaping {
        5
    } else {
        4
    };
    let ns = rng.random_range(1..=max_s);
    let na = rng.random_range(1..=3);
    let gamma = rng.random_range(0.5..0.9);
    let tau = rng.random_range(0.3..1.5);
    let mdp = random_mdp(&mut rng, ns, na, gamma, tau);
    let upper_gamma = rng.random_range(0.5..0.9);
    let upper_tau = if rng.random::<f64>() < 0.3 {
        0.0
    } else {
        rng.random_range(0.1..1.0)
    };
    let upper_mdp =
        random_mdp(&mut rng, ns, na, upper_gamma, 1.0).with_params(upper_gamma, upper_tau);
    let upper_reward = random_vector(&mut rng, ns * na, 1.0);
    let upper = UpperMdp::new(upper_mdp, upper_reward).expect("random upper MDP is valid");
    let rm = if rng.random::<f64>() < 0.5 {
        RewardModel::tabular(ns * na)
    } else {
        let n = rng.random_range(1..=3);
        let phi = DMatrix::from_fn(ns * na, n, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        RewardModel::linear(phi)
    };
    let x = random_vector(&mut rng, rm.n_params(), 1.0);
    let obj = match choice {
        ObjectiveChoice::Shaping => UpperObjective::shaping(upper),
        ObjectiveChoice::Preference => UpperObjective::preference(
            upper,
            PreferenceConfig::enumerate(2, LabelMode::BtStochastic),
        ),
    };
    BilevelInstance { mdp, rm, obj, x }
}

/// Relative l2 gap `||a - b|| / max(||b||, floor)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// FD-vs-exact margins `tol - relative error` over `n` random instances.
pub fn fd_agreement(
    choice: ObjectiveChoice,
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<(CheckReport, Vec<FdRow>)> {
    use crate::hypergrad::exact_hyper_gradient;
    use rayon::prelude::*;
    let rows: Vec<FdRow> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let inst = random_bilevel_instance(choice, seed, i);
            let exact = exact_hyper_gradient(&inst.mdp, &inst.rm, &inst.x, &inst.obj)?;
            let fd = fd_hypergrad(&inst.mdp, &inst.rm, &inst.x, &inst.obj, 1e-5, 1e-12)?;
            Ok(FdRow {
                instance: i as usize,
                n_states: inst.mdp.n_states(),
                n_actions: inst.mdp.n_actions(),
                exact_norm: exact.grad.norm(),
                rel_error: relative_error(&fd, &exact.grad, 1e-8),
            })
        })
        .collect::<Result<_>>()?;
    let margins: Vec<f64> = rows.iter().map(|r| tol - r.rel_error).collect();
    let name = match choice {
        ObjectiveChoice::Shaping => "fd_shaping",
        ObjectiveChoice::Preference => "fd_preference",
    };
    Ok((CheckReport::from_margins(name, &margins), rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct FdRow {
    pub instance: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub exact_norm: f64,
    pub rel_error: f64,
}
