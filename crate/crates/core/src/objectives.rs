//! Upper-level objectives: reward shaping `f = -V^pi(rho)` in a reference MDP,
//! and a Bradley-Terry preference loss over trajectory pairs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    discounted_occupancy, validate_mdp_with, Policy, TabularMdp, TauRule, Trajectory,
};
use crate::reward::RewardModel;
use crate::soft::policy_evaluation;

pub const ENUMERATION_BUDGET: usize = 1_000_000;

/// Upper-level MDP with its fixed reference reward; `tau = 0` is allowed.
#[derive(Debug, Clone)]
pub struct UpperMdp {
    pub mdp: TabularMdp,
    pub reward: DVector<f64>,
}

impl UpperMdp {
    pub fn new(mdp: TabularMdp, reward: DVector<f64>) -> Result<Self> {
        let report = validate_mdp_with(&mdp, TauRule::NonNegative);
        if !report.is_ok() {
            return Err(Error::Invalid(report));
        }
        if reward.len() != mdp.n_sa() {
            return Err(Error::Dimension(format!(
                "upper reward has {} entries, expected {}",
                reward.len(),
                mdp.n_sa()
            )));
        }
        Ok(Self { mdp, reward })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Enumerate,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Higher reference return wins; ties are a fair coin.
    Deterministic,
    /// `y ~ Bernoulli(sigmoid(R1 - R2))` under the reference reward.
    BtStochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceConfig {
    pub horizon: usize,
    pub mode: EvalMode,
    pub labels: LabelMode,
    #[serde(default = "default_pairs")]
    pub pairs_per_iter: usize,
    #[serde(default)]
    pub buffer_cap: Option<usize>,
}

fn default_pairs() -> usize {
    64
}

impl PreferenceConfig {
    pub fn enumerate(horizon: usize, labels: LabelMode) -> Self {
        Self {
            horizon,
            mode: EvalMode::Enumerate,
            labels,
            pairs_per_iter: default_pairs(),
            buffer_cap: None,
        }
    }

    pub fn buffer_cap(&self) -> usize {
        self.buffer_cap.unwrap_or(self.pairs_per_iter).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveKind {
    Shaping,
    Preference(PreferenceConfig),
}

#[derive(Debug, Clone)]
pub struct UpperObjective {
    pub upper: UpperMdp,
    pub kind: ObjectiveKind,
}

impl UpperObjective {
    pub fn shaping(upper: UpperMdp) -> Self {
        Self {
            upper,
            kind: ObjectiveKind::Shaping,
        }
    }
    pub fn preference(upper: UpperMdp, cfg: PreferenceConfig) -> Self {
        Self {
            upper,
            kind: ObjectiveKind::Preference(cfg),
        }
    }
}

/// Value and partial gradients of `f(x, pi)`.
#[derive(Debug, Clone)]
pub struct UpperEval {
    pub f: f64,
    pub grad_x: DVector<f64>,
    pub grad_pi: DVector<f64>,
}

/// `|S| (|A||S|)^(H-1) |A|`, the number of `H`-step state-action sequences.
pub fn sequence_count(n_states: usize, n_actions: usize, horizon: usize) -> f64 {
    let (s, a) = (n_states as f64, n_actions as f64);
    s * (a * s).powi(horizon as i32 - 1) * a
}

/// Every positive-probability `H`-step trajectory under `policy`, with its probability.
pub fn enumerate_trajectories(
    upper: &UpperMdp,
    policy: &Policy,
    horizon: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    let mdp = &upper.mdp;
    policy.check_shape(mdp)?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let count = sequence_count(mdp.n_states(), mdp.n_actions(), horizon);
    if count > ENUMERATION_BUDGET as f64 {
        return Err(Error::BudgetExceeded {
            count,
            budget: ENUMERATION_BUDGET,
        });
    }
    let mut out = Vec::new();
    let mut steps = Vec::with_capacity(horizon);
    for s0 in 0..mdp.n_states() {
        let p0 = mdp.rho()[s0];
        if p0 > 0.0 {
            extend(mdp, policy, horizon, s0, p0, &mut steps, &mut out);
        }
    }
    Ok(out)
}

fn extend(
    mdp: &TabularMdp,
    policy: &Policy,
    horizon: usize,
    s: usize,
    prob: f64,
    steps: &mut Vec<(usize, usize)>,
    out: &mut Vec<(Trajectory, f64)>,
) {
    for a in 0..mdp.n_actions() {
        let pa = prob * policy.prob(s, a);
        if pa <= 0.0 {
            continue;
        }
        steps.push((s, a));
        if steps.len() == horizon {
            out.push((
                Trajectory {
                    steps: steps.clone(),
                },
                pa,
            ));
        } else {
            for (s_next, &pt) in mdp.next_row(s, a).iter().enumerate() {
                if pt > 0.0 {
                    extend(mdp, policy, horizon, s_next, pa * pt, steps, out);
                }
            }
        }
        steps.pop();
    }
}

/// Probability of `d` under `policy`, including the final action draw.
pub fn trajectory_probability(upper: &UpperMdp, policy: &Policy, d: &Trajectory) -> f64 {
    let mdp = &upper.mdp;
    let Some(&(s0, _)) = d.steps.first() else {
        return 0.0;
    };
    let mut p = mdp.rho()[s0];
    for (h, &(s, a)) in d.steps.iter().enumerate() {
        p *= policy.prob(s, a);
        if let Some(&(s_next, _)) = d.steps.get(h + 1) {
            p *= mdp.next_row(s, a)[s_next];
        }
    }
    p
}

/// `f = -V^pi(rho)` in the upper MDP and `df/dpi(s,a) = -nu(s) (Q_sa - tau (log pi_sa + 1))`.
pub fn shaping_objective(upper: &UpperMdp, policy: &Policy) -> Result<(f64, DVector<f64>)> {
    let mdp = &upper.mdp;
    let pv = policy_evaluation(mdp, &upper.reward, policy)?;
    let f = -mdp.rho().dot(&pv.v_pi);
    let nu = discounted_occupancy(mdp, policy)?;
    let tau = mdp.tau();
    let log_pi = if tau > 0.0 {
        Some(policy.log_probs()?)
    } else {
        None
    };
    let na = mdp.n_actions();
    let grad = DVector::from_fn(mdp.n_sa(), |i, _| {
        let ent = log_pi.as_ref().map_or(0.0, |l| tau * (l[i] + 1.0));
        -nu[i / na] * (pv.q_pi[i] - ent)
    });
    Ok((f, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn trajectory_return(r: &DVector<f64>, n_actions: usize, d: &Trajectory) -> f64 {
    d.steps.iter().map(|&(s, a)| r[s * n_actions + a]).sum()
}

/// `P(d1 > d2) = sigmoid(R1 - R2)`; `n_actions` fixes the flat indexing of `r`.
pub fn bradley_terry_prob(
    r: &DVector<f64>,
    n_actions: usize,
    d1: &Trajectory,
    d2: &Trajectory,
) -> f64 {
    sigmoid(trajectory_return(r, n_actions, d1) - trajectory_return(r, n_actions, d2))
}

/// Cross-entropy of a label with mean `p_y` against `sigmoid(delta)`, and its `delta` derivative.
///
/// Linear in `p_y`, so it equals the expectation of the 0/1 loss.
pub fn expected_bce(delta: f64, p_y: f64) -> (f64, f64) {
    let loss = p_y * softplus(-delta) + (1.0 - p_y) * softplus(delta);
    (loss, sigmoid(delta) - p_y)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub d1: Trajectory,
    pub d2: Trajectory,
    /// 1 when `d1` is preferred.
    pub y: u8,
}

/// `sum_h grad r(s_h, a_h)`.
fn return_gradient(jac: &DMatrix<f64>, n_actions: usize, d: &Trajectory) -> DVector<f64> {
    let mut g = DVector::zeros(jac.ncols());
    for &(s, a) in &d.steps {
        g += jac.row(s * n_actions + a).transpose();
    }
    g
}

pub fn bce_loss_and_grad(
    rm: &RewardModel,
    n_actions: usize,
    x: &DVector<f64>,
    pair: &PreferencePair,
) -> Result<(f64, DVector<f64>)> {
    if pair.d1.horizon() != pair.d2.horizon() {
        return Err(Error::Dimension("preference pair horizons differ".into()));
    }
    let r = rm.reward(x)?;
    let jac = rm.jacobian();
    let delta =
        trajectory_return(&r, n_actions, &pair.d1) - trajectory_return(&r, n_actions, &pair.d2);
    let (loss, dl) = expected_bce(delta, pair.y as f64);
    let grad = dl
        * (return_gradient(&jac, n_actions, &pair.d1) - return_gradient(&jac, n_actions, &pair.d2));
    Ok((loss, grad))
}

/// Mean of the label distribution for `(d1, d2)`.
pub fn label_mean(upper: &UpperMdp, d1: &Trajectory, d2: &Trajectory, mode: LabelMode) -> f64 {
    let na = upper.mdp.n_actions();
    let diff = trajectory_return(&upper.reward, na, d1) - trajectory_return(&upper.reward, na, d2);
    match mode {
        LabelMode::Deterministic => {
            if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                0.0
            } else {
                0.5
            }
        }
        LabelMode::BtStochastic => sigmoid(diff),
    }
}

pub fn preference_label<R: Rng + ?Sized>(
    upper: &UpperMdp,
    d1: &Trajectory,
    d2: &Trajectory,
    mode: LabelMode,
    rng: &mut R,
) -> u8 {
    let p = label_mean(upper, d1, d2, mode);
    // draw unconditionally so the stream position does not depend on the outcome
    let u: f64 = rng.random();
    u8::from(u < p)
}

/// Exact preference objective over all trajectory pairs under `policy`.
pub fn preference_objective(
    upper: &UpperMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    policy: &Policy,
    horizon: usize,
    labels: LabelMode,
) -> Result<UpperEval> {
    let mdp = &upper.mdp;
    let na = mdp.n_actions();
    let trajs = enumerate_trajectories(upper, policy, horizon)?;
    let r = rm.reward(x)?;
    let jac = rm.jacobian();
    let returns: Vec<f64> = trajs
        .iter()
        .map(|(d, _)| trajectory_return(&r, na, d))
        .collect();

    // pairwise sums factor through per-trajectory coefficients
    let mut coef_x = vec![0.0; trajs.len()];
    let mut coef_pi = vec![0.0; trajs.len()];
    let mut f = 0.0;
    for (i, (d1, p1)) in trajs.iter().enumerate() {
        let mut row_f = 0.0;
        for (j, (d2, p2)) in trajs.iter().enumerate() {
            let w = p1 * p2;
            let (loss, dl) =
                expected_bce(returns[i] - returns[j], label_mean(upper, d1, d2, labels));
            row_f += w * loss;
            coef_x[i] += w * dl;
            coef_x[j] -= w * dl;
            coef_pi[i] += w * loss;
            coef_pi[j] += w * loss;
        }
        f += row_f;
    }

    let mut grad_x = DVector::zeros(rm.n_params());
    let mut visits = DVector::<f64>::zeros(mdp.n_sa());
    let mut reached = vec![false; mdp.n_states()];
    for (k, (d, _)) in trajs.iter().enumerate() {
        grad_x.axpy(coef_x[k], &return_gradient(&jac, na, d), 1.0);
        for &(s, a) in &d.steps {
            visits[s * na + a] += coef_pi[k];
            reached[s] = true;
        }
    }
    let mut grad_pi = DVector::zeros(mdp.n_sa());
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let p = policy.prob(s, a);
            if p > 0.0 {
                grad_pi[s * na + a] = visits[s * na + a] / p;
            } else if reached[s] {
                return Err(Error::ZeroVisitedProbability { s, a });
            }
        }
    }
    Ok(UpperEval { f, grad_x, grad_pi })
}

/// `f(x, pi)` with exact `(grad_x f, grad_pi f)`.
pub fn evaluate_upper(
    obj: &UpperObjective,
    rm: &RewardModel,
    x: &DVector<f64>,
    policy: &Policy,
) -> Result<UpperEval> {
    match &obj.kind {
        ObjectiveKind::Shaping => {
            let (f, grad_pi) = shaping_objective(&obj.upper, policy)?;
            Ok(UpperEval {
                f,
                grad_x: DVector::zeros(rm.n_params()),
                grad_pi,
            })
        }
        ObjectiveKind::Preference(cfg) => {
            preference_objective(&obj.upper, rm, x, policy, cfg.horizon, cfg.labels)
        }
    }
}
