//! Hyper-gradients of `phi(x) = f(x, pi*(x))`.
//!
//! The exact gradient uses one transpose solve with `(I - gamma P^pi*)`; the
//! estimators replace `(pi*, V*, w*)` by tracked iterates (model-based) or by
//! sampled value gradients along trajectories (model-free).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, pairwise_sum};
use crate::mdp::{
    build_u_matrix, induced_transition, resolvent_matrix, sample_rollout, Policy, Start,
    TabularMdp, Trajectory,
};
use crate::objectives::{
    bce_loss_and_grad, evaluate_upper, preference_label, EvalMode, ObjectiveKind, PreferencePair,
    UpperEval, UpperObjective,
};
use crate::reward::RewardModel;
use crate::rng::RngKey;
use crate::soft::{phi_derivatives_at, solve_soft_optimal, state_average, SoftSolution};

/// Lower-level tolerance used by [`exact_hyper_gradient`].
pub const EXACT_LOWER_TOL: f64 = 1e-12;
pub const DEFAULT_TRUNC_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    ModelBased,
    ModelFree,
    Practical,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub lower_residual: Option<f64>,
    /// Largest entrywise gap between the two algebraic forms of the exact gradient.
    pub form_gap: Option<f64>,
    pub rollouts: Option<usize>,
    pub pairs: Option<usize>,
    pub truncation: Option<usize>,
    /// Per-coordinate standard error of a sampled estimate.
    pub std_err: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct HyperGradReport {
    pub grad: DVector<f64>,
    pub method: Method,
    /// `f(x, pi)` at the policy the estimate was formed with.
    pub f: f64,
    pub diagnostics: Diagnostics,
}

/// `grad V` (`|S| x n`) and `grad Q` (`|S||A| x n`).
#[derive(Debug, Clone)]
pub struct ValueGradients {
    pub d_v: DMatrix<f64>,
    pub d_q: DMatrix<f64>,
}

impl ValueGradients {
    /// Rows `(s,a)` of `grad Q - grad V`.
    pub fn advantage(&self, n_actions: usize) -> DMatrix<f64> {
        let mut out = self.d_q.clone();
        for i in 0..out.nrows() {
            let mut row = out.row_mut(i);
            row -= self.d_v.row(i / n_actions);
        }
        out
    }
}

fn check_spaces(mdp: &TabularMdp, obj: &UpperObjective) -> Result<()> {
    if !mdp.same_spaces(&obj.upper.mdp) {
        return Err(Error::Dimension(format!(
            "upper MDP is {}x{}, lower MDP is {}x{}",
            obj.upper.mdp.n_states(),
            obj.upper.mdp.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// `grad V* = (I - d_v phi)^{-1} d_x phi` at `V*`, and `grad Q* = grad r + gamma P grad V*`.
pub fn nabla_v_star_exact(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    sol: &SoftSolution,
) -> Result<ValueGradients> {
    let r = rm.reward(x)?;
    let jac = rm.jacobian();
    let der = phi_derivatives_at(mdp, &r, &jac, &sol.v_star);
    let a = DMatrix::identity(mdp.n_states(), mdp.n_states()) - &der.d_v;
    let d_v = linalg::solve(&a, &der.d_x, "value gradient")?;
    let d_q = &jac + mdp.gamma() * (mdp.transitions() * &d_v);
    Ok(ValueGradients { d_v, d_q })
}

/// Expected discounted reward-gradient sums under `policy`:
/// `(I - gamma P^pi)^{-1} sum_a pi grad r` and the matching `Q` form.
pub fn value_gradients_exact(
    mdp: &TabularMdp,
    rm: &RewardModel,
    policy: &Policy,
) -> Result<ValueGradients> {
    let jac = rm.jacobian();
    let p_pi = induced_transition(mdp, policy)?;
    let rhs = state_average(mdp, policy, &jac);
    let d_v = linalg::solve(&resolvent_matrix(mdp, &p_pi), &rhs, "value gradient")?;
    let d_q = &jac + mdp.gamma() * (mdp.transitions() * &d_v);
    Ok(ValueGradients { d_v, d_q })
}

/// `diag(pi) (g - 1 E_pi[g])` per state: the simplex-tangent part of `grad_pi f`, weighted by `pi`.
///
/// Per-state constants in `g` move `w*` by the same constants and leave the
/// hyper-gradient unchanged, so the model-based path drops them.
pub fn tangent_weighted(policy: &Policy, grad_pi: &DVector<f64>) -> DVector<f64> {
    let na = policy.n_actions();
    let mut out = policy.probs().component_mul(grad_pi);
    for s in 0..policy.n_states() {
        let mean: f64 = (0..na).map(|a| out[s * na + a]).sum();
        for a in 0..na {
            out[s * na + a] -= policy.prob(s, a) * mean;
        }
    }
    out
}

/// `w* = (I - gamma P^pi)^{-T} U^T diag(pi) g` with `g` centered per state.
pub fn w_star(mdp: &TabularMdp, policy: &Policy, grad_pi: &DVector<f64>) -> Result<DVector<f64>> {
    let p_pi = induced_transition(mdp, policy)?;
    let b = build_u_matrix(mdp).transpose() * tangent_weighted(policy, grad_pi);
    linalg::solve_vec(&resolvent_matrix(mdp, &p_pi).transpose(), &b, "w target")
}

/// Exact hyper-gradient from a solved lower level.
pub fn exact_hyper_gradient_at(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    obj: &UpperObjective,
    sol: &SoftSolution,
) -> Result<HyperGradReport> {
    check_spaces(mdp, obj)?;
    let tau = mdp.tau();
    let pi = &sol.pi_star;
    let ev = evaluate_upper(obj, rm, x, pi)?;
    let r = rm.reward(x)?;
    let jac = rm.jacobian();
    let der = phi_derivatives_at(mdp, &r, &jac, &sol.v_star);
    let weighted = tangent_weighted(pi, &ev.grad_pi);

    // transpose-solve form
    let w = w_star(mdp, pi, &ev.grad_pi)?;
    let grad = &ev.grad_x + (jac.transpose() * &weighted) / tau - (der.d_x.transpose() * &w) / tau;

    // policy-Jacobian form: grad pi* = diag(pi*) (grad r - U grad V*) / tau
    let p_pi = induced_transition(mdp, pi)?;
    let d_v = linalg::solve(&resolvent_matrix(mdp, &p_pi), &der.d_x, "value gradient")?;
    let mut d_pi = &jac - build_u_matrix(mdp) * &d_v;
    for i in 0..d_pi.nrows() {
        d_pi.row_mut(i).scale_mut(pi.probs()[i] / tau);
    }
    let grad_alt = &ev.grad_x + d_pi.transpose() * &ev.grad_pi;

    let diagnostics = Diagnostics {
        lower_residual: Some(sol.residual),
        form_gap: Some((&grad - &grad_alt).amax()),
        ..Default::default()
    };
    Ok(HyperGradReport {
        grad,
        method: Method::Exact,
        f: ev.f,
        diagnostics,
    })
}

/// Exact hyper-gradient, solving the lower level from zero to [`EXACT_LOWER_TOL`].
pub fn exact_hyper_gradient(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    obj: &UpperObjective,
) -> Result<HyperGradReport> {
    let sol = solve_soft_optimal(
        mdp,
        &rm.reward(x)?,
        &DVector::zeros(mdp.n_sa()),
        EXACT_LOWER_TOL,
    )?;
    exact_hyper_gradient_at(mdp, rm, x, obj, &sol)
}

/// Model-based estimate from precomputed upper-level gradients.
pub(crate) fn msobirl_from_eval(
    mdp: &TabularMdp,
    r: &DVector<f64>,
    jac: &DMatrix<f64>,
    pi_k: &Policy,
    v_k: &DVector<f64>,
    w_k: &DVector<f64>,
    ev: &UpperEval,
) -> DVector<f64> {
    let tau = mdp.tau();
    let der = phi_derivatives_at(mdp, r, jac, v_k);
    let weighted = tangent_weighted(pi_k, &ev.grad_pi);
    &ev.grad_x + (jac.transpose() * weighted) / tau - (der.d_x.transpose() * w_k) / tau
}

pub fn msobirl_estimator(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x_k: &DVector<f64>,
    pi_k: &Policy,
    v_k: &DVector<f64>,
    w_k: &DVector<f64>,
    obj: &UpperObjective,
) -> Result<HyperGradReport> {
    check_spaces(mdp, obj)?;
    if v_k.len() != mdp.n_states() || w_k.len() != mdp.n_states() {
        return Err(Error::Dimension("v_k and w_k must have |S| entries".into()));
    }
    let ev = evaluate_upper(obj, rm, x_k, pi_k)?;
    let r = rm.reward(x_k)?;
    let grad = msobirl_from_eval(mdp, &r, &rm.jacobian(), pi_k, v_k, w_k, &ev);
    Ok(HyperGradReport {
        grad,
        method: Method::ModelBased,
        f: ev.f,
        diagnostics: Diagnostics::default(),
    })
}

/// Steps after which the discounted tail is below `trunc_tol`.
pub fn truncation_horizon(gamma: f64, c_rx: f64, trunc_tol: f64) -> usize {
    if c_rx <= 0.0 {
        return 0;
    }
    let t = (trunc_tol * (1.0 - gamma) / c_rx).ln() / gamma.ln();
    if t.is_finite() && t > 0.0 {
        t.ceil() as usize
    } else {
        0
    }
}

#[derive(Debug, Clone)]
pub struct McValueGradients {
    pub grads: ValueGradients,
    pub se_v: DMatrix<f64>,
    pub se_q: DMatrix<f64>,
    pub truncation: usize,
    pub rollouts: usize,
}

/// Mean and standard error per coordinate over rows of equal length.
fn mean_and_se(samples: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let n = samples.len();
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    let mut se = DVector::zeros(dim);
    let mut column = vec![0.0; n];
    for j in 0..dim {
        for (c, s) in column.iter_mut().zip(samples) {
            *c = s[j];
        }
        let m = pairwise_sum(&column) / n as f64;
        if n > 1 {
            for c in column.iter_mut() {
                *c = (*c - m) * (*c - m);
            }
            se[j] = (pairwise_sum(&column) / ((n - 1) as f64) / n as f64).sqrt();
        }
        mean[j] = m;
    }
    (mean, se)
}

fn discounted_gradient_sum(
    jac: &DMatrix<f64>,
    n_actions: usize,
    gamma: f64,
    d: &Trajectory,
) -> DVector<f64> {
    let mut g = DVector::zeros(jac.ncols());
    let mut disc = 1.0;
    for &(s, a) in &d.steps {
        g.axpy(disc, &jac.row(s * n_actions + a).transpose(), 1.0);
        disc *= gamma;
    }
    g
}

/// Monte-Carlo `grad V` and `grad Q` under `policy` with truncated discounted sums.
///
/// Rollout `j` from start `i` draws from `key.fork(i).rng_at(j)`, so results
/// do not depend on the worker count.
pub fn mc_value_gradients(
    mdp: &TabularMdp,
    rm: &RewardModel,
    policy: &Policy,
    per_pair_rollouts: usize,
    trunc_tol: f64,
    key: RngKey,
) -> Result<McValueGradients> {
    policy.check_shape(mdp)?;
    if per_pair_rollouts == 0 || !(trunc_tol > 0.0) {
        return Err(Error::Config(
            "rollouts must be positive and trunc_tol > 0".into(),
        ));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let jac = rm.jacobian();
    let t_max = truncation_horizon(mdp.gamma(), rm.c_rx(), trunc_tol);
    let starts: Vec<Start> = (0..ns * na)
        .map(|i| Start::StateAction(i / na, i % na))
        .chain((0..ns).map(Start::State))
        .collect();
    let estimates: Vec<(DVector<f64>, DVector<f64>)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, start)| {
            let stream = key.fork(i as u64);
            let samples: Vec<DVector<f64>> = (0..per_pair_rollouts)
                .into_par_iter()
                .map(|j| {
                    let mut rng = stream.rng_at(j as u64);
                    let d = sample_rollout(mdp, policy, *start, t_max + 1, &mut rng);
                    discounted_gradient_sum(&jac, na, mdp.gamma(), &d)
                })
                .collect();
            mean_and_se(&samples)
        })
        .collect();
    let n = jac.ncols();
    let mut d_q = DMatrix::zeros(ns * na, n);
    let mut se_q = DMatrix::zeros(ns * na, n);
    let mut d_v = DMatrix::zeros(ns, n);
    let mut se_v = DMatrix::zeros(ns, n);
    for (i, (m, se)) in estimates.iter().enumerate() {
        if i < ns * na {
            d_q.set_row(i, &m.transpose());
            se_q.set_row(i, &se.transpose());
        } else {
            d_v.set_row(i - ns * na, &m.transpose());
            se_v.set_row(i - ns * na, &se.transpose());
        }
    }
    Ok(McValueGradients {
        grads: ValueGradients { d_v, d_q },
        se_v,
        se_q,
        truncation: t_max,
        rollouts: per_pair_rollouts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueGradMode {
    /// Linear solves in place of rollouts.
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_value_grads")]
    pub value_gradients: ValueGradMode,
    /// Rollouts per start state or state-action pair.
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    /// Trajectory pairs per estimate in sample mode; defaults to the objective's `pairs_per_iter`.
    #[serde(default)]
    pub pairs: Option<usize>,
    #[serde(default = "default_trunc_tol")]
    pub trunc_tol: f64,
}

fn default_value_grads() -> ValueGradMode {
    ValueGradMode::Exact
}
fn default_rollouts() -> usize {
    1000
}
fn default_trunc_tol() -> f64 {
    DEFAULT_TRUNC_TOL
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::exact()
    }
}

impl SamplingConfig {
    pub fn exact() -> Self {
        Self {
            value_gradients: ValueGradMode::Exact,
            rollouts: default_rollouts(),
            pairs: None,
            trunc_tol: DEFAULT_TRUNC_TOL,
        }
    }
    pub fn monte_carlo(rollouts: usize) -> Self {
        Self {
            value_gradients: ValueGradMode::MonteCarlo,
            rollouts,
            pairs: None,
            trunc_tol: DEFAULT_TRUNC_TOL,
        }
    }
}

/// FIFO store of labeled pairs; the `grad l` term averages over it.
#[derive(Debug, Clone, Default)]
pub struct PreferenceBuffer {
    pairs: std::collections::VecDeque<PreferencePair>,
}

impl PreferenceBuffer {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
    fn push(&mut self, pair: PreferencePair, cap: usize) {
        self.pairs.push_back(pair);
        while self.pairs.len() > cap {
            self.pairs.pop_front();
        }
    }
}

/// Per-`(s,a)` advantage-gradient rows with optional standard errors.
struct AdvantageRows {
    rows: DMatrix<f64>,
    se_q: Option<DMatrix<f64>>,
    se_v: Option<DMatrix<f64>>,
    rollouts: Option<usize>,
    truncation: Option<usize>,
}

fn advantage_rows(
    mdp: &TabularMdp,
    rm: &RewardModel,
    pi: &Policy,
    sampling: &SamplingConfig,
    key: RngKey,
) -> Result<AdvantageRows> {
    match sampling.value_gradients {
        ValueGradMode::Exact => Ok(AdvantageRows {
            rows: value_gradients_exact(mdp, rm, pi)?.advantage(mdp.n_actions()),
            se_q: None,
            se_v: None,
            rollouts: None,
            truncation: None,
        }),
        ValueGradMode::MonteCarlo => {
            let mc = mc_value_gradients(mdp, rm, pi, sampling.rollouts, sampling.trunc_tol, key)?;
            Ok(AdvantageRows {
                rows: mc.grads.advantage(mdp.n_actions()),
                se_q: Some(mc.se_q),
                se_v: Some(mc.se_v),
                rollouts: Some(mc.rollouts),
                truncation: Some(mc.truncation),
            })
        }
    }
}

/// `grad_x f + tau^-1 E[l sum_i sum_h D(s_h, a_h)]` with `D` the supplied advantage rows.
#[allow(clippy::too_many_arguments)]
fn trajectory_skeleton(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    pi: &Policy,
    tau: f64,
    obj: &UpperObjective,
    adv: AdvantageRows,
    sampling: &SamplingConfig,
    key: RngKey,
    buffer: Option<&mut PreferenceBuffer>,
    method: Method,
) -> Result<HyperGradReport> {
    check_spaces(mdp, obj)?;
    let na = mdp.n_actions();
    let sampled_pairs = match &obj.kind {
        ObjectiveKind::Preference(cfg) if cfg.mode == EvalMode::Sample => Some(cfg),
        _ => None,
    };
    let mut diagnostics = Diagnostics {
        rollouts: adv.rollouts,
        truncation: adv.truncation,
        ..Default::default()
    };

    let Some(cfg) = sampled_pairs else {
        // exact trajectory expectation: sum over pairs of P1 P2 l (N1 + N2) = diag(pi) grad_pi f
        let ev = evaluate_upper(obj, rm, x, pi)?;
        let c = pi.probs().component_mul(&ev.grad_pi);
        let grad = &ev.grad_x + adv.rows.transpose() * &c / tau;
        if let (Some(se_q), Some(se_v)) = (&adv.se_q, &adv.se_v) {
            // Q rows and V rows are independent estimates
            let mut var = DVector::zeros(grad.len());
            for i in 0..c.len() {
                var += se_q.row(i).transpose().map(|v| v * v) * (c[i] / tau).powi(2);
            }
            for s in 0..mdp.n_states() {
                let cs: f64 = (0..na).map(|a| c[s * na + a]).sum::<f64>() / tau;
                var += se_v.row(s).transpose().map(|v| v * v) * cs * cs;
            }
            diagnostics.std_err = Some(var.map(f64::sqrt));
        }
        return Ok(HyperGradReport {
            grad,
            method,
            f: ev.f,
            diagnostics,
        });
    };

    let upper = &obj.upper;
    let m = sampling.pairs.unwrap_or(cfg.pairs_per_iter).max(1);
    let pair_key = key.fork(u64::MAX);
    let fresh: Vec<PreferencePair> = (0..m)
        .map(|j| {
            let mut rng = pair_key.rng_at(j as u64);
            let d1 = sample_rollout(
                &upper.mdp,
                pi,
                Start::Dist(upper.mdp.rho()),
                cfg.horizon,
                &mut rng,
            );
            let d2 = sample_rollout(
                &upper.mdp,
                pi,
                Start::Dist(upper.mdp.rho()),
                cfg.horizon,
                &mut rng,
            );
            let y = preference_label(upper, &d1, &d2, cfg.labels, &mut rng);
            PreferencePair { d1, d2, y }
        })
        .collect();

    let mut second = Vec::with_capacity(m);
    let mut losses = Vec::with_capacity(m);
    for pair in &fresh {
        let (loss, _) = bce_loss_and_grad(rm, na, x, pair)?;
        let mut visit = DVector::zeros(adv.rows.ncols());
        for &(s, a) in pair.d1.steps.iter().chain(&pair.d2.steps) {
            visit += adv.rows.row(s * na + a).transpose();
        }
        second.push(visit * (loss / tau));
        losses.push(loss);
    }
    let first_pairs: Vec<PreferencePair> = match buffer {
        Some(buf) => {
            for pair in &fresh {
                buf.push(pair.clone(), cfg.buffer_cap());
            }
            buf.pairs.iter().cloned().collect()
        }
        None => fresh.clone(),
    };
    let first: Vec<DVector<f64>> = first_pairs
        .iter()
        .map(|p| bce_loss_and_grad(rm, na, x, p).map(|(_, g)| g))
        .collect::<Result<_>>()?;
    let (first_mean, first_se) = mean_and_se(&first);
    let (second_mean, second_se) = mean_and_se(&second);
    let grad = first_mean + second_mean;
    diagnostics.std_err = Some((first_se.map(|v| v * v) + second_se.map(|v| v * v)).map(f64::sqrt));
    diagnostics.pairs = Some(m);
    Ok(HyperGradReport {
        grad,
        method,
        f: pairwise_sum(&losses) / m as f64,
        diagnostics,
    })
}

/// Model-free estimate: trajectories under `pi_k` feed sampled (or exact) value gradients.
#[allow(clippy::too_many_arguments)]
pub fn mf_hyper_estimator(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x_k: &DVector<f64>,
    pi_k: &Policy,
    obj: &UpperObjective,
    sampling: &SamplingConfig,
    key: RngKey,
    buffer: Option<&mut PreferenceBuffer>,
) -> Result<HyperGradReport> {
    let adv = advantage_rows(mdp, rm, pi_k, sampling, key.fork(1))?;
    trajectory_skeleton(
        mdp,
        rm,
        x_k,
        pi_k,
        mdp.tau(),
        obj,
        adv,
        sampling,
        key.fork(2),
        buffer,
        Method::ModelFree,
    )
}

/// One-step truncation: `grad(r_sa - E_{a'~pi} r_sa')` replaces the advantage gradient.
#[allow(clippy::too_many_arguments)]
pub fn practical_estimator(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x_k: &DVector<f64>,
    pi_k: &Policy,
    tau_k: f64,
    obj: &UpperObjective,
    sampling: &SamplingConfig,
    key: RngKey,
    buffer: Option<&mut PreferenceBuffer>,
) -> Result<HyperGradReport> {
    if !(tau_k > 0.0) {
        return Err(Error::Config(format!(
            "tau_k must be positive, got {tau_k}"
        )));
    }
    pi_k.check_shape(mdp)?;
    let jac = rm.jacobian();
    let mean = state_average(mdp, pi_k, &jac);
    let rows = &jac - stack_rows(&mean, mdp.n_actions());
    let adv = AdvantageRows {
        rows,
        se_q: None,
        se_v: None,
        rollouts: None,
        truncation: None,
    };
    trajectory_skeleton(
        mdp,
        rm,
        x_k,
        pi_k,
        tau_k,
        obj,
        adv,
        sampling,
        key.fork(2),
        buffer,
        Method::Practical,
    )
}

fn stack_rows(m: &DMatrix<f64>, n_actions: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows() * n_actions, m.ncols(), |i, j| {
        m[(i / n_actions, j)]
    })
}
