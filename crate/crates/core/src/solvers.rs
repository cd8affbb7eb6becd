//! Outer loops: model-based M-SoBiRL with warm-started Bellman sweeps and an
//! amortized `w` tracker, and model-free SoBiRL with eps-accurate lower solves.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::{
    exact_hyper_gradient_at, mf_hyper_estimator, msobirl_from_eval, practical_estimator,
    tangent_weighted, w_star, PreferenceBuffer, SamplingConfig, EXACT_LOWER_TOL,
};
use crate::mdp::{build_u_matrix, induced_transition, resolvent_matrix, Policy, TabularMdp};
use crate::objectives::{evaluate_upper, ObjectiveKind, UpperObjective};
use crate::reward::RewardModel;
use crate::rng::RngKey;
use crate::soft::{
    bellman_sweeps, soft_bellman_apply, soft_value_from_q, softmax_policy, solve_soft_optimal,
    SoftSolution,
};

pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Msobirl,
    Sobirl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    ModelFree,
    Practical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub algo: Algo,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N", default = "one")]
    pub n: usize,
    pub beta: f64,
    #[serde(default = "one_f")]
    pub xi: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Initial parameter; zeros when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub estimator: EstimatorKind,
    /// Temperature of the practical estimator; the lower-level `tau` when absent.
    #[serde(default)]
    pub tau_k: Option<f64>,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    1e-6
}

impl SolverConfig {
    pub fn msobirl(k: usize, n: usize, beta: f64, xi: f64) -> Self {
        Self {
            algo: Algo::Msobirl,
            k,
            n,
            beta,
            xi,
            eps: default_eps(),
            x0: None,
            seed: 0,
            sampling: SamplingConfig::default(),
            estimator: EstimatorKind::ModelFree,
            tau_k: None,
        }
    }

    pub fn sobirl(k: usize, beta: f64, eps: f64) -> Self {
        Self {
            algo: Algo::Sobirl,
            eps,
            ..Self::msobirl(k, 1, beta, 1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 1 || self.n < 1 {
            return bad("K and N must be at least 1");
        }
        if !(self.beta > 0.0 && self.xi > 0.0 && self.eps > 0.0) {
            return bad("beta, xi and eps must be positive");
        }
        if self.tau_k.is_some_and(|t| !(t > 0.0)) {
            return bad("tau_k must be positive");
        }
        Ok(())
    }

    pub fn initial_x(&self, n_params: usize) -> Result<DVector<f64>> {
        match &self.x0 {
            None => Ok(DVector::zeros(n_params)),
            Some(v) if v.len() == n_params => Ok(DVector::from_vec(v.clone())),
            Some(v) => Err(Error::Dimension(format!(
                "x0 has length {}, reward model expects {n_params}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Oracle solves for the true gradient and `w` target every iteration.
    pub diagnostics: bool,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub k: usize,
    /// `f(x_k, pi_k)`.
    pub phi: f64,
    pub grad_hat_norm2: f64,
    pub grad_true_norm2: Option<f64>,
    pub lower_residual: f64,
    pub w_residual: Option<f64>,
    pub eps_cert: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub k: usize,
    pub x: DVector<f64>,
    pub q: DVector<f64>,
    pub pi: Policy,
    pub v: DVector<f64>,
    pub w: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: SolverState,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug)]
pub struct RunAbort {
    pub error: Error,
    pub last_good: SolverState,
    pub metrics: Vec<MetricsRow>,
}

pub type RunResult = std::result::Result<RunOutput, Box<RunAbort>>;

/// `||pi - pi*||_2^2 <= (sqrt(|S||A|) (2/tau) ||Q - Q*||_inf)^2` for the returned solution.
pub fn eps_certificate(mdp: &TabularMdp, sol: &SoftSolution) -> f64 {
    let c = (mdp.n_sa() as f64).sqrt() * 2.0 / mdp.tau() * sol.error_bound;
    c * c
}

/// Q-tolerance that certifies `||pi - pi*||_2^2 <= eps`.
pub fn q_tolerance(mdp: &TabularMdp, eps: f64) -> f64 {
    mdp.tau() * eps.sqrt() / (2.0 * (mdp.n_sa() as f64).sqrt())
}

/// Soft value iteration to the `eps` certificate; warm-started from `warm_q`,
/// else from `tau log pi_init`.
pub fn lower_solve_to_eps(
    mdp: &TabularMdp,
    rm: &RewardModel,
    x: &DVector<f64>,
    pi_init: &Policy,
    warm_q: Option<&DVector<f64>>,
    eps: f64,
) -> Result<(Policy, SoftSolution)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    pi_init.check_shape(mdp)?;
    let q0 = match warm_q {
        Some(q) => q.clone(),
        None => pi_init
            .probs()
            .map(|p| if p > 0.0 { mdp.tau() * p.ln() } else { 0.0 }),
    };
    let sol = solve_soft_optimal(mdp, &rm.reward(x)?, &q0, q_tolerance(mdp, eps))?;
    Ok((sol.pi_star.clone(), sol))
}

fn check_finite(k: usize, x: &DVector<f64>, what: &str) -> Result<()> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged {
            k,
            reason: format!("non-finite {what}"),
        });
    }
    if x.norm() > DIVERGENCE_NORM {
        return Err(Error::Diverged {
            k,
            reason: format!("||{what}|| = {:e} exceeds {DIVERGENCE_NORM:e}", x.norm()),
        });
    }
    Ok(())
}

fn check_spaces(mdp: &TabularMdp, rm: &RewardModel, obj: &UpperObjective) -> Result<()> {
    if !mdp.same_spaces(&obj.upper.mdp) {
        return Err(Error::Dimension(
            "upper and lower MDPs must share state and action spaces".into(),
        ));
    }
    if rm.n_sa() != mdp.n_sa() {
        return Err(Error::Dimension(
            "reward model does not match the MDP".into(),
        ));
    }
    Ok(())
}

/// Oracle quantities at `x`, warm-started from the previous oracle solve.
struct Oracle {
    q: DVector<f64>,
}

impl Oracle {
    fn solve(
        &mut self,
        mdp: &TabularMdp,
        rm: &RewardModel,
        x: &DVector<f64>,
    ) -> Result<SoftSolution> {
        let sol = solve_soft_optimal(mdp, &rm.reward(x)?, &self.q, EXACT_LOWER_TOL)?;
        self.q = sol.q_star.clone();
        Ok(sol)
    }
}

struct Recorder<'a> {
    metrics: Vec<MetricsRow>,
    observer: &'a mut dyn FnMut(&SolverState, &MetricsRow),
    start: Instant,
    timed: bool,
}

impl Recorder<'_> {
    fn emit(&mut self, state: &SolverState, mut row: MetricsRow) {
        if self.timed {
            row.wall_ms = Some(self.start.elapsed().as_secs_f64() * 1e3);
        }
        (self.observer)(state, &row);
        self.metrics.push(row);
    }

    fn abort(self, error: Error, last_good: SolverState) -> Box<RunAbort> {
        Box::new(RunAbort {
            error,
            last_good,
            metrics: self.metrics,
        })
    }
}

/// Model-based loop. Each outer step forms `(A_k, b_k, V_k)` at `(x_k, pi_k)`,
/// moves `w`, then `x`, then applies `N` warm-started sweeps under `x_{k+1}`.
pub fn run_msobirl(
    mdp: &TabularMdp,
    rm: &RewardModel,
    obj: &UpperObjective,
    cfg: &SolverConfig,
    opts: RunOptions,
    observer: &mut dyn FnMut(&SolverState, &MetricsRow),
) -> RunResult {
    let (ns, na, tau) = (mdp.n_states(), mdp.n_actions(), mdp.tau());
    let mut x = cfg
        .initial_x(rm.n_params())
        .map_err(|e| early_abort(e, mdp, rm))?;
    let mut state = SolverState {
        k: 0,
        q: DVector::zeros(mdp.n_sa()),
        pi: Policy::uniform(ns, na),
        v: DVector::zeros(ns),
        w: Some(DVector::zeros(ns)),
        x: x.clone(),
    };
    if let Err(e) = cfg.validate().and_then(|_| check_spaces(mdp, rm, obj)) {
        return Err(Box::new(RunAbort {
            error: e,
            last_good: state,
            metrics: Vec::new(),
        }));
    }
    let jac = rm.jacobian();
    let u_t = build_u_matrix(mdp).transpose();
    let mut w = DVector::zeros(ns);
    let mut q = DVector::zeros(mdp.n_sa());
    let mut oracle = Oracle { q: q.clone() };
    let mut rec = Recorder {
        metrics: Vec::with_capacity(cfg.k),
        observer,
        start: Instant::now(),
        timed: opts.record_wall_time,
    };

    for k in 0..cfg.k {
        let step = (|| -> Result<(MetricsRow, DVector<f64>, SolverState)> {
            let r = rm.reward(&x)?;
            let pi = softmax_policy(&q, na, tau);
            let v = soft_value_from_q(&q, na, tau);
            let ev = evaluate_upper(obj, rm, &x, &pi)?;

            let a_k = resolvent_matrix(mdp, &induced_transition(mdp, &pi)?).transpose();
            let b_k = &u_t * tangent_weighted(&pi, &ev.grad_pi);
            let a_t = a_k.transpose();
            w = &w - cfg.xi * (&a_t * (&a_k * &w) - &a_t * &b_k);
            check_finite(k, &w, "w")?;

            let grad_hat = msobirl_from_eval(mdp, &r, &jac, &pi, &v, &w, &ev);
            let lower_residual = (soft_bellman_apply(mdp, &r, &q) - &q).amax();
            let (grad_true_norm2, w_residual) = if opts.diagnostics {
                let sol = oracle.solve(mdp, rm, &x)?;
                let exact = exact_hyper_gradient_at(mdp, rm, &x, obj, &sol)?;
                let g_star = evaluate_upper(obj, rm, &x, &sol.pi_star)?.grad_pi;
                let w_target = w_star(mdp, &sol.pi_star, &g_star)?;
                (
                    Some(exact.grad.norm_squared()),
                    Some((&w - w_target).norm()),
                )
            } else {
                (None, None)
            };
            let row = MetricsRow {
                k,
                phi: ev.f,
                grad_hat_norm2: grad_hat.norm_squared(),
                grad_true_norm2,
                lower_residual,
                w_residual,
                eps_cert: None,
                wall_ms: None,
            };
            let snapshot = SolverState {
                k,
                x: x.clone(),
                q: q.clone(),
                pi,
                v,
                w: Some(w.clone()),
            };
            Ok((row, grad_hat, snapshot))
        })();
        let (row, grad_hat, snapshot) = match step {
            Ok(t) => t,
            Err(e) => return Err(rec.abort(e, state)),
        };
        rec.emit(&snapshot, row);
        state = snapshot;

        let x_next = &x - cfg.beta * &grad_hat;
        if let Err(e) = check_finite(k, &x_next, "x") {
            return Err(rec.abort(e, state));
        }
        x = x_next;
        let r_next = match rm.reward(&x) {
            Ok(r) => r,
            Err(e) => return Err(rec.abort(e, state)),
        };
        q = bellman_sweeps(mdp, &r_next, &q, cfg.n);
        if let Err(e) = check_finite(k, &q, "Q") {
            return Err(rec.abort(e, state));
        }
    }
    let pi = softmax_policy(&q, na, tau);
    let v = soft_value_from_q(&q, na, tau);
    let final_state = SolverState {
        k: cfg.k,
        x,
        q,
        pi,
        v,
        w: Some(w),
    };
    Ok(RunOutput {
        state: final_state,
        metrics: rec.metrics,
    })
}

fn early_abort(error: Error, mdp: &TabularMdp, rm: &RewardModel) -> Box<RunAbort> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    Box::new(RunAbort {
        error,
        last_good: SolverState {
            k: 0,
            x: DVector::zeros(rm.n_params()),
            q: DVector::zeros(mdp.n_sa()),
            pi: Policy::uniform(ns, na),
            v: DVector::zeros(ns),
            w: None,
        },
        metrics: Vec::new(),
    })
}

/// Model-free loop: eps-accurate lower solves warm-started from the previous
/// solution, then a model-free (or practical) hyper-gradient step.
pub fn run_sobirl(
    mdp: &TabularMdp,
    rm: &RewardModel,
    obj: &UpperObjective,
    cfg: &SolverConfig,
    opts: RunOptions,
    observer: &mut dyn FnMut(&SolverState, &MetricsRow),
) -> RunResult {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut x = cfg
        .initial_x(rm.n_params())
        .map_err(|e| early_abort(e, mdp, rm))?;
    let mut state = SolverState {
        k: 0,
        x: x.clone(),
        q: DVector::zeros(mdp.n_sa()),
        pi: Policy::uniform(ns, na),
        v: DVector::zeros(ns),
        w: None,
    };
    if let Err(e) = cfg.validate().and_then(|_| check_spaces(mdp, rm, obj)) {
        return Err(Box::new(RunAbort {
            error: e,
            last_good: state,
            metrics: Vec::new(),
        }));
    }
    let root = RngKey::new(cfg.seed);
    let tau_k = cfg.tau_k.unwrap_or(mdp.tau());
    let mut pi = Policy::uniform(ns, na);
    let mut warm: DVector<f64> = DVector::zeros(mdp.n_sa());
    let mut oracle = Oracle { q: warm.clone() };
    let mut buffer = PreferenceBuffer::default();
    let sampled = matches!(&obj.kind, ObjectiveKind::Preference(c) if c.mode == crate::objectives::EvalMode::Sample);
    let mut rec = Recorder {
        metrics: Vec::with_capacity(cfg.k),
        observer,
        start: Instant::now(),
        timed: opts.record_wall_time,
    };

    for k in 0..cfg.k {
        let step = (|| -> Result<(MetricsRow, DVector<f64>, SolverState, DVector<f64>)> {
            let (pi_k, sol) = lower_solve_to_eps(mdp, rm, &x, &pi, Some(&warm), cfg.eps)?;
            let key = root.fork(k as u64);
            let buf = if sampled { Some(&mut buffer) } else { None };
            let report = match cfg.estimator {
                EstimatorKind::ModelFree => {
                    mf_hyper_estimator(mdp, rm, &x, &pi_k, obj, &cfg.sampling, key, buf)?
                }
                EstimatorKind::Practical => {
                    practical_estimator(mdp, rm, &x, &pi_k, tau_k, obj, &cfg.sampling, key, buf)?
                }
            };
            let grad_true_norm2 = if opts.diagnostics {
                let sol_star = oracle.solve(mdp, rm, &x)?;
                Some(
                    exact_hyper_gradient_at(mdp, rm, &x, obj, &sol_star)?
                        .grad
                        .norm_squared(),
                )
            } else {
                None
            };
            let row = MetricsRow {
                k,
                phi: report.f,
                grad_hat_norm2: report.grad.norm_squared(),
                grad_true_norm2,
                lower_residual: sol.residual,
                w_residual: None,
                eps_cert: Some(eps_certificate(mdp, &sol)),
                wall_ms: None,
            };
            let snapshot = SolverState {
                k,
                x: x.clone(),
                q: sol.q_star.clone(),
                pi: pi_k,
                v: sol.v_star.clone(),
                w: None,
            };
            Ok((row, report.grad, snapshot, sol.q_star))
        })();
        let (row, grad, snapshot, q_k) = match step {
            Ok(t) => t,
            Err(e) => return Err(rec.abort(e, state)),
        };
        rec.emit(&snapshot, row);
        pi = snapshot.pi.clone();
        warm = q_k;
        state = snapshot;

        let x_next = &x - cfg.beta * &grad;
        if let Err(e) = check_finite(k, &x_next, "x") {
            return Err(rec.abort(e, state));
        }
        x = x_next;
    }
    let final_state = SolverState {
        k: cfg.k,
        x,
        ..state
    };
    Ok(RunOutput {
        state: final_state,
        metrics: rec.metrics,
    })
}

/// Dispatches on `cfg.algo`.
pub fn run(
    mdp: &TabularMdp,
    rm: &RewardModel,
    obj: &UpperObjective,
    cfg: &SolverConfig,
    opts: RunOptions,
    observer: &mut dyn FnMut(&SolverState, &MetricsRow),
) -> RunResult {
    match cfg.algo {
        Algo::Msobirl => run_msobirl(mdp, rm, obj, cfg, opts, observer),
        Algo::Sobirl => run_sobirl(mdp, rm, obj, cfg, opts, observer),
    }
}
