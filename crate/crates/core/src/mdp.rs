//! Tabular MDPs: storage, validation, induced chains, the stacked `U` matrix,
//! discounted occupancy and seeded rollouts.
//!
//! State-action vectors are flat and s-major: index `s * n_actions + a`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::sample_index;

pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub message: String,
    /// `(s, a)` of the offending transition row, when applicable.
    pub row: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, message: String, row: Option<(usize, usize)>) {
        self.violations.push(Violation { message, row });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "pass");
        }
        let msgs: Vec<&str> = self.violations.iter().map(|v| v.message.as_str()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Which temperatures are admissible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauRule {
    /// Lower-level MDPs: `tau > 0`.
    Positive,
    /// Upper-level MDPs: `tau >= 0`, with the entropy term dropped at zero.
    NonNegative,
}

#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    tau: f64,
    rho: DVector<f64>,
    /// `|S||A| x |S|`, row `(s,a)` is `P(.|s,a)`.
    p: DMatrix<f64>,
    /// Same table, row-major, for sampling.
    p_rows: Vec<f64>,
}

impl TabularMdp {
    /// Shape-checked construction without probability or parameter validation.
    pub fn from_raw(
        n_states: usize,
        n_actions: usize,
        transitions: DMatrix<f64>,
        gamma: f64,
        tau: f64,
        rho: DVector<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Dimension(
                "n_states and n_actions must be positive".into(),
            ));
        }
        if transitions.shape() != (n_states * n_actions, n_states) {
            return Err(Error::Dimension(format!(
                "transitions are {}x{}, expected {}x{}",
                transitions.nrows(),
                transitions.ncols(),
                n_states * n_actions,
                n_states
            )));
        }
        if rho.len() != n_states {
            return Err(Error::Dimension(format!(
                "rho has length {}, expected {}",
                rho.len(),
                n_states
            )));
        }
        let mut p_rows = Vec::with_capacity(transitions.len());
        for i in 0..transitions.nrows() {
            p_rows.extend(transitions.row(i).iter());
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            tau,
            rho,
            p: transitions,
            p_rows,
        })
    }

    /// Validated lower-level MDP.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: DMatrix<f64>,
        gamma: f64,
        tau: f64,
        rho: DVector<f64>,
    ) -> Result<Self> {
        let mdp = Self::from_raw(n_states, n_actions, transitions, gamma, tau, rho)?;
        let report = validate_mdp(&mdp);
        if report.is_ok() {
            Ok(mdp)
        } else {
            Err(Error::Invalid(report))
        }
    }

    /// The single-state single-action self-loop.
    pub fn loop1(gamma: f64, tau: f64) -> Self {
        Self::new(
            1,
            1,
            DMatrix::from_element(1, 1, 1.0),
            gamma,
            tau,
            DVector::from_element(1, 1.0),
        )
        .expect("loop1 parameters are valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn n_sa(&self) -> usize {
        self.n_states * self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }
    pub fn transitions(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn idx(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }
    /// `P(.|s,a)` as a contiguous slice.
    pub fn next_row(&self, s: usize, a: usize) -> &[f64] {
        let i = self.idx(s, a);
        &self.p_rows[i * self.n_states..(i + 1) * self.n_states]
    }

    /// Copy with a different discount or temperature (unvalidated).
    pub fn with_params(&self, gamma: f64, tau: f64) -> Self {
        Self {
            gamma,
            tau,
            ..self.clone()
        }
    }

    pub fn same_spaces(&self, other: &TabularMdp) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }
}

pub fn validate_mdp(mdp: &TabularMdp) -> ValidationReport {
    validate_mdp_with(mdp, TauRule::Positive)
}

pub fn validate_mdp_with(mdp: &TabularMdp, rule: TauRule) -> ValidationReport {
    let mut report = ValidationReport::default();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = mdp.next_row(s, a);
            if let Some((j, v)) = row
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                report.push(
                    format!("row (s={s},a={a}) has invalid entry {v} at s'={j}"),
                    Some((s, a)),
                );
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                report.push(format!("row (s={s},a={a}) sums to {sum}"), Some((s, a)));
            }
        }
    }
    let rho_sum: f64 = mdp.rho.iter().sum();
    if mdp.rho.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        report.push("rho not strictly positive".into(), None);
    }
    if !rho_sum.is_finite() || (rho_sum - 1.0).abs() > PROB_TOL {
        report.push(format!("rho sums to {rho_sum}"), None);
    }
    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        report.push(format!("gamma must lie in (0,1), got {}", mdp.gamma), None);
    }
    let tau_ok = match rule {
        TauRule::Positive => mdp.tau > 0.0,
        TauRule::NonNegative => mdp.tau >= 0.0,
    };
    if !tau_ok || !mdp.tau.is_finite() {
        let bound = if rule == TauRule::Positive {
            "> 0"
        } else {
            ">= 0"
        };
        report.push(format!("tau must be {bound}, got {}", mdp.tau), None);
    }
    report
}

/// JSON form of an MDP.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau: f64,
    pub rho: Vec<f64>,
    /// One row per `(s,a)`, s-major.
    pub transitions: Vec<Vec<f64>>,
    /// Rescale rows and `rho` to sum to one before validation.
    #[serde(default)]
    pub normalize: bool,
}

impl MdpSpec {
    /// Shape-checked, unvalidated model.
    pub fn to_raw(&self) -> Result<TabularMdp> {
        let n_sa = self.n_states * self.n_actions;
        if self.transitions.len() != n_sa {
            return Err(Error::Dimension(format!(
                "expected {n_sa} transition rows, found {}",
                self.transitions.len()
            )));
        }
        if let Some((i, r)) = self
            .transitions
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.n_states)
        {
            return Err(Error::Dimension(format!(
                "transition row {i} has length {}, expected {}",
                r.len(),
                self.n_states
            )));
        }
        let mut p = DMatrix::from_fn(n_sa, self.n_states, |i, j| self.transitions[i][j]);
        let mut rho = DVector::from_vec(self.rho.clone());
        if self.normalize {
            for i in 0..n_sa {
                let sum: f64 = p.row(i).sum();
                if sum > 0.0 {
                    p.row_mut(i).unscale_mut(sum);
                }
            }
            let sum = rho.sum();
            if sum > 0.0 {
                rho.unscale_mut(sum);
            }
        }
        TabularMdp::from_raw(self.n_states, self.n_actions, p, self.gamma, self.tau, rho)
    }

    pub fn build(&self, rule: TauRule) -> Result<TabularMdp> {
        let mdp = self.to_raw()?;
        let report = validate_mdp_with(&mdp, rule);
        if report.is_ok() {
            Ok(mdp)
        } else {
            Err(Error::Invalid(report))
        }
    }

    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.gamma,
            tau: mdp.tau,
            rho: mdp.rho.iter().copied().collect(),
            transitions: (0..mdp.n_sa())
                .map(|i| mdp.p.row(i).iter().copied().collect())
                .collect(),
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: DVector<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: DVector<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let row = &probs.as_slice()[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Dimension(format!(
                    "policy row {s} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::Dimension(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Trusted construction for rows that are normalized by construction.
    pub(crate) fn from_normalized(n_states: usize, n_actions: usize, probs: DVector<f64>) -> Self {
        debug_assert_eq!(probs.len(), n_states * n_actions);
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::from_normalized(
            n_states,
            n_actions,
            DVector::from_element(n_states * n_actions, 1.0 / n_actions as f64),
        )
    }

    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = DVector::zeros(n_states * n_actions);
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self::from_normalized(n_states, n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs.as_slice()[s * self.n_actions..(s + 1) * self.n_actions]
    }
    pub fn probs(&self) -> &DVector<f64> {
        &self.probs
    }

    /// Entrywise `log pi`; errors on a zero entry.
    pub fn log_probs(&self) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.probs.len());
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                return Err(Error::EntropyUndefined {
                    s: i / self.n_actions,
                    a: i % self.n_actions,
                });
            }
            out[i] = p.ln();
        }
        Ok(out)
    }

    pub fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// `P^pi`, the state chain induced by `policy`.
pub fn induced_transition(mdp: &TabularMdp, policy: &Policy) -> Result<DMatrix<f64>> {
    policy.check_shape(mdp)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut out = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (j, p) in mdp.next_row(s, a).iter().enumerate() {
                out[(s, j)] += w * p;
            }
        }
    }
    Ok(out)
}

/// `U = E - gamma P` where row `(s,a)` of `E` is `e_s`.
pub fn build_u_matrix(mdp: &TabularMdp) -> DMatrix<f64> {
    let mut u = -mdp.gamma * &mdp.p;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            u[(mdp.idx(s, a), s)] += 1.0;
        }
    }
    u
}

/// Repeats a state vector along actions: `out[(s,a)] = v[s]`.
pub fn stack_states(v: &DVector<f64>, n_actions: usize) -> DVector<f64> {
    DVector::from_fn(v.len() * n_actions, |i, _| v[i / n_actions])
}

/// `(I - gamma P^pi)`.
pub fn resolvent_matrix(mdp: &TabularMdp, p_pi: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::identity(mdp.n_states, mdp.n_states) - mdp.gamma * p_pi
}

/// Unnormalized discounted state occupancy `(I - gamma (P^pi)^T)^{-1} rho`; sums to `1/(1-gamma)`.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &Policy) -> Result<DVector<f64>> {
    let p_pi = induced_transition(mdp, policy)?;
    let a = resolvent_matrix(mdp, &p_pi).transpose();
    linalg::solve_vec(&a, &mdp.rho, "occupancy")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    State(usize),
    /// First action fixed as well.
    StateAction(usize, usize),
    Dist(&'a DVector<f64>),
}

/// `horizon` steps of the chain; every draw comes from `rng`.
pub fn sample_rollout<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &Policy,
    start: Start<'_>,
    horizon: usize,
    rng: &mut R,
) -> Trajectory {
    let mut steps = Vec::with_capacity(horizon);
    let (mut s, mut fixed_a) = match start {
        Start::State(s) => (s, None),
        Start::StateAction(s, a) => (s, Some(a)),
        Start::Dist(d) => (sample_index(d.as_slice(), rng.random::<f64>()), None),
    };
    for _ in 0..horizon {
        let a = match fixed_a.take() {
            Some(a) => a,
            None => sample_index(policy.row(s), rng.random::<f64>()),
        };
        steps.push((s, a));
        s = sample_index(mdp.next_row(s, a), rng.random::<f64>());
    }
    Trajectory { steps }
}
