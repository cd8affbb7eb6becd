use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{random_policy, random_vector, CheckReport};
use crate::linalg;
use crate::mdp::{build_u_matrix, induced_transition, resolvent_matrix, Policy, TabularMdp};
use crate::objectives::{enumerate_trajectories, trajectory_probability, UpperMdp};
use crate::rng::RngKey;
use crate::soft::soft_bellman_apply;

/// Largest `T^I` (trajectories to the power of the tuple size) the TV check enumerates.
pub const TV_TUPLE_BUDGET: f64 = 2e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyCheck {
    MMatrix,
    UBounds,
    LogNorm,
    Contraction,
    TvDrift,
    TransitionLipschitz,
}

impl PropertyCheck {
    pub const ALL: [PropertyCheck; 6] = [
        PropertyCheck::MMatrix,
        PropertyCheck::UBounds,
        PropertyCheck::LogNorm,
        PropertyCheck::Contraction,
        PropertyCheck::TvDrift,
        PropertyCheck::TransitionLipschitz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PropertyCheck::MMatrix => "mmatrix",
            PropertyCheck::UBounds => "ubounds",
            PropertyCheck::LogNorm => "lognorm",
            PropertyCheck::Contraction => "contraction",
            PropertyCheck::TvDrift => "tv",
            PropertyCheck::TransitionLipschitz => "plipschitz",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    /// Random draws (policy pairs, Q pairs) per instance.
    pub draws: usize,
    pub horizon: usize,
    /// Trajectories per tuple in the TV check.
    pub n_traj: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            draws: 5,
            horizon: 2,
            n_traj: 2,
        }
    }
}

/// `min(entries of (I - gamma P^pi)^{-1}, diagonal - 1)`.
pub fn mmatrix_margin(mdp: &TabularMdp, policy: &Policy) -> f64 {
    let p_pi = induced_transition(mdp, policy).expect("shapes agree");
    let a = resolvent_matrix(mdp, &p_pi);
    let n = mdp.n_states();
    let Ok(inv) = linalg::solve(&a, &DMatrix::identity(n, n), "M-matrix inverse") else {
        return f64::NEG_INFINITY;
    };
    let min_entry = inv.min();
    let min_diag = inv.diagonal().min();
    min_entry.min(min_diag - 1.0)
}

/// Full column rank plus `sqrt|A| (1-gamma) <= ||U||_2 <= sqrt(|S||A|(1+gamma))`.
pub fn u_bounds_margin(mdp: &TabularMdp) -> f64 {
    let u = build_u_matrix(mdp);
    if linalg::rank(&u, 1e-12) < mdp.n_states() {
        return -1.0;
    }
    let norm = linalg::spectral_norm(&u);
    let (ns, na, g) = (mdp.n_states() as f64, mdp.n_actions() as f64, mdp.gamma());
    let lower = na.sqrt() * (1.0 - g);
    let upper = (ns * na * (1.0 + g)).sqrt();
    (norm - lower).min(upper - norm)
}

/// `||log pi1 - log pi2|| - ||pi1 - pi2||`, worst of the inf- and 2-norms.
pub fn lognorm_margin(p1: &Policy, p2: &Policy) -> f64 {
    let dp = p1.probs() - p2.probs();
    let dl = p1.log_probs().expect("positive") - p2.log_probs().expect("positive");
    (dl.amax() - dp.amax()).min(dl.norm() - dp.norm())
}

/// `gamma ||Q1 - Q2|| + 1e-12 - ||T Q1 - T Q2||`.
pub fn contraction_margin(
    mdp: &TabularMdp,
    reward: &DVector<f64>,
    q1: &DVector<f64>,
    q2: &DVector<f64>,
) -> f64 {
    let lhs = (soft_bellman_apply(mdp, reward, q1) - soft_bellman_apply(mdp, reward, q2)).amax();
    mdp.gamma() * (q1 - q2).amax() + 1e-12 - lhs
}

/// `sqrt|A| ||pi1 - pi2||_2 - ||P^pi1 - P^pi2||_2`.
pub fn transition_lipschitz_margin(mdp: &TabularMdp, p1: &Policy, p2: &Policy) -> f64 {
    let d = induced_transition(mdp, p1).expect("shapes agree")
        - induced_transition(mdp, p2).expect("shapes agree");
    (mdp.n_actions() as f64).sqrt() * (p1.probs() - p2.probs()).norm() - linalg::spectral_norm(&d)
}

/// Exact total variation between the `n_traj`-fold product trajectory laws of two policies.
/// `None` when the tuple count exceeds [`TV_TUPLE_BUDGET`].
pub fn trajectory_tv(
    mdp: &TabularMdp,
    p1: &Policy,
    p2: &Policy,
    horizon: usize,
    n_traj: usize,
) -> Option<f64> {
    let upper = UpperMdp {
        mdp: mdp.clone(),
        reward: DVector::zeros(mdp.n_sa()),
    };
    // the midpoint policy has the union of both supports
    let mid = Policy::new(
        mdp.n_states(),
        mdp.n_actions(),
        (p1.probs() + p2.probs()) / 2.0,
    )
    .ok()?;
    let trajs = enumerate_trajectories(&upper, &mid, horizon).ok()?;
    if (trajs.len() as f64).powi(n_traj as i32) > TV_TUPLE_BUDGET {
        return None;
    }
    let a: Vec<f64> = trajs
        .iter()
        .map(|(d, _)| trajectory_probability(&upper, p1, d))
        .collect();
    let b: Vec<f64> = trajs
        .iter()
        .map(|(d, _)| trajectory_probability(&upper, p2, d))
        .collect();
    // product weights over all n_traj-tuples, built one factor at a time
    let mut pa = vec![1.0];
    let mut pb = vec![1.0];
    for _ in 0..n_traj {
        pa = pa
            .iter()
            .flat_map(|x| a.iter().map(move |y| x * y))
            .collect();
        pb = pb
            .iter()
            .flat_map(|x| b.iter().map(move |y| x * y))
            .collect();
    }
    let diffs: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).collect();
    Some(0.5 * linalg::pairwise_sum(&diffs))
}

/// `(H I / 2) sqrt|A| ||pi1 - pi2||_2 - TV`.
pub fn tv_margin(
    mdp: &TabularMdp,
    p1: &Policy,
    p2: &Policy,
    horizon: usize,
    n_traj: usize,
) -> Option<f64> {
    let tv = trajectory_tv(mdp, p1, p2, horizon, n_traj)?;
    let bound = (horizon * n_traj) as f64 / 2.0
        * (mdp.n_actions() as f64).sqrt()
        * (p1.probs() - p2.probs()).norm();
    Some(bound - tv)
}

fn instance_margins(
    mdp: &TabularMdp,
    check: PropertyCheck,
    opts: &SuiteOptions,
    key: RngKey,
) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = key.rng();
    let mut out = Vec::new();
    match check {
        PropertyCheck::UBounds => out.push(u_bounds_margin(mdp)),
        _ => {
            for _ in 0..opts.draws {
                let scale = rng.random_range(0.1..3.0);
                let p1 = random_policy(&mut rng, ns, na, scale);
                let p2 = random_policy(&mut rng, ns, na, scale);
                let margin = match check {
                    PropertyCheck::MMatrix => Some(mmatrix_margin(mdp, &p1)),
                    PropertyCheck::LogNorm => Some(lognorm_margin(&p1, &p2)),
                    PropertyCheck::Contraction => {
                        let r = random_vector(&mut rng, mdp.n_sa(), 1.0);
                        let q1 = random_vector(&mut rng, mdp.n_sa(), 5.0);
                        let q2 = random_vector(&mut rng, mdp.n_sa(), 5.0);
                        Some(contraction_margin(mdp, &r, &q1, &q2))
                    }
                    PropertyCheck::TvDrift => tv_margin(mdp, &p1, &p2, opts.horizon, opts.n_traj),
                    PropertyCheck::TransitionLipschitz => {
                        Some(transition_lipschitz_margin(mdp, &p1, &p2))
                    }
                    PropertyCheck::UBounds => unreachable!(),
                };
                out.extend(margin);
            }
        }
    }
    out
}

/// Runs `checks` over `instances`; instances are processed in parallel with
/// per-instance streams, so the report depends only on `seed`.
pub fn property_suite(
    instances: &[TabularMdp],
    checks: &[PropertyCheck],
    opts: SuiteOptions,
    seed: u64,
) -> Vec<CheckReport> {
    let root = RngKey::new(seed).fork(0x7e57);
    checks
        .iter()
        .map(|&check| {
            let per_instance: Vec<Vec<f64>> = instances
                .par_iter()
                .enumerate()
                .map(|(i, mdp)| {
                    instance_margins(mdp, check, &opts, root.fork(check as u64).fork(i as u64))
                })
                .collect();
            let evaluated = per_instance.iter().filter(|m| !m.is_empty()).count();
            let margins: Vec<f64> = per_instance.into_iter().flatten().collect();
            let mut report = CheckReport::from_margins(check.name(), &margins);
            report.instances = evaluated;
            if evaluated == 0 {
                report.pass = false;
            }
            report
        })
        .collect()
}
