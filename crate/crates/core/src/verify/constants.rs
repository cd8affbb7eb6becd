use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assumption constants of the convergence analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConstants {
    #[serde(rename = "C_r", default)]
    pub c_r: f64,
    #[serde(rename = "C_rx")]
    pub c_rx: f64,
    #[serde(rename = "L_r", default)]
    pub l_r: f64,
    #[serde(rename = "L_f", default)]
    pub l_f: f64,
    #[serde(rename = "C_fpi", default)]
    pub c_fpi: f64,
    #[serde(rename = "C_l", default)]
    pub c_l: f64,
    #[serde(rename = "L_l", default)]
    pub l_l: f64,
    #[serde(rename = "L_l1", default)]
    pub l_l1: f64,
    /// Trajectory horizon.
    #[serde(rename = "H", default = "one")]
    pub horizon: usize,
    /// Trajectories per upper-level sample.
    #[serde(rename = "I", default = "two")]
    pub n_traj: usize,
    pub gamma: f64,
    pub tau: f64,
    pub n_states: usize,
    pub n_actions: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("C_r", self.c_r),
            ("C_rx", self.c_rx),
            ("L_r", self.l_r),
            ("L_f", self.l_f),
            ("C_fpi", self.c_fpi),
            ("C_l", self.c_l),
            ("L_l", self.l_l),
            ("L_l1", self.l_l1),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::Config(
                "n_states and n_actions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    #[serde(rename = "L_V")]
    pub l_v: f64,
    #[serde(rename = "L_pi")]
    pub l_pi: f64,
    #[serde(rename = "L_V1")]
    pub l_v1: f64,
    #[serde(rename = "L_V1_M")]
    pub l_v1_m: f64,
    #[serde(rename = "L_theta")]
    pub l_theta: f64,
    #[serde(rename = "L_phi_M")]
    pub l_phi_m: f64,
    #[serde(rename = "L_phi")]
    pub l_phi: f64,
    #[serde(rename = "L_phitilde")]
    pub l_phitilde: f64,
    #[serde(rename = "L_phihat_pi")]
    pub l_phihat_pi: f64,
    #[serde(rename = "C_sigma_pi")]
    pub c_sigma_pi: f64,
    #[serde(rename = "L_w")]
    pub l_w: f64,
}

impl DerivedConstants {
    pub fn rows(&self) -> [(&'static str, f64); 11] {
        [
            ("L_V", self.l_v),
            ("L_pi", self.l_pi),
            ("L_V1", self.l_v1),
            ("L_V1_M", self.l_v1_m),
            ("L_theta", self.l_theta),
            ("L_phi_M", self.l_phi_m),
            ("L_phi", self.l_phi),
            ("L_phitilde", self.l_phitilde),
            ("L_phihat_pi", self.l_phihat_pi),
            ("C_sigma_pi", self.c_sigma_pi),
            ("L_w", self.l_w),
        ]
    }
}

pub fn theory_constants(pc: &ProblemConstants) -> DerivedConstants {
    let g = pc.gamma;
    let tau = pc.tau;
    let s = pc.n_states as f64;
    let a = pc.n_actions as f64;
    let hi = (pc.horizon * pc.n_traj) as f64;
    let omg = 1.0 - g;
    let opg = 1.0 + g;
    let (c_rx, l_r, l_f, c_fpi) = (pc.c_rx, pc.l_r, pc.l_f, pc.c_fpi);
    let (c_l, l_l, l_l1) = (pc.c_l, pc.l_l, pc.l_l1);
    let sa = s * a;

    let l_v = s.sqrt() * c_rx / omg;
    let l_pi = 2.0 * sa.sqrt() * c_rx / (tau * omg);
    let l_v1 = opg * c_rx * l_pi * a.sqrt() / (omg * omg) + l_r / omg;
    let l_v1_m = s.sqrt() * l_v1;
    let u_norm = (sa * opg).sqrt();
    let l_theta = u_norm * (l_f * (1.0 + l_pi) + c_fpi * l_pi);
    let l_phi_m = l_f
        + l_f * l_pi
        + sa.sqrt() * (l_r * c_fpi + c_rx * c_fpi * l_pi + c_rx * (l_f + l_f * l_pi))
        + s.sqrt() * c_rx / omg * l_theta
        + u_norm * c_fpi * l_v1_m;
    let l_phi = l_l1
        + l_l * hi * l_pi * a.sqrt()
        + 2.0 / tau * hi * (c_l * l_v1 + c_rx / omg * l_l)
        + 2.0 * hi * hi * c_l * c_rx * l_pi / (tau * omg) * a.sqrt();
    let l_phitilde =
        hi * l_l * a.sqrt() + 2.0 / tau * c_l * c_rx * hi * a.sqrt() / omg * (opg / omg + hi);
    let l_phihat_pi = l_f + sa.sqrt() * c_rx * (l_f + c_fpi) / tau;
    let c_sigma_pi = 2.0 * s.powf(1.5) * a.powf(1.5) * opg * c_fpi / omg
        + s * a.powf(1.5) * opg.sqrt() * c_fpi
        + s * a.sqrt() * opg * (l_f + c_fpi);
    let l_w = (l_theta + a / omg * (s * opg).sqrt() * c_fpi * l_pi) / omg;

    DerivedConstants {
        l_v,
        l_pi,
        l_v1,
        l_v1_m,
        l_theta,
        l_phi_m,
        l_phi,
        l_phitilde,
        l_phihat_pi,
        c_sigma_pi,
        l_w,
    }
}

/// Step sizes and inner iteration count for the model-based loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestedParameters {
    pub beta: f64,
    pub xi: f64,
    /// `beta / xi`.
    pub rho: f64,
    #[serde(rename = "N")]
    pub n_inner: usize,
    pub zeta_q: f64,
    pub zeta_w: f64,
}

const SHRINK: f64 = 0.99;

/// Upper limits of the strict inequalities on `xi`, `rho`, `beta`, and `gamma^{2N}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterBounds {
    pub xi: f64,
    pub rho: f64,
    pub beta: f64,
    pub gamma_2n: f64,
}

pub fn parameter_bounds(pc: &ProblemConstants) -> ParameterBounds {
    let dc = theory_constants(pc);
    let g = pc.gamma;
    let s = pc.n_states as f64;
    let a = pc.n_actions as f64;
    let omg = 1.0 - g;
    let opg = 1.0 + g;
    let c_rx = pc.c_rx;
    let xi = 1f64.min(omg * omg / (16.0 * s * s * opg * opg));
    let rho = (omg * omg / (6.0 * s * c_rx * c_rx)).min(omg * omg / (8.0 * dc.l_w * dc.l_w));
    let beta_a = pc.tau * pc.tau
        / 8.0
        / (dc.l_phihat_pi * dc.l_phihat_pi
            + s * s * a.powi(3) * opg * pc.c_fpi.powi(2) * c_rx * c_rx / (omg * omg));
    let beta_b = 0.25 / (dc.l_phi_m / 2.0 + 2.0 * dc.l_w * dc.l_w + 0.25 * (c_rx / omg).powi(2));
    let gamma_2n =
        0.125 / (1.0 + 4.0 * dc.c_sigma_pi.powi(2) / (pc.tau * pc.tau) * (1.0 / (omg * omg) + 4.0));
    ParameterBounds {
        xi,
        rho,
        beta: beta_a.min(beta_b),
        gamma_2n,
    }
}

/// Largest admissible values shrunk by 0.99; `N` is the smallest integer meeting its bound.
pub fn suggest_parameters(pc: &ProblemConstants) -> SuggestedParameters {
    let b = parameter_bounds(pc);
    let xi = SHRINK * b.xi;
    let rho_max = SHRINK * b.rho;
    let beta = (rho_max * xi).min(SHRINK * b.beta);
    let g = pc.gamma;
    let mut n = ((b.gamma_2n.ln() / (2.0 * g.ln())).floor() as i64 + 1).max(1) as usize;
    while g.powi(2 * n as i32) >= b.gamma_2n {
        n += 1;
    }
    while n > 1 && g.powi(2 * (n as i32 - 1)) < b.gamma_2n {
        n -= 1;
    }
    SuggestedParameters {
        beta,
        xi,
        rho: beta / xi,
        n_inner: n,
        zeta_q: 1.0,
        zeta_w: 1.0,
    }
}

/// One printed inequality with both sides evaluated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn lt(name: &'static str, lhs: f64, rhs: f64) -> InequalityCheck {
    InequalityCheck {
        name,
        lhs,
        rhs,
        holds: lhs < rhs,
    }
}

/// Re-evaluates the step-size configuration inequalities at `p`.
pub fn check_parameter_inequalities(
    pc: &ProblemConstants,
    p: &SuggestedParameters,
) -> Vec<InequalityCheck> {
    let dc = theory_constants(pc);
    let g = pc.gamma;
    let s = pc.n_states as f64;
    let a = pc.n_actions as f64;
    let omg = 1.0 - g;
    let opg = 1.0 + g;
    let c_rx = pc.c_rx;
    let tau2 = pc.tau * pc.tau;
    vec![
        InequalityCheck {
            name: "zeta_Q = zeta_w = 1",
            lhs: p.zeta_q,
            rhs: p.zeta_w,
            holds: p.zeta_q == 1.0 && p.zeta_w == 1.0,
        },
        lt("xi < 1", p.xi, 1.0),
        lt(
            "xi < (1-g)^2 / (16 S^2 (1+g)^2)",
            p.xi,
            omg * omg / (16.0 * s * s * opg * opg),
        ),
        lt(
            "rho < (1-g)^2 / (6 S C_rx^2)",
            p.rho,
            omg * omg / (6.0 * s * c_rx * c_rx),
        ),
        lt(
            "rho < (1-g)^2 / (8 L_w^2)",
            p.rho,
            omg * omg / (8.0 * dc.l_w * dc.l_w),
        ),
        InequalityCheck {
            name: "beta = rho xi",
            lhs: p.beta,
            rhs: p.rho * p.xi,
            holds: (p.beta - p.rho * p.xi).abs() <= 1e-15 * p.beta.abs().max(f64::MIN_POSITIVE),
        },
        lt(
            "beta < tau^2/8 (L_phihat_pi^2 + S^2 A^3 (1+g) C_fpi^2 C_rx^2 / (1-g)^2)^-1",
            p.beta,
            tau2 / 8.0
                / (dc.l_phihat_pi.powi(2)
                    + s * s * a.powi(3) * opg * pc.c_fpi.powi(2) * c_rx * c_rx / (omg * omg)),
        ),
        lt(
            "beta < 1/4 (L_phi_M/2 + 2 L_w^2 + (C_rx/(1-g))^2 / 4)^-1",
            p.beta,
            0.25 / (dc.l_phi_m / 2.0 + 2.0 * dc.l_w.powi(2) + 0.25 * (c_rx / omg).powi(2)),
        ),
        lt(
            "gamma^2N < 1/8 (1 + 4 C_sigma_pi^2 / tau^2 (1/(1-g)^2 + 4))^-1",
            g.powi(2 * p.n_inner as i32),
            0.125 / (1.0 + 4.0 * dc.c_sigma_pi.powi(2) / tau2 * (1.0 / (omg * omg) + 4.0)),
        ),
    ]
}

/// The descent conditions the configuration is designed to imply.
pub fn check_descent_conditions(
    pc: &ProblemConstants,
    p: &SuggestedParameters,
) -> Vec<InequalityCheck> {
    let dc = theory_constants(pc);
    let g = pc.gamma;
    let s = pc.n_states as f64;
    let a = pc.n_actions as f64;
    let omg = 1.0 - g;
    let opg = 1.0 + g;
    let c_rx = pc.c_rx;
    let tau2 = pc.tau * pc.tau;
    let (beta, xi) = (p.beta, p.xi);
    vec![
        lt(
            "3 beta S C_rx^2 / (2 xi (1-g)^2) < 1/2 - 4 xi S^2 (1+g)^2/(1-g)^2",
            3.0 * beta * s * c_rx * c_rx / (2.0 * xi * omg * omg),
            0.5 - 4.0 * xi * s * s * opg * opg / (omg * omg),
        ),
        lt(
            "beta < tau^2/8 (...)^-1",
            beta,
            tau2 / 8.0
                / (dc.l_phihat_pi.powi(2)
                    + s * s * a.powi(3) * opg * pc.c_fpi.powi(2) * c_rx * c_rx / (omg * omg)),
        ),
        lt(
            "gamma^2N < 1/8 (1 + 4 xi^2 C_sigma_pi^2 / tau^2 (...))^-1",
            g.powi(2 * p.n_inner as i32),
            0.125
                / (1.0 + 4.0 * xi * xi * dc.c_sigma_pi.powi(2) / tau2 * (1.0 / (omg * omg) + 4.0)),
        ),
        lt(
            "L_phi_M beta/2 + 2 beta L_w^2 (1 + 1/(xi (1-g)^2)) + (C_rx/(1-g))^2 beta/4 < 1/2",
            dc.l_phi_m / 2.0 * beta
                + 2.0 * beta * dc.l_w.powi(2) * (1.0 + 1.0 / (xi * omg * omg))
                + 0.25 * (c_rx / omg).powi(2) * beta,
            0.5,
        ),
    ]
}
