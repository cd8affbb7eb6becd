//! Reward maps `r(x)` that are linear in the parameter, with exact Jacobians.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// `r = x`.
    Tabular,
    /// `r = Phi x`.
    Linear(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    kind: RewardKind,
    n_sa: usize,
    c_rx: f64,
    c_r: Option<f64>,
}

/// Largest row 2-norm of a Jacobian.
fn max_row_norm(jac: &DMatrix<f64>) -> f64 {
    (0..jac.nrows())
        .map(|i| jac.row(i).norm())
        .fold(0.0, f64::max)
}

impl RewardModel {
    pub fn tabular(n_sa: usize) -> Self {
        Self {
            kind: RewardKind::Tabular,
            n_sa,
            c_rx: 1.0,
            c_r: None,
        }
    }

    pub fn linear(features: DMatrix<f64>) -> Self {
        let c_rx = max_row_norm(&features);
        Self {
            n_sa: features.nrows(),
            kind: RewardKind::Linear(features),
            c_rx,
            c_r: None,
        }
    }

    /// Declares `C_rx` (must dominate every Jacobian row norm) and optionally `C_r`.
    pub fn with_bounds(mut self, c_rx: Option<f64>, c_r: Option<f64>) -> Result<Self> {
        if let Some(c) = c_rx {
            let actual = max_row_norm(&self.jacobian());
            if !(c >= actual - 1e-12) {
                return Err(Error::Config(format!(
                    "declared C_rx = {c} is below the Jacobian row norm {actual}"
                )));
            }
            self.c_rx = c;
        }
        if let Some(c) = c_r {
            if !(c >= 0.0) {
                return Err(Error::Config(format!(
                    "declared C_r = {c} must be non-negative"
                )));
            }
        }
        self.c_r = c_r;
        Ok(self)
    }

    pub fn kind(&self) -> &RewardKind {
        &self.kind
    }
    pub fn n_sa(&self) -> usize {
        self.n_sa
    }
    pub fn n_params(&self) -> usize {
        match &self.kind {
            RewardKind::Tabular => self.n_sa,
            RewardKind::Linear(phi) => phi.ncols(),
        }
    }
    pub fn c_rx(&self) -> f64 {
        self.c_rx
    }
    pub fn c_r(&self) -> Option<f64> {
        self.c_r
    }
    /// Both kinds have constant Jacobians.
    pub fn l_r(&self) -> f64 {
        0.0
    }

    pub fn jacobian(&self) -> DMatrix<f64> {
        match &self.kind {
            RewardKind::Tabular => DMatrix::identity(self.n_sa, self.n_sa),
            RewardKind::Linear(phi) => phi.clone(),
        }
    }

    pub fn reward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "parameter has length {}, reward model expects {}",
                x.len(),
                self.n_params()
            )));
        }
        let r = match &self.kind {
            RewardKind::Tabular => x.clone(),
            RewardKind::Linear(phi) => phi * x,
        };
        if let Some(bound) = self.c_r {
            let value = r.amax();
            if value > bound {
                return Err(Error::RewardBound { value, bound });
            }
        }
        Ok(r)
    }
}

pub fn reward_eval_and_jacobian(
    rm: &RewardModel,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((rm.reward(x)?, rm.jacobian()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardKindSpec {
    Tabular,
    Linear { features: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RewardSpec {
    #[serde(flatten)]
    pub kind: RewardKindSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_rx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_r: Option<f64>,
}

impl RewardSpec {
    pub fn build(&self, n_sa: usize) -> Result<RewardModel> {
        let rm = match &self.kind {
            RewardKindSpec::Tabular => RewardModel::tabular(n_sa),
            RewardKindSpec::Linear { features } => {
                if features.len() != n_sa {
                    return Err(Error::Dimension(format!(
                        "feature matrix has {} rows, expected {n_sa}",
                        features.len()
                    )));
                }
                let n = features.first().map_or(0, |r| r.len());
                if n == 0 || features.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension(
                        "feature rows must share a positive length".into(),
                    ));
                }
                RewardModel::linear(DMatrix::from_fn(n_sa, n, |i, j| features[i][j]))
            }
        };
        rm.with_bounds(self.c_rx, self.c_r)
    }
}
