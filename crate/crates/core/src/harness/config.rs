use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::mdp::{MdpSpec, TabularMdp, TauRule};
use crate::objectives::{ObjectiveKind, UpperMdp, UpperObjective};
use crate::reward::{RewardModel, RewardSpec};
use crate::solvers::SolverConfig;

/// A section given inline or as `{"path": "..."}` relative to the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    File { path: PathBuf },
    Inline(T),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpperMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau: f64,
    pub rho: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    #[serde(default)]
    pub normalize: bool,
    /// Reference reward over `(s,a)`, s-major.
    pub reward: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: Source<MdpSpec>,
    pub upper_mdp: Source<UpperMdpSpec>,
    pub reward_model: RewardSpec,
    pub objective: ObjectiveKind,
    pub solver: SolverConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides `solver.seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub diagnostics: bool,
    /// Fill the `wall_ms` column; off by default so metrics are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// A loaded, validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub mdp: TabularMdp,
    pub rm: RewardModel,
    pub obj: UpperObjective,
    pub solver: SolverConfig,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub diagnostics: bool,
    pub record_wall_time: bool,
    /// SHA-256 of the config file bytes.
    pub config_hash: String,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::schema(format!("cannot read {}: {e}", path.display())))
}

fn resolve<T: DeserializeOwned + Clone>(src: &Source<T>, base: &Path) -> Result<T, CliError> {
    match src {
        Source::Inline(t) => Ok(t.clone()),
        Source::File { path } => {
            let full = base.join(path);
            serde_json::from_str(&read(&full)?)
                .map_err(|e| CliError::schema(format!("{}: {e}", full.display())))
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn load_experiment(path: &Path) -> Result<Experiment, CliError> {
    let text = read(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    build_experiment(&cfg, base, hex_digest(text.as_bytes()))
}

pub fn build_experiment(
    cfg: &ExperimentConfig,
    base: &Path,
    config_hash: String,
) -> Result<Experiment, CliError> {
    let mdp = resolve(&cfg.mdp, base)?
        .build(TauRule::Positive)
        .map_err(|e| CliError::from_model("mdp", e))?;
    let up = resolve(&cfg.upper_mdp, base)?;
    let upper_raw = MdpSpec {
        n_states: up.n_states,
        n_actions: up.n_actions,
        gamma: up.gamma,
        tau: up.tau,
        rho: up.rho.clone(),
        transitions: up.transitions.clone(),
        normalize: up.normalize,
    }
    .build(TauRule::NonNegative)
    .map_err(|e| CliError::from_model("upper_mdp", e))?;
    if !mdp.same_spaces(&upper_raw) {
        return Err(CliError::schema(format!(
            "upper_mdp is {}x{} but mdp is {}x{}; state and action spaces must match",
            upper_raw.n_states(),
            upper_raw.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let upper = UpperMdp::new(upper_raw, DVector::from_vec(up.reward.clone()))
        .map_err(|e| CliError::from_model("upper_mdp", e))?;
    let rm = cfg
        .reward_model
        .build(mdp.n_sa())
        .map_err(|e| CliError::from_model("reward_model", e))?;
    cfg.solver
        .validate()
        .map_err(|e| CliError::from_model("solver", e))?;
    cfg.solver
        .initial_x(rm.n_params())
        .map_err(|e| CliError::from_model("solver", e))?;
    if let ObjectiveKind::Preference(p) = &cfg.objective {
        if p.horizon == 0 {
            return Err(CliError::schema("objective: horizon must be at least 1"));
        }
    }
    Ok(Experiment {
        mdp,
        rm,
        obj: UpperObjective {
            upper,
            kind: cfg.objective.clone(),
        },
        solver: cfg.solver.clone(),
        output_dir: cfg.output_dir.clone(),
        seed: cfg.seed,
        diagnostics: cfg.diagnostics,
        record_wall_time: cfg.record_wall_time,
        config_hash,
    })
}
