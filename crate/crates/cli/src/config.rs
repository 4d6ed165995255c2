//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cso_core::diagnostics::LyapunovParams;
use cso_core::linear_mdp::{GeneratorOptions, MdpInstance};
use cso_core::uplift::{UpliftInstance, DEFAULT_NOISE_STD};
use cso_core::{linear_mdp, SolverConfig};

pub const DEFAULT_TEST_SIZE: usize = 1000;
pub const DEFAULT_DIAGNOSTIC_CADENCE: u64 = 50;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;
pub const DEFAULT_REWARD_SCALE: f64 = 8.0;
pub const DEFAULT_FEATURE_DIM: usize = 10;

/// Where the problem instance comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSource {
    /// A linear MDP instance file; relative paths resolve against the
    /// config file's directory.
    MdpFile {
        path: PathBuf,
    },
    UpliftFile {
        path: PathBuf,
    },
    GenerateMdp {
        states: usize,
        actions: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        seed: u64,
        #[serde(default = "default_reward_scale")]
        reward_scale: f64,
        #[serde(default)]
        options: GeneratorOptions,
    },
    GenerateUplift {
        n_x: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
        seed: u64,
    },
}

fn default_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

fn default_reward_scale() -> f64 {
    DEFAULT_REWARD_SCALE
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_STD
}

fn default_test_size() -> usize {
    DEFAULT_TEST_SIZE
}

fn default_diagnostic_cadence() -> u64 {
    DEFAULT_DIAGNOSTIC_CADENCE
}

fn default_huber() -> f64 {
    DEFAULT_HUBER_DELTA
}

/// A loaded instance of either built-in family.
#[derive(Clone, Debug)]
pub enum Instance {
    Mdp(MdpInstance),
    Uplift(UpliftInstance),
}

impl ProblemSource {
    pub fn load(&self, base: &Path) -> Result<Instance> {
        Ok(match self {
            ProblemSource::MdpFile { path } => {
                let path = base.join(path);
                Instance::Mdp(
                    MdpInstance::read(&path)
                        .with_context(|| format!("loading MDP instance {}", path.display()))?,
                )
            }
            ProblemSource::UpliftFile { path } => {
                let path = base.join(path);
                Instance::Uplift(
                    UpliftInstance::read(&path)
                        .with_context(|| format!("loading uplift instance {}", path.display()))?,
                )
            }
            ProblemSource::GenerateMdp {
                states,
                actions,
                dim,
                seed,
                reward_scale,
                options,
            } => Instance::Mdp(linear_mdp::generate_linear_mdp_with(
                *states,
                *actions,
                *dim,
                *seed,
                *reward_scale,
                options,
            )?),
            ProblemSource::GenerateUplift {
                n_x,
                noise_std,
                seed,
            } => Instance::Uplift(UpliftInstance::generate(*n_x, *noise_std, *seed)?),
        })
    }

    /// The same source with every generator seed shifted by `offset`.
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            ProblemSource::GenerateMdp { seed, .. }
            | ProblemSource::GenerateUplift { seed, .. } => *seed = seed.wrapping_add(offset),
            ProblemSource::MdpFile { .. } | ProblemSource::UpliftFile { .. } => {}
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSource,
    #[serde(default = "default_huber")]
    pub huber_delta: f64,
    pub solver: SolverConfig,
    /// Size of the held-out set; 0 disables test metrics.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Defaults to the solver's metrics cadence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_cadence: Option<u64>,
    #[serde(default = "default_diagnostic_cadence")]
    pub diagnostic_cadence: u64,
    /// `(α, λ)` of the logged Lyapunov function; defaults are derived from
    /// the problem constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_trace: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_report: Option<PathBuf>,
}

impl RunConfig {
    /// Generated MDP at the reference scale: 100 states, 50 actions,
    /// `γ = 100`, 5000 iterations and 1000 held-out samples.
    pub fn reference_mdp(seed: u64) -> Self {
        RunConfig {
            problem: ProblemSource::GenerateMdp {
                states: 100,
                actions: 50,
                dim: DEFAULT_FEATURE_DIM,
                seed,
                reward_scale: DEFAULT_REWARD_SCALE,
                options: GeneratorOptions::default(),
            },
            huber_delta: DEFAULT_HUBER_DELTA,
            solver: SolverConfig::reference(seed),
            test_size: DEFAULT_TEST_SIZE,
            test_cadence: None,
            diagnostic_cadence: DEFAULT_DIAGNOSTIC_CADENCE,
            lyapunov: None,
            out_trace: None,
            out_report: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            bail!("huber_delta must be positive, got {}", self.huber_delta);
        }
        if self.test_cadence == Some(0) {
            bail!("test_cadence must be at least 1");
        }
        if self.diagnostic_cadence == 0 {
            bail!("diagnostic_cadence must be at least 1");
        }
        if let Some(p) = self.lyapunov {
            if !(p.alpha > 0.0 && p.alpha < 1.0) || !(p.lambda.is_finite() && p.lambda > 0.0) {
                bail!(
                    "lyapunov needs alpha in (0, 1) and lambda > 0, got {} and {}",
                    p.alpha,
                    p.lambda
                );
            }
        }
        Ok(())
    }

    pub fn effective_test_cadence(&self) -> u64 {
        self.test_cadence
            .unwrap_or_else(|| self.solver.effective_metrics_cadence())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_round_trips() {
        let config = RunConfig::reference_mdp(3);
        let text = serde_json::to_string_pretty(&config).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), config);
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let text = r#"{
            "problem": {"kind": "generate_uplift", "n_x": 5, "seed": 1},
            "solver": {
                "tracking_gain": 100.0, "beta_radius": 10.0, "theta_radius": 1000.0,
                "schedule": {"family": "rational_decay", "a": 1.0, "b": 1000.0, "p": 1.0},
                "iterations": 10, "seed": 0
            }
        }"#;
        let config = RunConfig::from_json(text).unwrap();
        assert_eq!(config.test_size, DEFAULT_TEST_SIZE);
        assert_eq!(config.diagnostic_cadence, DEFAULT_DIAGNOSTIC_CADENCE);
        assert_eq!(config.effective_test_cadence(), 1);
        assert!(config.lyapunov.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(RunConfig::reference_mdp(0)).unwrap();
        value["surprise"] = serde_json::json!(1);
        assert!(RunConfig::from_json(&value.to_string()).is_err());
        let mut value = serde_json::to_value(RunConfig::reference_mdp(0)).unwrap();
        value["problem"]["colour"] = serde_json::json!("red");
        assert!(RunConfig::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut config = RunConfig::reference_mdp(0);
        config.diagnostic_cadence = 0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::reference_mdp(0);
        config.huber_delta = -1.0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::reference_mdp(0);
        config.lyapunov = Some(LyapunovParams {
            alpha: 1.5,
            lambda: 1.0,
        });
        assert!(config.validate().is_err());
    }

    #[test]
    fn seed_offset_moves_generator_seeds_only() {
        let source = ProblemSource::GenerateUplift {
            n_x: 3,
            noise_std: 0.5,
            seed: 7,
        };
        assert_eq!(
            source.with_seed_offset(2),
            ProblemSource::GenerateUplift {
                n_x: 3,
                noise_std: 0.5,
                seed: 9
            }
        );
        let file = ProblemSource::MdpFile {
            path: "x.json".into(),
        };
        assert_eq!(file.with_seed_offset(2), file);
    }
}
