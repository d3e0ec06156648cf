//! Run configuration: a TOML file with nested sections mirroring the config
//! struct field names. Missing fields take defaults, unknown keys are
//! rejected, and every constraint violation names its field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environment::{EnvParams, ObservationConfig, SceneSpec};
use crate::error::{Error, Result};
use crate::learner::TrainConfig;
use crate::qnet::{HeadMode, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Joint,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Single => write!(f, "single"),
            Mode::Joint => write!(f, "joint"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "joint" => Ok(Mode::Joint),
            other => Err(Error::InvalidArgument(format!(
                "mode must be `single` or `joint`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_dim: usize,
    pub head_mode: HeadMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_dim: 64,
            head_mode: HeadMode::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub iou_threshold: f64,
    /// Greedy episodes dumped into the trajectory CSV.
    pub trajectory_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 500,
            iou_threshold: 0.5,
            trajectory_episodes: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub rng_seed: u64,
    pub out_dir: Option<PathBuf>,
    pub scene: SceneSpec,
    pub observation: ObservationConfig,
    pub env: EnvParams,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Joint,
            rng_seed: 0,
            out_dir: None,
            scene: SceneSpec::default(),
            observation: ObservationConfig::default(),
            env: EnvParams::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.observation.validate()?;
        self.env.validate()?;
        self.train.validate()?;
        if self.network.hidden_dim == 0 {
            return Err(Error::Config {
                field: "network.hidden_dim".into(),
                reason: "must be ≥ 1".into(),
            });
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold < 1.0) {
            return Err(Error::Config {
                field: "eval.iou_threshold".into(),
                reason: format!("must lie in (0,1), got {}", self.eval.iou_threshold),
            });
        }
        if self.mode == Mode::Joint && self.scene.num_classes < 2 {
            return Err(Error::Config {
                field: "mode".into(),
                reason: "joint mode needs at least two scene classes".into(),
            });
        }
        Ok(())
    }

    /// The model layout this configuration trains.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_agents: self.scene.num_classes,
            input_dim: self.observation.state_len(),
            hidden_dim: self.network.hidden_dim,
            head_mode: self.network.head_mode,
            with_channels: self.mode == Mode::Joint,
        }
    }

    /// Master seed for a run; the scene spec's own seed offset is folded in.
    pub fn master_seed(&self) -> u64 {
        self.rng_seed ^ self.scene.rng_seed.rotate_left(17)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }
}

/// Parses, validates, and default-fills a config file. An empty file yields
/// all defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.mode, Mode::Joint);
        assert_eq!(cfg.train.gamma, 0.9);
        assert_eq!(cfg.scene.num_classes, 2);
        assert_eq!(cfg.network.hidden_dim, 64);
        assert_eq!(cfg.eval.episodes, 500);
    }

    #[test]
    fn constraint_violation_names_the_field() {
        let err = parse_config("[train]\ngamma = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("[train]\nlearning_rato = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rato"), "{err}");
        assert!(parse_config("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn echo_round_trip_is_stable() {
        let cfg = parse_config("[scene]\nnum_distractors = 7\n\n[train]\nepisodes = 123\n").unwrap();
        let echoed = cfg.to_toml_string().unwrap();
        let reparsed = parse_config(&echoed).unwrap();
        assert_eq!(reparsed.scene.num_distractors, 7);
        assert_eq!(reparsed.train.episodes, 123);
        let echoed_again = reparsed.to_toml_string().unwrap();
        assert_eq!(echoed, echoed_again);
    }

    #[test]
    fn joint_mode_needs_two_classes() {
        let err = parse_config(
            "mode = \"joint\"\n[scene]\nnum_classes = 1\nsize_range = [[0.12, 0.3]]\nclass_intensities = [0.9]\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("joint"), "{err}");
    }
}
