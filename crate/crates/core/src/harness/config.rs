use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec};
use crate::defenses::DefenseSpec;
use crate::error::{Error, Result};
use crate::tasks::{TrainArgs, DEFAULT_SEPARATION};

/// Where training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_feature_dim")]
        feature_dim: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        num_classes: usize,
    },
}

fn default_classes() -> usize {
    2
}
fn default_feature_dim() -> usize {
    100
}
fn default_train_per_class() -> usize {
    1500
}
fn default_test_per_class() -> usize {
    1000
}
fn default_separation() -> f64 {
    DEFAULT_SEPARATION
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Synthetic {
            num_classes: default_classes(),
            feature_dim: default_feature_dim(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            separation: default_separation(),
        }
    }
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            TaskSpec::Synthetic { num_classes, .. } | TaskSpec::Csv { num_classes, .. } => *num_classes,
        }
    }
}

/// Client data split. `noniid_q = None` is IID.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub noniid_q: Option<f64>,
    pub size_multipliers: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width for a one-hidden-layer MLP; `None` is logistic regression.
    pub hidden: Option<usize>,
}

/// When the server idles a round to probe clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectionSchedule {
    Consecutive { k: usize },
    Interspersed { prob: f64 },
    None,
}

impl Default for DetectionSchedule {
    fn default() -> Self {
        DetectionSchedule::Consecutive { k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_malicious_fraction")]
    pub malicious_fraction: f64,
    #[serde(default = "AttackSpec::none")]
    pub attack: AttackSpec,
    #[serde(default = "default_defense")]
    pub defense: DefenseSpec,
    /// Malicious count the defense assumes; defaults to the true count.
    #[serde(default)]
    pub assumed_c: Option<usize>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub train: TrainArgs,
    #[serde(default)]
    pub detection_schedule: DetectionSchedule,
    /// Clients sampled per round; `None` means everyone takes part.
    #[serde(default)]
    pub cross_device: Option<usize>,
    #[serde(default = "default_attack_start")]
    pub attack_start_round: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_clients() -> usize {
    30
}
fn default_malicious_fraction() -> f64 {
    0.2
}
fn default_defense() -> DefenseSpec {
    DefenseSpec::FedAvg
}
fn default_rounds() -> usize {
    200
}
fn default_attack_start() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            num_clients: default_clients(),
            malicious_fraction: default_malicious_fraction(),
            attack: AttackSpec::none(),
            defense: default_defense(),
            assumed_c: None,
            rounds: default_rounds(),
            train: TrainArgs::default(),
            detection_schedule: DetectionSchedule::default(),
            cross_device: None,
            attack_start_round: default_attack_start(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Number of attacker-controlled clients, `round(fraction · n)`.
    pub fn num_malicious(&self) -> usize {
        (self.malicious_fraction * self.num_clients as f64).round() as usize
    }

    /// Clients taking part in one round.
    pub fn participants_per_round(&self) -> usize {
        self.cross_device.unwrap_or(self.num_clients)
    }

    /// Malicious count the defense is told to expect among the round's
    /// participants. Under sampling the full-population figure is scaled
    /// by `m / n` and rounded up.
    pub fn assumed_c_per_round(&self) -> usize {
        let c = self.assumed_c.unwrap_or_else(|| self.num_malicious());
        match self.cross_device {
            Some(m) => (c * m).div_ceil(self.num_clients.max(1)),
            None => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_clients == 0 {
            return bad("num_clients must be positive".into());
        }
        if !(0.0..0.5).contains(&self.malicious_fraction) {
            return bad(format!(
                "malicious_fraction must lie in [0, 0.5), got {}",
                self.malicious_fraction
            ));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad("train.lr must be positive".into());
        }
        if let Some(m) = self.cross_device {
            if m == 0 || m > self.num_clients {
                return bad(format!("cross_device sample {m} outside 1..={}", self.num_clients));
            }
        }
        match self.detection_schedule {
            DetectionSchedule::Interspersed { prob } if !(0.0..=1.0).contains(&prob) => {
                return bad(format!("detection probability {prob} outside [0, 1]"));
            }
            _ => {}
        }
        if let TaskSpec::Synthetic {
            num_classes,
            feature_dim,
            train_per_class,
            test_per_class,
            separation,
        } = &self.task
        {
            if *num_classes < 2 || *feature_dim == 0 || *train_per_class == 0 || *test_per_class == 0 {
                return bad("synthetic task needs >= 2 classes and positive sizes".into());
            }
            if !(*separation > 0.0 && separation.is_finite()) {
                return bad("synthetic separation must be positive".into());
            }
        }
        if self.model.hidden == Some(0) {
            return bad("model.hidden must be positive".into());
        }
        if let AttackKind::ScalingBackdoor(b) = &self.attack.kind {
            if b.target >= self.task.num_classes() {
                return bad(format!("backdoor target {} out of range", b.target));
            }
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.attack.kind.validate().map_err(wrap)?;
        self.defense
            .validate(self.participants_per_round(), self.assumed_c_per_round())
            .map_err(wrap)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.num_malicious(), 6);
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"defense":{"type":"krum"},"seed":3}"#).unwrap();
        assert_eq!(cfg.rounds, 200);
        assert_eq!(cfg.detection_schedule, DetectionSchedule::Consecutive { k: 10 });
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"roundz":3}"#),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"malicious_fraction":0.5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"cross_device":0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"num_clients":5,"defense":{"type":"bulyan"}}"#).is_err());
    }

    #[test]
    fn sampled_assumed_c_scales() {
        let cfg = ExperimentConfig {
            num_clients: 100,
            cross_device: Some(10),
            ..Default::default()
        };
        assert_eq!(cfg.assumed_c_per_round(), 2);
    }
}
