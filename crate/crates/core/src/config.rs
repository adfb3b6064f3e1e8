//! Run configuration. Every struct rejects unknown keys so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PmpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Pmp,
    GnnMean,
    GnnAttention,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Pmp, Baseline::GnnMean, Baseline::GnnAttention];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Pmp => "pmp",
            Baseline::GnnMean => "gnn-mean",
            Baseline::GnnAttention => "gnn-attention",
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = PmpError;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| PmpError::Config(format!("unknown baseline {s:?}")))
    }
}

/// Which task the run is for, with its generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    Whereami {
        #[serde(default = "default_grid")]
        grid: usize,
        #[serde(default = "default_objects")]
        objects: usize,
        #[serde(default = "default_glyphs")]
        glyphs: usize,
    },
    Puzzle {
        #[serde(default = "default_d")]
        d: usize,
        #[serde(default = "default_image")]
        image: usize,
    },
    Community {
        #[serde(default = "default_nodes")]
        nodes: usize,
        #[serde(default = "default_communities")]
        communities: usize,
        #[serde(default)]
        noise_ratio: f64,
    },
    Cora {
        #[serde(default)]
        noise_ratio: f64,
    },
}

fn default_grid() -> usize {
    6
}
fn default_objects() -> usize {
    9
}
fn default_glyphs() -> usize {
    4
}
fn default_d() -> usize {
    3
}
fn default_image() -> usize {
    48
}
fn default_nodes() -> usize {
    400
}
fn default_communities() -> usize {
    4
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Whereami { .. } => "whereami",
            TaskSpec::Puzzle { .. } => "puzzle",
            TaskSpec::Community { .. } => "community",
            TaskSpec::Cora { .. } => "cora",
        }
    }

    /// Inference steps used when the model config leaves them unset.
    pub fn default_steps(&self) -> usize {
        match self {
            TaskSpec::Whereami { objects, .. } if *objects > 25 => 8,
            TaskSpec::Whereami { .. } => 7,
            TaskSpec::Puzzle { d, .. } => d + 2,
            TaskSpec::Community { .. } | TaskSpec::Cora { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub node_dim: usize,
    pub message_dim: usize,
    pub hidden: usize,
    pub k: usize,
    pub steps: Option<usize>,
    pub beta: f64,
    pub temperature: f64,
    pub samples: usize,
    pub target_embed_dim: usize,
    pub decoder_hidden: usize,
    pub policy_hidden: usize,
    pub gate_hidden: usize,
    pub dense_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            node_dim: 50,
            message_dim: 50,
            hidden: 32,
            k: 4,
            steps: None,
            beta: 1.0,
            temperature: 1.0,
            samples: 5,
            target_embed_dim: 16,
            decoder_hidden: 50,
            policy_hidden: 50,
            gate_hidden: 50,
            dense_supervision: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    /// Fraction of instances held out for validation when the dataset has
    /// more than one instance.
    pub val_fraction: f64,
    /// Write real timings to the `wall_ms` column instead of zeros.
    pub record_wall_time: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            seed: 0,
            patience: 20,
            val_fraction: 0.1,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedSamplingConfig {
    pub enabled: bool,
    /// Largest prior prefix; `None` means `⌊T/2⌋`.
    pub max_t_switch: Option<usize>,
}

impl Default for MixedSamplingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_t_switch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    #[serde(default = "default_baseline")]
    pub baseline: Baseline,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub mixed_sampling: MixedSamplingConfig,
}

fn default_baseline() -> Baseline {
    Baseline::Pmp
}

impl RunConfig {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task,
            baseline: Baseline::Pmp,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            mixed_sampling: MixedSamplingConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| PmpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PmpError::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            PmpError::Config(msg) => PmpError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn steps(&self) -> usize {
        self.model
            .steps
            .unwrap_or_else(|| self.task.default_steps())
    }

    pub fn max_t_switch(&self) -> usize {
        if !self.mixed_sampling.enabled {
            return 0;
        }
        let steps = self.steps();
        self.mixed_sampling
            .max_t_switch
            .unwrap_or(steps / 2)
            .min(steps)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.node_dim", m.node_dim),
            ("model.message_dim", m.message_dim),
            ("model.hidden", m.hidden),
            ("model.k", m.k),
            ("model.samples", m.samples),
            ("model.target_embed_dim", m.target_embed_dim),
            ("model.decoder_hidden", m.decoder_hidden),
            ("model.policy_hidden", m.policy_hidden),
            ("model.gate_hidden", m.gate_hidden),
            ("model.steps", self.steps()),
            ("schedule.epochs", self.schedule.epochs),
            ("schedule.batch_size", self.schedule.batch_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(PmpError::Config(format!("{name} must be positive")));
            }
        }
        let o = &self.optimizer;
        let checks = [
            ("model.beta", m.beta >= 0.0),
            ("model.temperature", m.temperature > 0.0),
            ("optimizer.lr", o.lr > 0.0),
            ("optimizer.beta1", (0.0..1.0).contains(&o.beta1)),
            ("optimizer.beta2", (0.0..1.0).contains(&o.beta2)),
            ("optimizer.eps", o.eps > 0.0),
            ("optimizer.clip_norm", o.clip_norm > 0.0),
            (
                "schedule.val_fraction",
                (0.0..1.0).contains(&self.schedule.val_fraction),
            ),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(PmpError::Config(format!("{name} out of range")));
            }
        }
        match self.task {
            TaskSpec::Whereami {
                grid,
                objects,
                glyphs,
            } if grid == 0 || objects == 0 || objects > grid * grid || glyphs < 2 => Err(
                PmpError::Config("whereami needs 1 ≤ objects ≤ grid² and glyphs ≥ 2".into()),
            ),
            TaskSpec::Puzzle { d, image } if d < 2 || image % d != 0 => Err(PmpError::Config(
                "puzzle needs d ≥ 2 and image divisible by d".into(),
            )),
            TaskSpec::Community { noise_ratio, .. } | TaskSpec::Cora { noise_ratio }
                if !(noise_ratio >= 0.0) =>
            {
                Err(PmpError::Config("noise_ratio must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }
}
