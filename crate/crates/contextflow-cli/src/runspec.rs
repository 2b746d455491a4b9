//! Run configuration: JSON config files with command-line flag overrides
//! (flags win), plus the ablation grid description.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use contextflow::error::{Error, Result};
use contextflow::sampler::IntegrationConfig;
use contextflow::trainer::{CouplingMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Ivp,
    NextStep,
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ivp" => Ok(Self::Ivp),
            "next-step" | "next_step" => Ok(Self::NextStep),
            _ => Err(Error::InvalidParameter {
                name: "sampling mode",
                message: "expected ivp or next-step",
                value: f64::NAN,
            }),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ivp => "ivp",
            Self::NextStep => "next-step",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    W2,
    WeightedW2,
    Mmd,
    Energy,
    Kl,
}

impl FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2" => Ok(Self::W2),
            "weighted-w2" | "weighted_w2" => Ok(Self::WeightedW2),
            "mmd" => Ok(Self::Mmd),
            "energy" => Ok(Self::Energy),
            "kl" => Ok(Self::Kl),
            _ => Err(Error::InvalidParameter {
                name: "metric",
                message: "expected w2, weighted-w2, mmd, energy, or kl",
                value: f64::NAN,
            }),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::W2 => "w2",
            Self::WeightedW2 => "weighted_w2",
            Self::Mmd => "mmd",
            Self::Energy => "energy",
            Self::Kl => "kl",
        })
    }
}

/// Grid swept by the ablate command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateGrid {
    pub modes: Vec<CouplingMode>,
    #[serde(default = "default_grid_unit")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_grid_unit")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn default_grid_unit() -> Vec<f64> {
    vec![1.0]
}

/// Full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub integration: IntegrationConfig,
    pub sampling_mode: SamplingMode,
    pub target_index: usize,
    pub metrics: Vec<MetricKind>,
    pub ablate: Option<AblateGrid>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            integration: IntegrationConfig::default(),
            sampling_mode: SamplingMode::NextStep,
            target_index: 1,
            metrics: vec![MetricKind::W2, MetricKind::Mmd, MetricKind::Energy],
            ablate: None,
        }
    }
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            line: 0,
            message: format!("cannot read config: {e}"),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            line: e.line(),
            message: format!("config parse error: {e}"),
        })
    }
}

/// Flag-level overrides shared by train-like subcommands; flags win over the
/// config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// Coupling mode: random, eot, pacm, or paer.
    #[arg(long)]
    pub mode: Option<String>,
    /// Spatial-smoothness vs ligand-receptor trade-off in [0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Cost vs prior trade-off for the blended-cost mode, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Entropy regularization strength.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Conditional path noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Neighborhood radius (defaults to 5% of each slice's bounding-box diagonal).
    #[arg(long)]
    pub radius: Option<f64>,
    /// Comma-separated slice indices excluded from training.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(mode) = &self.mode {
            cfg.coupling_mode = mode.parse()?;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.radius {
            cfg.radius = Some(v);
        }
        if let Some(v) = &self.holdout {
            cfg.holdout = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()
    }
}
