use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::GbfConfig;
use crate::uae::{Augmentation, LossWeights, UaeConfig};
use crate::udm::{DitConfig, ScheduleKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Vae,
    Ldm,
}

/// Which scalar, if any, the denoiser is trained to condition on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    #[default]
    None,
    HeavyAtoms,
}

impl std::str::FromStr for ConditionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "heavy-atoms" => Ok(Self::HeavyAtoms),
            _ => Err(Error::InvalidArgument(format!("unknown condition '{s}'"))),
        }
    }
}

/// How the learning rate evolves over the planned optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl LrDecay {
    /// The rate for optimizer step `step` (0-based) out of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

/// Everything that determines a training run. Missing JSON fields take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Rescale the batch gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    pub loss: LossWeights,
    pub augmentation: Augmentation,
    pub trans_var: f64,
    pub model: UaeConfig,
    pub denoiser: DitConfig,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub cond_dropout: f64,
    pub guidance: f64,
    pub condition: ConditionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Vae,
            epochs: 50,
            batch_size: 4,
            learning_rate: 5e-4,
            lr_decay: LrDecay::Constant,
            seed: 0,
            max_steps: None,
            grad_clip: Some(1.0),
            loss: LossWeights::default(),
            augmentation: Augmentation::Both,
            trans_var: 0.01,
            model: UaeConfig::default(),
            denoiser: DitConfig::default(),
            schedule: ScheduleKind::Cosine,
            diffusion_steps: 1000,
            cond_dropout: 0.1,
            guidance: 0.0,
            condition: ConditionMode::None,
        }
    }
}

impl TrainConfig {
    /// Reduced widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            model: UaeConfig {
                hidden: 64,
                latent_dim: 16,
                encoder_layers: 3,
                decoder_layers: 3,
                heads: 4,
                ff_mult: 2,
                gbf: GbfConfig::default(),
            },
            denoiser: DitConfig {
                hidden: 64,
                layers: 4,
                heads: 4,
                ff_mult: 2,
                time_features: 32,
                cond_width: 64,
            },
            lr_decay: LrDecay::Cosine,
            ..Self::default()
        }
    }

    /// Desk settings for the latent stage: larger batches and a fixed
    /// step budget.
    pub fn desk_ldm() -> Self {
        Self {
            stage: Stage::Ldm,
            epochs: 1000,
            max_steps: Some(8000),
            batch_size: 64,
            learning_rate: 2e-3,
            augmentation: Augmentation::None,
            lr_decay: LrDecay::Constant,
            ..Self::desk()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidArgument("gradient clip must be positive".into()));
            }
        }
        if !(self.trans_var.is_finite() && self.trans_var >= 0.0) {
            return Err(Error::InvalidArgument("translation variance must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::InvalidArgument("condition dropout must lie in [0, 1]".into()));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::InvalidArgument("guidance weight must be >= 0".into()));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::InvalidArgument("diffusion needs at least 2 steps".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.denoiser.validate()
    }
}
