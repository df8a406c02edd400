//! Run configuration: one TOML document whose sections mirror the module
//! configs (`cdn.lambda_p`, `decoder.layers`, ...).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::matchloss::{LossConfig, LossWeights};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::queryselect::{ContrastiveConfig, Preset, PrototypeConfig};
use crate::segbranch::SegConfig;
use crate::synthdoc::SynthConfig;
use crate::transformer::{CdnConfig, DecoderConfig, EncoderConfig, TransformerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Train,
    FinetuneDomainShift,
    Eval,
    Predict,
    Gradcheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub preset: Preset,
    /// Dataset directory; when absent, `synth_n` pages are generated in memory.
    pub path: Option<PathBuf>,
    pub synth_n: usize,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Publaynet,
            path: None,
            synth_n: 10,
            synth_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Output directory for checkpoints and the metrics log.
    pub out_dir: PathBuf,
    pub log_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// 0 disables periodic evaluation on the training set.
    pub eval_every: usize,
    /// Stop once mask and box AP@0.5 reach this value and the loss ratio
    /// falls below `stop_loss_ratio`; 0 disables early stopping.
    pub stop_ap: f64,
    pub stop_loss_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 2,
            seed: 0,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
            log_every: 1,
            checkpoint_every: 500,
            eval_every: 0,
            stop_ap: 0.0,
            stop_loss_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum confidence of exported or scored instances.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_threshold: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub probes: usize,
    pub eps: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            probes: 12,
            eps: 1e-5,
            seed: 0,
            image_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub cdn: CdnConfig,
    pub segmentation: SegConfig,
    pub contrastive: ContrastiveConfig,
    pub prototypes: PrototypeConfig,
    pub loss: LossConfig,
    pub optimizer: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model().validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if t.log_every == 0 {
            return Err(Error::Config("train.log_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&t.stop_ap) || !(t.stop_loss_ratio > 0.0) {
            return Err(Error::Config("train.stop_ap must lie in [0, 1] and train.stop_loss_ratio be positive".into()));
        }
        if self.data.path.is_none() && self.data.synth_n == 0 {
            return Err(Error::Config("data.path is unset and data.synth_n is 0".into()));
        }
        if !(self.gradcheck.eps > 0.0) || self.gradcheck.probes == 0 {
            return Err(Error::Config("gradcheck needs eps > 0 and at least one probe".into()));
        }
        if self.gradcheck.image_size == 0 || !self.gradcheck.image_size.is_multiple_of(32) {
            return Err(Error::Config("gradcheck.image_size must be a positive multiple of 32".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.synth.num_classes,
            backbone: self.backbone.clone(),
            transformer: self.transformer.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            cdn: self.cdn.clone(),
            segmentation: self.segmentation.clone(),
            contrastive: self.contrastive.clone(),
            prototypes: self.prototypes.clone(),
        }
    }

    /// Contrastive temperature: explicit `contrastive.tau`, else the preset's.
    pub fn tau(&self) -> f64 {
        self.contrastive.tau_for(self.data.preset)
    }

    pub fn loss_weights(&self, w_mask_eff: f64) -> LossWeights {
        LossWeights {
            w_cls: self.loss.w_cls,
            w_l1: self.loss.w_l1,
            w_mask_eff,
            w_low: self.contrastive.w_low,
            w_high: self.contrastive.w_high,
            alpha: self.loss.focal_alpha,
            gamma: self.loss.focal_gamma,
        }
    }
}
