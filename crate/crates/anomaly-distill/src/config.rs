//! Pipeline configuration: one nested key/value document (TOML) mirroring
//! every training, architecture and ablation knob. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::distill::DiscriminatorConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Square input extent; must be divisible by 4.
    pub input_extent: usize,
    pub channels: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the adversarial term in the student total loss.
    pub lambda_adv: f64,
    pub dropout_p: f64,
    pub leaky_slope: f64,
    /// Gaussian smoothing width (pixels at input resolution) for scoring.
    pub smoothing_sigma: f64,
    pub discriminator_enabled: bool,
    /// Convolution-refined map fusion; when off, raw upsampled maps are
    /// summed and no calibration pass runs.
    pub mff_enabled: bool,
    pub disc_width_factor: f64,
    /// Multiplier on the learning rate of the discriminator's optimizer.
    pub disc_lr_factor: f64,
    /// Pre-train the teacher on rotation prediction before freezing it.
    pub teacher_pretext: bool,
    pub pretext_epochs: usize,
    pub data_dir: Option<String>,
    pub backbone: BackboneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            input_extent: 64,
            channels: 1,
            batch_size: 8,
            epochs: 40,
            learning_rate: 1e-3,
            lambda_adv: 0.1,
            dropout_p: 0.3,
            leaky_slope: 0.2,
            smoothing_sigma: 4.0,
            discriminator_enabled: true,
            mff_enabled: true,
            disc_width_factor: 0.125,
            disc_lr_factor: 1.0,
            teacher_pretext: false,
            pretext_epochs: 3,
            data_dir: None,
            backbone: BackboneConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.input_extent == 0 || self.input_extent % 4 != 0 {
            return bad(format!(
                "input_extent must be positive and divisible by 4, got {}",
                self.input_extent
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.channels != self.backbone.in_channels {
            return bad(format!(
                "channels {} disagrees with backbone.in_channels {}",
                self.channels, self.backbone.in_channels
            ));
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive".into());
        }
        if self.lambda_adv < 0.0 {
            return bad("lambda_adv must be nonnegative".into());
        }
        if self.disc_lr_factor <= 0.0 {
            return bad("disc_lr_factor must be positive".into());
        }
        if self.smoothing_sigma <= 0.0 {
            return bad("smoothing_sigma must be positive".into());
        }
        self.backbone
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.discriminator_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Discriminator architecture implied by this pipeline config: it reads
    /// the deepest (stage 4) raw feature maps.
    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: self.backbone.widths[3],
            spatial: self.input_extent / 4,
            width_factor: self.disc_width_factor,
            dropout_p: self.dropout_p,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // Serialization is stable.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = PipelineConfig::from_toml("bogus_key = 3").unwrap_err();
        assert!(format!("{err}").contains("bogus_key"));
        let nested = "[backbone]\nnot_a_field = 1";
        assert!(PipelineConfig::from_toml(nested).is_err());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 3\nepochs = 2").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.batch_size, PipelineConfig::default().batch_size);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for text in [
            "batch_size = 0",
            "epochs = 0",
            "input_extent = 30",
            "learning_rate = 0.0",
            "lambda_adv = -0.5",
            "smoothing_sigma = 0.0",
            "channels = 2",
            "dropout_p = 1.0",
        ] {
            assert!(PipelineConfig::from_toml(text).is_err(), "{text} accepted");
        }
    }

    #[test]
    fn discriminator_config_follows_backbone() {
        let cfg = PipelineConfig::default();
        let d = cfg.discriminator_config();
        assert_eq!(d.in_channels, 128);
        assert_eq!(d.spatial, 16);
        assert_eq!(d.widths(), [16, 32, 64, 128]);
    }
}
