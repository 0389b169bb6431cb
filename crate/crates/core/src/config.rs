//! Experiment configuration: TOML with sections per module, scalar values
//! only, and unknown keys rejected outright.

use crate::error::{Error, Result};
use crate::kernel::KernelFamily;
use crate::model::{ChannelKernel, DecoderKind, EncoderKind, Model, ModelConfig};
use crate::spatial::SpatialKernelSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Clean,
    Corrupt,
    Missing,
    Spatiotemporal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub task: Task,
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_num_train")]
    pub num_train: usize,
    #[serde(default = "default_num_test")]
    pub num_test: usize,
    #[serde(default = "default_t_len")]
    pub t_len: usize,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_d_y")]
    pub d_y: usize,
    /// Spatiotemporal grids only.
    #[serde(default = "default_n_locations")]
    pub n_locations: usize,
}

fn default_num_train() -> usize {
    200
}
fn default_num_test() -> usize {
    20
}
fn default_t_len() -> usize {
    100
}
fn default_period() -> usize {
    50
}
fn default_d_y() -> usize {
    8
}
fn default_n_locations() -> usize {
    6
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_train: default_num_train(),
            num_test: default_num_test(),
            t_len: default_t_len(),
            period: default_period(),
            d_y: default_d_y(),
            n_locations: default_n_locations(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_channels: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "default_sigma2_y")]
    pub sigma2_y_init: f64,
}

fn default_encoder_hidden() -> usize {
    32
}
fn default_decoder_hidden() -> usize {
    16
}
fn default_sigma2_y() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub family: String,
    #[serde(default = "default_variance")]
    pub variance: f64,
    /// Omitted or non-positive: defaults to 10% of the training time span.
    #[serde(default)]
    pub lengthscale: f64,
    #[serde(default = "default_trainable")]
    pub trainable: bool,
}

fn default_variance() -> f64 {
    1.0
}
fn default_trainable() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpatialSection {
    pub family: String,
    pub lengthscale: f64,
    #[serde(default = "default_spatial_dims")]
    pub input_dims: usize,
}

fn default_spatial_dims() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_k_train")]
    pub k_train: usize,
    #[serde(default = "default_k_eval")]
    pub k_eval: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    40
}
fn default_k_train() -> usize {
    1
}
fn default_k_eval() -> usize {
    20
}
fn default_clip() -> f64 {
    100.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    pub model: ModelSection,
    pub kernel: KernelSection,
    #[serde(default)]
    pub spatial: Option<SpatialSection>,
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let raw = std::fs::read_to_string(path)?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(raw).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.latent_channels == 0 {
            return Err(Error::InvalidArgument("latent_channels must be positive".into()));
        }
        if !(self.model.sigma2_y_init > 0.0) {
            return Err(Error::InvalidArgument("sigma2_y_init must be positive".into()));
        }
        KernelFamily::parse(&self.kernel.family)?;
        if !(self.kernel.variance > 0.0) {
            return Err(Error::InvalidArgument("kernel variance must be positive".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        if self.train.batch_size == 0 || self.train.k_train == 0 || self.train.k_eval == 0 {
            return Err(Error::InvalidArgument("batch_size and sample counts must be positive".into()));
        }
        if !(self.train.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be non-negative".into()));
        }
        if !(self.train.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be positive".into()));
        }
        if let Some(sp) = &self.spatial {
            KernelFamily::parse(&sp.family)?;
            if !(sp.lengthscale > 0.0) || sp.input_dims == 0 {
                return Err(Error::InvalidArgument("invalid spatial kernel settings".into()));
            }
        }
        if self.run.task == Task::Spatiotemporal && self.spatial.is_none() {
            return Err(Error::InvalidArgument(
                "spatiotemporal task requires a [spatial] section".into(),
            ));
        }
        Ok(())
    }

    /// Builds the model for a given observation dimension and time span
    /// (the span feeds the default lengthscale of 10% of the span).
    pub fn build_model(&self, d_y: usize, time_span: f64) -> Result<Model> {
        let family = KernelFamily::parse(&self.kernel.family)?;
        let lengthscale = if self.kernel.lengthscale > 0.0 {
            self.kernel.lengthscale
        } else {
            (0.1 * time_span).max(1e-3)
        };
        let kernels = (0..self.model.latent_channels)
            .map(|_| ChannelKernel {
                family,
                variance: self.kernel.variance,
                lengthscale,
                trainable: self.kernel.trainable,
            })
            .collect();
        let spatial = match &self.spatial {
            Some(sp) => Some(SpatialKernelSpec::new(
                KernelFamily::parse(&sp.family)?,
                vec![sp.lengthscale; sp.input_dims],
            )?),
            None => None,
        };
        Model::new(ModelConfig {
            d_y,
            kernels,
            encoder: EncoderKind::Mlp {
                hidden: self.model.encoder_hidden,
            },
            decoder: DecoderKind::Mlp {
                hidden: self.model.decoder_hidden,
            },
            sigma2_y_init: self.model.sigma2_y_init,
            spatial,
        })
    }
}

pub const EXAMPLE_CONFIG: &str = r#"[run]
task = "missing"
seed = 7
threads = 1

[data]
num_train = 200
num_test = 20
t_len = 100
period = 50
d_y = 8

[model]
latent_channels = 3
encoder_hidden = 32
decoder_hidden = 16
sigma2_y_init = 1.0

[kernel]
family = "matern32"
variance = 1.0
lengthscale = 10.0
trainable = true

[train]
learning_rate = 1e-3
epochs = 30
batch_size = 20
k_train = 1
k_eval = 20
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_parses() {
        let cfg = ExperimentConfig::parse(EXAMPLE_CONFIG).unwrap();
        assert_eq!(cfg.run.task, Task::Missing);
        assert_eq!(cfg.model.latent_channels, 3);
        assert_eq!(cfg.train.k_eval, 20);
        let model = cfg.build_model(8, 99.0).unwrap();
        assert_eq!(model.latent_channels(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = EXAMPLE_CONFIG.replace("[train]", "[train]\nwarmup = 5");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("warmup"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let bad_section = format!("{EXAMPLE_CONFIG}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::parse(&bad_section).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = EXAMPLE_CONFIG.replace("family = \"matern32\"", "family = \"rbf\"");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = EXAMPLE_CONFIG.replace("epochs = 30", "epochs = 0");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = EXAMPLE_CONFIG.replace("task = \"missing\"", "task = \"spatiotemporal\"");
        assert!(ExperimentConfig::parse(&bad).is_err(), "ST without [spatial]");
    }

    #[test]
    fn lengthscale_defaults_to_tenth_of_span() {
        let cfg_text = EXAMPLE_CONFIG.replace("lengthscale = 10.0\n", "");
        let cfg = ExperimentConfig::parse(&cfg_text).unwrap();
        let model = cfg.build_model(8, 50.0).unwrap();
        let params = model.init_params(0);
        let spec = model.kernel_spec(&params, 0);
        assert!((spec.lengthscale() - 5.0).abs() < 1e-12);
    }
}
