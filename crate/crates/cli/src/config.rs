//! The JSON run configuration consumed by `camcls train`.

use std::path::{Path, PathBuf};

use camcls::data::{load_dataset, split, synth_generate, Dataset, SynthConfig};
use camcls::training::TrainConfig;
use camcls::tta::TtaConfig;
use camcls::ModelConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub data: DataConfig,
}

/// Either a directory of `pos/` and `neg/` images or a synthetic generator.
/// Without `test_root` the training set is split by `train_fraction`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub test_root: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_train_fraction() -> f64 {
    2.0 / 3.0
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.tta.validate(self.model.input_size)?;
        let d = &self.data;
        match (&d.root, &d.synthetic) {
            (Some(_), Some(_)) => return Err(CliError::config("data: set either `root` or `synthetic`, not both")),
            (None, None) => return Err(CliError::config("data: one of `root` or `synthetic` is required")),
            (None, Some(s)) => {
                s.validate()?;
                if s.image_size != self.model.input_size {
                    return Err(CliError::config(format!(
                        "data.synthetic.image_size {} differs from model.input_size {}",
                        s.image_size, self.model.input_size
                    )));
                }
                if d.test_root.is_some() {
                    return Err(CliError::config("data.test_root only applies to `root` datasets"));
                }
            }
            (Some(_), None) => {}
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(CliError::config(format!("data.train_fraction {} outside (0, 1)", d.train_fraction)));
        }
        Ok(())
    }

    /// Loads or generates the data and returns `(train, test)`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let d = &self.data;
        let size = self.model.input_size;
        let full = match (&d.root, &d.synthetic) {
            (Some(root), _) => {
                let ds = load_dataset(&existing_dir(root)?, size)?;
                if let Some(test_root) = &d.test_root {
                    let test = load_dataset(&existing_dir(test_root)?, size)?;
                    return Ok((ds, test));
                }
                ds
            }
            (None, Some(s)) => synth_generate(s)?,
            (None, None) => unreachable!("validated"),
        };
        Ok(split(&full, d.train_fraction, d.split_seed)?)
    }
}

pub fn existing_dir(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_dir() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::missing(path))
    }
}
