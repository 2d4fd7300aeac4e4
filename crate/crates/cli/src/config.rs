use std::path::{Path, PathBuf};

use anyhow::Context as _;
use dmsconv::training::TrainConfig;
use dmsconv::ModelConfig;
use serde::Deserialize;

/// A training run: what to build, how to train it, and where files live.
///
/// ```toml
/// [model]
/// variant = "global-local-ms"
/// input_dim = 24
/// num_classes = 6
///
/// [train]
/// max_steps = 1000
///
/// [paths]
/// train_data = "corpus/train.dmsf"
/// checkpoint = "run/model.dmsc"
/// ```
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub paths: Paths,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_data: PathBuf,
    pub checkpoint: PathBuf,
    /// Defaults to `loss.csv` beside the checkpoint.
    pub loss_csv: Option<PathBuf>,
}

impl RunConfig {
    /// Reads and validates `path`; relative paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading run config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| dmsconv::Error::Config(e.to_string()))
            .with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.train_data);
        resolve(&mut cfg.paths.checkpoint);
        if let Some(p) = cfg.paths.loss_csv.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().context("[model]")?;
        self.train.validate().context("[train]")?;
        Ok(())
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.paths.loss_csv.clone().unwrap_or_else(|| {
            self.paths
                .checkpoint
                .parent()
                .unwrap_or(Path::new(""))
                .join("loss.csv")
        })
    }
}
