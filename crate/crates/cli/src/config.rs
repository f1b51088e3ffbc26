//! The `train` run configuration: a TOML file plus flag overrides.

use std::path::{Path, PathBuf};

use mvhgnn::data::synth::SynthConfig;
use mvhgnn::pipeline::{ExperimentConfig, ModelConfig, SplitConfig};
use mvhgnn::train::{Strategy, TrainConfig};
use mvhgnn::{Error, Execution, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory written by `gen-data`; synthesized from `synth` when unset.
    pub dataset: Option<PathBuf>,
    /// Output directory for the checkpoint, log and split archives.
    pub out: PathBuf,
    /// Run a single stage of the two-stage strategy.
    pub stage: Option<u8>,
    /// Stage-one checkpoint that stage two starts from.
    pub init: Option<PathBuf>,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: PathBuf::from("run"),
            stage: None,
            init: None,
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            strategy: Strategy::default(),
            execution: default_execution(),
        }
    }
}

/// Parallel when this build supports it.
pub fn default_execution() -> Execution {
    if Execution::available() {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.dataset.as_mut().map(rebase);
        cfg.init.as_mut().map(rebase);
        rebase(&mut cfg.out);
        Ok(cfg)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            data: self.synth.clone(),
            split: self.split.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            strategy: self.strategy,
            execution: self.execution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        match (self.stage, &self.init) {
            (None, None) | (Some(1), None) | (Some(2), Some(_)) => {}
            (None | Some(1), Some(_)) => return Err(Error::Config("`init` is only used with stage 2".into())),
            (Some(2), None) => return Err(Error::Config("stage 2 needs an `init` checkpoint from stage 1".into())),
            (Some(s), _) => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        }
        if self.stage.is_some() && self.strategy != Strategy::TwoStage {
            return Err(Error::Config("stages exist only under the two-stage strategy".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}
