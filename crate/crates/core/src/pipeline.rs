//! End-to-end experiments: split, train, embed, rank, score.

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthConfig;
use crate::data::{make_splits, Dataset, SplitMode, Splits};
use crate::encoder::{default_schedule, EncoderConfig, NormMode, Pooling};
use crate::error::{Error, Result};
use crate::graph::DEFAULT_K;
use crate::metrics::{compute_metrics, margin_statistic, random_baseline_map, MetricTable, RetrievalRun};
use crate::par::Execution;
use crate::train::{train, FreezeReport, Model, Strategy, TrainConfig, TrainData, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub out_dim: usize,
    /// Hierarchy depth; the schedule halves the view count per level.
    pub levels: usize,
    /// Use only the first `views` cameras (all when unset).
    pub views: Option<usize>,
    pub k_neighbors: usize,
    pub leaky_slope: f64,
    pub pooling: Pooling,
    pub norm: NormMode,
    pub local_gcn: bool,
    pub global_attention: bool,
    pub adapter_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            out_dim: 64,
            levels: 3,
            views: None,
            k_neighbors: DEFAULT_K,
            leaky_slope: 0.2,
            pooling: Pooling::Max,
            norm: NormMode::Features,
            local_gcn: true,
            global_attention: true,
            adapter_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, feature_dim: usize, views: usize) -> Result<EncoderConfig> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        let mut schedule = default_schedule(views);
        if self.levels > schedule.len() {
            return Err(Error::Config(format!(
                "{} views support at most {} levels, asked for {}",
                views,
                schedule.len(),
                self.levels
            )));
        }
        schedule.truncate(self.levels);
        let cfg = EncoderConfig {
            feature_dim,
            out_dim: self.out_dim,
            schedule,
            k_neighbors: self.k_neighbors,
            leaky_slope: self.leaky_slope,
            local_gcn: self.local_gcn,
            global_attention: self.global_attention,
            pooling: self.pooling,
            norm: self.norm,
        };
        cfg.validate()?;
        if self.adapter_hidden == 0 {
            return Err(Error::Config("adapter_hidden must be positive".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Category,
    #[serde(rename = "zeroshot")]
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub mode: Mode,
    /// Explicit unseen classes; when empty the last `unseen_count` classes.
    pub unseen: Vec<String>,
    pub unseen_count: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: Mode::Category,
            unseen: Vec::new(),
            unseen_count: 2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn split_mode(&self, ds: &Dataset) -> Result<SplitMode> {
        match self.mode {
            Mode::Category => Ok(SplitMode::Category),
            Mode::ZeroShot if self.unseen.is_empty() => SplitMode::zero_shot_last(ds, self.unseen_count),
            Mode::ZeroShot => Ok(SplitMode::ZeroShot {
                unseen: self.unseen.clone(),
            }),
        }
    }

    pub fn make(&self, ds: &Dataset) -> Result<Splits> {
        make_splits(ds, &self.split_mode(ds)?, self.seed)
    }
}

/// Everything one desk experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub execution: Execution,
}

impl ExperimentConfig {
    /// Checks what can be checked without the dataset.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.model.encoder(self.data.feature_dim, self.model.views.unwrap_or(self.data.views))?;
        if self.execution == Execution::Parallel && !Execution::available() {
            return Err(Error::Config("this build has no parallel execution".into()));
        }
        Ok(())
    }
}

/// Test sketches against the gallery shapes of `splits`.
pub fn retrieval_run(model: &Model, ds: &Dataset, splits: &Splits, exec: Execution) -> Result<RetrievalRun> {
    let views: Vec<_> = splits.test_shapes.iter().map(|&i| &ds.shapes[i].views).collect();
    let gallery = model.embed_shapes(&views, exec)?;
    let sketches: Vec<_> = splits.test_sketches.iter().map(|&i| &ds.sketches[i].embedding).collect();
    if sketches.is_empty() {
        return Err(Error::Config("no query sketches in the test split".into()));
    }
    let queries = model.embed_sketches(&crate::tensor::Matrix::vstack(&sketches)?)?;
    RetrievalRun::new(
        queries,
        splits.test_sketches.iter().map(|&i| ds.sketches[i].class).collect(),
        gallery,
        splits.test_shapes.iter().map(|&i| ds.shapes[i].class).collect(),
    )
}

/// Number of random rankings averaged for the chance baseline.
pub const BASELINE_TRIALS: usize = 100;

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub metrics: MetricTable,
    /// Mean mAP of random rankings of the same queries and gallery.
    pub baseline_map: f64,
    pub margin: Option<f64>,
    pub model: Model,
    pub log: TrainLog,
    pub freeze: Option<FreezeReport>,
    pub splits: Splits,
    pub run: RetrievalRun,
}

/// Trains on `ds` per `cfg` and evaluates on the held-out split.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentReport> {
    cfg.train.validate()?;
    let ds_views;
    let ds = match cfg.model.views {
        Some(n) if n != ds.rig.len() => {
            ds_views = ds.with_view_prefix(n)?;
            &ds_views
        }
        _ => ds,
    };
    let splits = cfg.split.make(ds)?;
    let data = TrainData::new(ds, &splits)?;
    let encoder = cfg.model.encoder(ds.feature_dim(), ds.rig.len())?;
    let outcome = train(&data, encoder, cfg.model.adapter_hidden, &cfg.train, cfg.strategy, cfg.execution)?;
    let run = retrieval_run(&outcome.model, ds, &splits, cfg.execution)?;
    let metrics = compute_metrics(&run)?;
    let baseline_map = random_baseline_map(&run.query_classes, &run.gallery_classes, BASELINE_TRIALS, cfg.train.seed)?;
    let margin = margin_statistic(&run).ok();
    Ok(ExperimentReport {
        metrics,
        baseline_map,
        margin,
        model: outcome.model,
        log: outcome.log,
        freeze: outcome.freeze,
        splits,
        run,
    })
}
