use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::derive_seed;
use crate::data::{Dataset, SplitMode, Splits};
use crate::encoder::{encode, encode_shape, sketch_adapter, AdapterConfig, EncoderConfig, ViewSet, ADAPTER_PREFIX, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::losses::{
    joint_objective, stage1_objective, stage2_objective, zeroshot_objective, Heads, LossConfig, Objective, PrototypeBank,
    Quadruplet, ShapeSide, SketchSide,
};
use crate::par::{self, Execution};
use crate::params::{accumulate_grads, init_weight, Bound, ParamStore};
use crate::tensor::{Matrix, Tape, Var};

use super::optim::{cosine_lr, Adam};
use super::sampler::{sample_quadruplets, QuadrupletBatch};

pub const CLASSIFIER: &str = "cls.w";
pub const PROJECTION: &str = "proj.w";
/// Prefixes of everything stage I trains and stage II freezes.
pub const STAGE1_PREFIXES: [&str; 3] = [ENCODER_PREFIX, "cls.", "proj."];

/// Full-scale schedule values.
pub const REFERENCE_LR_START: f64 = 1e-4;
pub const REFERENCE_LR_END: f64 = 1e-6;
pub const REFERENCE_EPOCHS: usize = 100;
pub const REFERENCE_QUADRUPLETS: usize = 512;

/// Desk-scale schedule used by default.
pub const DESK_LR_START: f64 = 3e-3;
pub const DESK_LR_END: f64 = 3e-5;
pub const DESK_EPOCHS: usize = 40;
pub const DESK_QUADRUPLETS: usize = 64;

const STREAM_INIT: u64 = 100;
const STREAM_STAGE1: u64 = 101;
const STREAM_STAGE2: u64 = 102;
const STREAM_ONE_STAGE: u64 = 103;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    TwoStage,
    OneStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs of each stage.
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Shapes per stage I step; sketches per step elsewhere.
    pub batch_size: usize,
    pub quadruplets: usize,
    pub seed: u64,
    /// Decoupled weight decay applied by the optimizer in every stage.
    pub weight_decay: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DESK_EPOCHS,
            lr_start: DESK_LR_START,
            lr_end: DESK_LR_END,
            batch_size: 32,
            quadruplets: DESK_QUADRUPLETS,
            seed: 0,
            weight_decay: 0.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 || self.quadruplets == 0 {
            return Err(Error::Config("batch_size and quadruplets must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay)));
        }
        self.loss.validate()
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr_start, self.lr_end)
    }
}

/// Encoder, adapter, classifier and projection head over a class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    /// Classifier rows, in order.
    pub classes: Vec<String>,
    pub params: ParamStore,
}

impl Model {
    pub fn init(encoder: EncoderConfig, adapter: AdapterConfig, classes: Vec<String>, prototype_dim: usize, seed: u64) -> Result<Model> {
        encoder.validate()?;
        adapter.validate()?;
        if adapter.out_dim != encoder.out_dim {
            return Err(Error::Config(format!(
                "adapter output width {} differs from encoder output width {}",
                adapter.out_dim, encoder.out_dim
            )));
        }
        if classes.len() < 2 || prototype_dim == 0 {
            return Err(Error::Config("a model needs at least two classes and a prototype width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT, 0));
        let mut params = encoder.init_params(&mut rng)?;
        params.extend_from(&adapter.init_params(&mut rng)?);
        params.insert(CLASSIFIER, init_weight(&mut rng, classes.len(), encoder.out_dim));
        params.insert(PROJECTION, init_weight(&mut rng, encoder.out_dim, prototype_dim));
        Ok(Model {
            encoder,
            adapter,
            classes,
            params,
        })
    }

    pub fn encoder_params(&self) -> ParamStore {
        self.params.subset(&[ENCODER_PREFIX])
    }

    /// One embedding row per view set.
    pub fn embed_shapes(&self, views: &[&ViewSet], exec: Execution) -> Result<Matrix> {
        if views.is_empty() {
            return Err(Error::Argument("no shapes to embed".into()));
        }
        let enc = self.encoder_params();
        let rows = par::try_map(exec, views, |v| encode_shape(&self.encoder, &enc, v).map(|e| e.vector))?;
        Matrix::vstack(&rows.iter().collect::<Vec<_>>())
    }

    pub fn embed_sketches(&self, input: &Matrix) -> Result<Matrix> {
        crate::encoder::adapt_sketches(&self.adapter, &self.params.subset(&[ADAPTER_PREFIX]), input)
    }

    /// Checkpoint archive with the configuration in its manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let to_json = |v: serde_json::Result<serde_json::Value>| v.expect("configuration serializes");
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), serde_json::json!(CHECKPOINT_FORMAT));
        meta.insert("encoder".to_string(), to_json(serde_json::to_value(&self.encoder)));
        meta.insert("adapter".to_string(), to_json(serde_json::to_value(&self.adapter)));
        meta.insert("classes".to_string(), serde_json::json!(self.classes));
        meta.insert("schedule".to_string(), serde_json::json!(self.encoder.schedule));
        self.params.save(path, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let (params, meta) = ParamStore::load(path)?;
        let field = |k: &str| {
            meta.get(k).cloned().ok_or_else(|| Error::Manifest {
                path: path.to_path_buf(),
                detail: format!("checkpoint manifest lacks `{k}`"),
            })
        };
        let parse_err = |e: serde_json::Error| Error::Json {
            path: path.to_path_buf(),
            source: e,
        };
        if field("format")? != serde_json::json!(CHECKPOINT_FORMAT) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                detail: "not a model checkpoint".into(),
            });
        }
        let encoder: EncoderConfig = serde_json::from_value(field("encoder")?).map_err(parse_err)?;
        let adapter: AdapterConfig = serde_json::from_value(field("adapter")?).map_err(parse_err)?;
        let classes: Vec<String> = serde_json::from_value(field("classes")?).map_err(parse_err)?;
        let model = Model {
            encoder,
            adapter,
            classes,
            params,
        };
        model.check_params(path)?;
        Ok(model)
    }

    /// Every parameter the configuration needs is present with its shape.
    fn check_params(&self, path: &Path) -> Result<()> {
        let proto_dim = self.params.get(PROJECTION)?.cols();
        let reference = Model::init(self.encoder.clone(), self.adapter.clone(), self.classes.clone(), proto_dim, 0)?;
        let a: Vec<(&str, (usize, usize))> = reference.params.iter().map(|(k, m)| (k, m.shape())).collect();
        let b: Vec<(&str, (usize, usize))> = self.params.iter().map(|(k, m)| (k, m.shape())).collect();
        if a != b {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                detail: "checkpoint tensors do not match its configuration".into(),
            });
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "mvhgnn-checkpoint-1";

/// Mean losses of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn stage(&self, stage: &str) -> Vec<&EpochRecord> {
        self.records.iter().filter(|r| r.stage == stage).collect()
    }
}

/// Dataset view shared by every loop: the split, the seen-class mapping and
/// the restricted prototype bank.
pub struct TrainData<'a> {
    pub ds: &'a Dataset,
    pub splits: &'a Splits,
    /// Dataset class index to classifier row.
    seen_row: Vec<Option<usize>>,
    bank: PrototypeBank,
}

impl<'a> TrainData<'a> {
    pub fn new(ds: &'a Dataset, splits: &'a Splits) -> Result<Self> {
        splits.check(ds)?;
        let mut seen_row = vec![None; ds.classes.len()];
        for (row, &c) in splits.seen.iter().enumerate() {
            seen_row[c] = Some(row);
        }
        let bank = ds.prototypes.restrict(&splits.seen_names(ds))?;
        Ok(TrainData {
            ds,
            splits,
            seen_row,
            bank,
        })
    }

    pub fn seen_classes(&self) -> Vec<String> {
        self.splits.seen_names(self.ds)
    }

    fn shape_targets(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter().map(|&i| self.row_of(self.ds.shapes[i].class)).collect()
    }

    fn sketch_targets(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter().map(|&i| self.row_of(self.ds.sketches[i].class)).collect()
    }

    fn row_of(&self, class: usize) -> Result<usize> {
        self.seen_row[class].ok_or_else(|| Error::Protocol(format!("class `{}` is not a training class", self.ds.classes[class])))
    }

    /// A model over the seen classes sized for this dataset.
    pub fn init_model(&self, encoder: EncoderConfig, adapter_hidden: usize, seed: u64) -> Result<Model> {
        let adapter = AdapterConfig {
            in_dim: self.ds.sketch_dim(),
            hidden: adapter_hidden,
            out_dim: encoder.out_dim,
            leaky_slope: encoder.leaky_slope,
        };
        if encoder.feature_dim != self.ds.feature_dim() || encoder.views() != self.ds.rig.len() {
            return Err(Error::Config(format!(
                "encoder expects {} views of width {}, the dataset has {} of width {}",
                encoder.views(),
                encoder.feature_dim,
                self.ds.rig.len(),
                self.ds.feature_dim()
            )));
        }
        Model::init(encoder, adapter, self.seen_classes(), self.bank.dim(), seed)
    }
}

/// A recorded encoder pass of one shape.
struct ShapePass {
    tape: Tape,
    bound: Bound,
    embedding: Var,
}

fn forward_shapes(model: &Model, enc: &ParamStore, views: &[&ViewSet], exec: Execution) -> Result<Vec<ShapePass>> {
    par::try_map(exec, views, |v| {
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, |_| true);
        let f = tape.constant(v.features.clone());
        let trace = encode(&mut tape, &model.encoder, &bound, f, &v.rig)?;
        Ok(ShapePass {
            tape,
            bound,
            embedding: trace.embedding,
        })
    })
}

/// Pulls per-row embedding gradients back through each shape's tape and
/// sums the parameter gradients in shape order.
fn backward_shapes(passes: &[ShapePass], row_grads: &[Matrix], exec: Execution) -> Result<BTreeMap<String, Matrix>> {
    let idx: Vec<usize> = (0..passes.len()).collect();
    let parts = par::try_map(exec, &idx, |&i| {
        let p = &passes[i];
        let g = p.tape.backward_with(p.embedding, row_grads[i].clone())?;
        Ok::<_, Error>(p.bound.collect(&g))
    })?;
    let mut total = BTreeMap::new();
    for part in parts {
        accumulate_grads(&mut total, part);
    }
    Ok(total)
}

/// The head tape: non-encoder parameters, the prototype bank, and the shape
/// embeddings as leaves.
struct Head {
    tape: Tape,
    bound: Bound,
    heads: Heads,
    shape_rows: Vec<Var>,
    shapes: Option<Var>,
}

impl Head {
    fn new(model: &Model, bank: &PrototypeBank, trainable: &dyn Fn(&str) -> bool, passes: &[ShapePass]) -> Result<Head> {
        let mut tape = Tape::new();
        let others = model.params.subset(&[ADAPTER_PREFIX, "cls.", "proj."]);
        let bound = others.bind(&mut tape, |n| trainable(n));
        let bank = tape.constant(bank.vectors().clone());
        let heads = Heads {
            classifier: bound.var(CLASSIFIER)?,
            projection: bound.var(PROJECTION)?,
            bank,
        };
        let shape_rows: Vec<Var> = passes.iter().map(|p| tape.leaf(p.tape.value(p.embedding).clone())).collect();
        let shapes = if shape_rows.is_empty() {
            None
        } else {
            Some(tape.concat_rows(&shape_rows)?)
        };
        Ok(Head {
            tape,
            bound,
            heads,
            shape_rows,
            shapes,
        })
    }

    /// Backpropagates `objective`, returning the head parameter gradients,
    /// the per-shape embedding gradients and the loss values.
    fn finish(self, objective: &Objective, out_dim: usize) -> Result<(BTreeMap<String, Matrix>, Vec<Matrix>, StepLoss)> {
        let grads = self.tape.backward(objective.total)?;
        let rows = self
            .shape_rows
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(1, out_dim)))
            .collect();
        let loss = StepLoss {
            total: self.tape.value(objective.total).item(),
            terms: objective.terms.iter().map(|&(n, v)| (n.to_string(), self.tape.value(v).item())).collect(),
        };
        Ok((self.bound.collect(&grads), rows, loss))
    }
}

struct StepLoss {
    total: f64,
    terms: Vec<(String, f64)>,
}

#[derive(Default)]
struct EpochMeter {
    steps: usize,
    total: f64,
    terms: BTreeMap<String, f64>,
}

impl EpochMeter {
    fn add(&mut self, s: StepLoss) {
        self.steps += 1;
        self.total += s.total;
        for (k, v) in s.terms {
            *self.terms.entry(k).or_default() += v;
        }
    }

    fn record(self, stage: &str, epoch: usize, lr: f64) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            stage: stage.to_string(),
            epoch,
            lr,
            loss: self.total / n,
            terms: self.terms.into_iter().map(|(k, v)| (k, v / n)).collect(),
        }
    }
}

fn require(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(format!("empty training split: {what}")))
    }
}

/// Stage I: the 3D encoder, classifier and projection head on training shapes.
pub fn train_stage1(data: &TrainData, model: &mut Model, cfg: &TrainConfig, exec: Execution, log: &mut TrainLog) -> Result<()> {
    cfg.validate()?;
    let train = &data.splits.train_shapes;
    require(!train.is_empty(), "no training shapes")?;
    let mut adam = Adam::default().with_weight_decay(cfg.weight_decay);
    let trainable = |n: &str| STAGE1_PREFIXES.iter().any(|p| n.starts_with(p));
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_STAGE1, epoch as u64)));
        let mut meter = EpochMeter::default();
        for batch in order.chunks(cfg.batch_size) {
            let enc = model.encoder_params();
            let views: Vec<&ViewSet> = batch.iter().map(|&i| &data.ds.shapes[i].views).collect();
            let passes = forward_shapes(model, &enc, &views, exec)?;
            let mut head = Head::new(model, &data.bank, &trainable, &passes)?;
            let targets = data.shape_targets(batch)?;
            let emb = head.shapes.expect("non-empty batch");
            let obj = stage1_objective(
                &mut head.tape,
                &cfg.loss,
                ShapeSide {
                    embedding: emb,
                    targets: &targets,
                },
                head.heads,
            )?;
            let (mut grads, rows, loss) = head.finish(&obj, model.encoder.out_dim)?;
            accumulate_grads(&mut grads, backward_shapes(&passes, &rows, exec)?);
            adam.step(&mut model.params, &grads, lr)?;
            meter.add(loss);
        }
        log.records.push(meter.record("stage1", epoch, lr));
    }
    Ok(())
}

/// Positions of `wanted` inside the sorted unique list `set`.
fn positions(set: &[usize], wanted: &[usize]) -> Vec<usize> {
    wanted.iter().map(|w| set.binary_search(w).expect("member")).collect()
}

fn unique(parts: &[&[usize]]) -> Vec<usize> {
    parts.iter().flat_map(|p| p.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect()
}

fn sketch_matrix(ds: &Dataset, idx: &[usize]) -> Result<Matrix> {
    Matrix::vstack(&idx.iter().map(|&i| &ds.sketches[i].embedding).collect::<Vec<_>>())
}

/// Adapter output for the unique sketches of a batch, plus the anchor and
/// negative-sketch rows gathered from it.
fn sketch_side(head: &mut Head, model: &Model, ds: &Dataset, q: &QuadrupletBatch) -> Result<(Vec<usize>, Var, Var, Var)> {
    let uniq = unique(&[&q.anchor, &q.negative_sketch]);
    let x = head.tape.constant(sketch_matrix(ds, &uniq)?);
    let a = sketch_adapter(&mut head.tape, &model.adapter, &head.bound, x)?;
    let anchor = head.tape.gather_rows(a, &positions(&uniq, &q.anchor))?;
    let neg = head.tape.gather_rows(a, &positions(&uniq, &q.negative_sketch))?;
    Ok((uniq, a, anchor, neg))
}

/// Outcome of stage II, with the frozen-parameter fingerprints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReport {
    pub before: String,
    pub after: String,
    pub trained: Vec<String>,
}

/// Stage II: only the sketch adapter trains; the stage I parameters are
/// used as constants and checked to be bit-identical afterwards.
pub fn train_stage2(data: &TrainData, model: &mut Model, cfg: &TrainConfig, exec: Execution, log: &mut TrainLog) -> Result<FreezeReport> {
    cfg.validate()?;
    let shapes = &data.splits.train_shapes;
    let sketches = &data.splits.train_sketches;
    require(!shapes.is_empty() && !sketches.is_empty(), "stage II needs shapes and sketches")?;
    let before = model.params.fingerprint(&STAGE1_PREFIXES);
    let trained: Vec<String> = model.params.names_with_prefix(ADAPTER_PREFIX).map(str::to_string).collect();
    let frozen: BTreeSet<&str> = model
        .params
        .names()
        .filter(|n| STAGE1_PREFIXES.iter().any(|p| n.starts_with(p)))
        .collect();
    if trained.iter().any(|n| frozen.contains(n.as_str())) || trained.len() + frozen.len() != model.params.len() {
        return Err(Error::Config("stage II parameters must be exactly the non-stage-I set".into()));
    }

    let views: Vec<&ViewSet> = shapes.iter().map(|&i| &data.ds.shapes[i].views).collect();
    let gallery = model.embed_shapes(&views, exec)?;
    let row_of: BTreeMap<usize, usize> = shapes.iter().enumerate().map(|(r, &i)| (i, r)).collect();

    let mut adam = Adam::default().with_weight_decay(cfg.weight_decay);
    let trainable = |n: &str| n.starts_with(ADAPTER_PREFIX);
    let steps = sketches.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let mut meter = EpochMeter::default();
        for step in 0..steps {
            let seed = derive_seed(cfg.seed, STREAM_STAGE2, (epoch * steps + step) as u64);
            let q = sample_quadruplets(data.ds, shapes, sketches, cfg.quadruplets, seed)?;
            let mut head = Head::new(model, &data.bank, &trainable, &[])?;
            let (uniq, all, anchor, neg_sketch) = sketch_side(&mut head, model, data.ds, &q)?;
            let pick = |idx: &[usize]| gallery.select_rows(&idx.iter().map(|i| row_of[i]).collect::<Vec<_>>());
            let positive = head.tape.constant(pick(&q.positive));
            let negative_3d = head.tape.constant(pick(&q.negative_3d));
            let targets = data.sketch_targets(&uniq)?;
            let obj = stage2_objective(
                &mut head.tape,
                &cfg.loss,
                Quadruplet {
                    anchor,
                    positive,
                    negative_3d,
                    negative_sketch: neg_sketch,
                },
                SketchSide {
                    embedding: all,
                    targets: &targets,
                },
                head.heads,
            )?;
            let (grads, _, loss) = head.finish(&obj, model.encoder.out_dim)?;
            adam.step(&mut model.params, &grads, lr)?;
            meter.add(loss);
        }
        log.records.push(meter.record("stage2", epoch, lr));
    }

    let after = model.params.fingerprint(&STAGE1_PREFIXES);
    if after != before {
        return Err(Error::Protocol("stage II modified frozen parameters".into()));
    }
    Ok(FreezeReport { before, after, trained })
}

/// One-stage training of both encoders at once: the zero-shot objective in
/// zero-shot mode, every term in category mode.
pub fn train_one_stage(data: &TrainData, model: &mut Model, cfg: &TrainConfig, exec: Execution, log: &mut TrainLog) -> Result<()> {
    cfg.validate()?;
    let shapes = &data.splits.train_shapes;
    let sketches = &data.splits.train_sketches;
    require(!shapes.is_empty() && !sketches.is_empty(), "one-stage training needs shapes and sketches")?;
    let zero_shot = matches!(data.splits.mode, SplitMode::ZeroShot { .. });
    let mut adam = Adam::default().with_weight_decay(cfg.weight_decay);
    let trainable = |_: &str| true;
    let steps = sketches.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let mut meter = EpochMeter::default();
        for step in 0..steps {
            let seed = derive_seed(cfg.seed, STREAM_ONE_STAGE, (epoch * steps + step) as u64);
            let q = sample_quadruplets(data.ds, shapes, sketches, cfg.quadruplets, seed)?;
            let shape_ids = unique(&[&q.positive, &q.negative_3d]);
            let enc = model.encoder_params();
            let views: Vec<&ViewSet> = shape_ids.iter().map(|&i| &data.ds.shapes[i].views).collect();
            let passes = forward_shapes(model, &enc, &views, exec)?;
            let mut head = Head::new(model, &data.bank, &trainable, &passes)?;
            let emb = head.shapes.expect("non-empty batch");
            let (sk_ids, all, anchor, negative_sketch) = sketch_side(&mut head, model, data.ds, &q)?;
            let positive = head.tape.gather_rows(emb, &positions(&shape_ids, &q.positive))?;
            let negative_3d = head.tape.gather_rows(emb, &positions(&shape_ids, &q.negative_3d))?;
            let quad = Quadruplet {
                anchor,
                positive,
                negative_3d,
                negative_sketch,
            };
            let shape_targets = data.shape_targets(&shape_ids)?;
            let sketch_targets = data.sketch_targets(&sk_ids)?;
            let shape_side = ShapeSide {
                embedding: emb,
                targets: &shape_targets,
            };
            let sketch_side = SketchSide {
                embedding: all,
                targets: &sketch_targets,
            };
            let obj = if zero_shot {
                zeroshot_objective(&mut head.tape, &cfg.loss, quad, shape_side, sketch_side, head.heads)?
            } else {
                joint_objective(&mut head.tape, &cfg.loss, quad, shape_side, sketch_side, head.heads)?
            };
            let (mut grads, rows, loss) = head.finish(&obj, model.encoder.out_dim)?;
            accumulate_grads(&mut grads, backward_shapes(&passes, &rows, exec)?);
            adam.step(&mut model.params, &grads, lr)?;
            meter.add(loss);
        }
        log.records.push(meter.record("one-stage", epoch, lr));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub freeze: Option<FreezeReport>,
}

/// Full training under `strategy`. The result is rounded to checkpoint
/// precision so that in-memory evaluation matches a reloaded checkpoint.
pub fn train(
    data: &TrainData,
    encoder: EncoderConfig,
    adapter_hidden: usize,
    cfg: &TrainConfig,
    strategy: Strategy,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = data.init_model(encoder, adapter_hidden, cfg.seed)?;
    let mut log = TrainLog::default();
    let freeze = match strategy {
        Strategy::TwoStage => {
            train_stage1(data, &mut model, cfg, exec, &mut log)?;
            // Stage two starts from what a stage-one checkpoint would hold.
            model.params.round_to_f32();
            Some(train_stage2(data, &mut model, cfg, exec, &mut log)?)
        }
        Strategy::OneStage => {
            train_one_stage(data, &mut model, cfg, exec, &mut log)?;
            None
        }
    };
    model.params.round_to_f32();
    Ok(TrainOutcome { model, log, freeze })
}
