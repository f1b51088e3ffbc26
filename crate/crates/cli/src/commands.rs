use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mvhgnn::data::dataset::RIG_TENSOR;
use mvhgnn::data::synth::{generate, SynthConfig};
use mvhgnn::data::{read_archive, write_archive, Dataset, FeatureArchive, Splits};
use mvhgnn::diagnostics::{gradient_suite, SuiteModule};
use mvhgnn::encoder::ViewSet;
use mvhgnn::graph::{build_camera_rig, CameraRig};
use mvhgnn::metrics::{compute_metrics, distance_histograms, margin_statistic, random_baseline_map, rank_gallery, similarities, RetrievalRun};
use mvhgnn::pipeline::{retrieval_run, BASELINE_TRIALS};
use mvhgnn::train::{train_stage1, train_stage2, Model, TrainData, TrainLog};
use mvhgnn::{Error, Execution, Matrix, Result};
use serde::Serialize;

use crate::config::{default_execution, RunConfig};
use crate::{EncodeArgs, EvalArgs, ExecArg, GenDataArgs, GradcheckArgs, RetrieveArgs, TrainArgs};

pub enum Outcome {
    Success,
    CheckFailed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Shapes,
    Sketches,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradModule {
    All,
    Ops,
    Encoder,
    Losses,
}

fn execution(arg: Option<ExecArg>) -> Result<Execution> {
    let exec = arg.map_or_else(default_execution, Execution::from);
    if exec == Execution::Parallel && !Execution::available() {
        return Err(Error::Config("this build has no parallel execution".into()));
    }
    Ok(exec)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

pub fn gen_data(a: GenDataArgs) -> Result<Outcome> {
    let cfg = SynthConfig {
        classes: a.classes,
        shapes_per_class: a.per_class,
        sketches_per_class: a.sketches_per_class,
        views: a.views,
        feature_dim: a.feature_dim,
        sketch_dim: a.sketch_dim,
        prototype_dim: a.prototype_dim,
        sketch_noise: a.noise,
        seed: a.seed,
    };
    cfg.validate()?;
    let exec = execution(a.execution)?;
    let ds = generate(&cfg, exec)?;
    ds.save(&a.out)?;
    write_text(&a.out.join("synth.json"), &to_json(&cfg))?;
    println!(
        "wrote {} shapes and {} sketches over {} classes to {}",
        ds.shapes.len(),
        ds.sketches.len(),
        ds.classes.len(),
        a.out.display()
    );
    Ok(Outcome::Success)
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if let Some(m) = a.mode {
        cfg.split.mode = m.into();
    }
    if let Some(s) = a.stage {
        cfg.stage = Some(s);
    }
    if let Some(i) = &a.init {
        cfg.init = Some(i.clone());
    }
    if let Some(s) = a.strategy {
        cfg.strategy = s.into();
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
        cfg.split.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = a.levels {
        cfg.model.levels = l;
    }
    if let Some(v) = a.views {
        cfg.model.views = Some(v);
    }
    if let Some(p) = a.pooling {
        cfg.model.pooling = p.into();
    }
    if a.no_quad {
        cfg.train.loss.quad = false;
    }
    if a.no_cls {
        cfg.train.loss.cls = false;
    }
    if a.no_sem {
        cfg.train.loss.sem = false;
    }
    if let Some(e) = a.execution {
        cfg.execution = e.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Raw test-split items, ready for `encode`.
fn split_archives(ds: &Dataset, splits: &Splits) -> Result<(FeatureArchive, FeatureArchive)> {
    let mut gallery = FeatureArchive::new();
    for &i in &splits.test_shapes {
        let s = &ds.shapes[i];
        gallery.push_item(&s.id, &s.views.features, &ds.classes[s.class])?;
    }
    gallery.push_matrix(RIG_TENSOR, &ds.rig.to_matrix())?;
    let mut query = FeatureArchive::new();
    for &i in &splits.test_sketches {
        let s = &ds.sketches[i];
        query.push_item(&s.id, &s.embedding, &ds.classes[s.class])?;
    }
    Ok((query, gallery))
}

#[derive(Serialize)]
struct TrainSummary {
    #[serde(flatten)]
    metrics: mvhgnn::metrics::MetricTable,
    baseline_map: f64,
    margin: Option<f64>,
    queries: usize,
    gallery: usize,
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let cfg = resolve_run_config(&a)?;
    let exec = cfg.execution;
    let full = match &cfg.dataset {
        Some(dir) => Dataset::load(dir)?,
        None => generate(&cfg.synth, exec)?,
    };
    let ds = match cfg.model.views {
        Some(n) if n != full.rig.len() => full.with_view_prefix(n)?,
        _ => full,
    };
    let splits = cfg.split.make(&ds)?;
    let data = TrainData::new(&ds, &splits)?;
    let encoder = cfg.model.encoder(ds.feature_dim(), ds.rig.len())?;
    let mut log = TrainLog::default();

    let (name, model) = match cfg.stage {
        Some(1) => {
            let mut model = data.init_model(encoder, cfg.model.adapter_hidden, cfg.train.seed)?;
            train_stage1(&data, &mut model, &cfg.train, exec, &mut log)?;
            ("stage1", model)
        }
        Some(_) => {
            let init = cfg.init.as_ref().expect("validated: stage 2 has init");
            let mut model = Model::load(init)?;
            if model.classes != data.seen_classes()
                || model.encoder.feature_dim != ds.feature_dim()
                || model.encoder.views() != ds.rig.len()
                || model.adapter.in_dim != ds.sketch_dim()
            {
                return Err(Error::Config(format!(
                    "checkpoint {} was not trained on this dataset and split",
                    init.display()
                )));
            }
            let freeze = train_stage2(&data, &mut model, &cfg.train, exec, &mut log)?;
            eprintln!("stage 1 parameters unchanged: {}", freeze.before == freeze.after);
            ("model", model)
        }
        None => {
            let out = mvhgnn::train::train(&data, encoder, cfg.model.adapter_hidden, &cfg.train, cfg.strategy, exec)?;
            log = out.log;
            ("model", out.model)
        }
    };
    let mut model = model;
    model.params.round_to_f32();

    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    model.save(out.join(format!("{name}.mvhf")))?;
    write_text(&out.join(format!("{name}.log.jsonl")), &log.to_jsonl())?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_text(&out.join("splits.json"), &to_json(&splits))?;
    let (query, gallery) = split_archives(&ds, &splits)?;
    write_archive(out.join("query.mvhf"), &query)?;
    write_archive(out.join("gallery.mvhf"), &gallery)?;
    if let Some(last) = log.records.last() {
        println!("{} epoch {}: loss {:.6}", last.stage, last.epoch, last.loss);
    }

    if name == "model" {
        let run = retrieval_run(&model, &ds, &splits, exec)?;
        let summary = TrainSummary {
            metrics: compute_metrics(&run)?,
            baseline_map: random_baseline_map(&run.query_classes, &run.gallery_classes, BASELINE_TRIALS, cfg.train.seed)?,
            margin: margin_statistic(&run).ok(),
            queries: run.queries.rows(),
            gallery: run.gallery.rows(),
        };
        print!("{}", summary.metrics.to_text());
        println!("random-ranking mAP {:.2}", summary.baseline_map);
        write_text(&out.join("metrics.json"), &to_json(&summary))?;
    }
    println!("wrote {}", out.join(format!("{name}.mvhf")).display());
    Ok(Outcome::Success)
}

/// Items of an archive with their labels, in file order.
struct Items {
    path: PathBuf,
    ids: Vec<String>,
    labels: Vec<Option<String>>,
    values: Vec<Matrix>,
    archive: FeatureArchive,
}

fn read_items(path: &Path) -> Result<Items> {
    let archive = read_archive(path)?;
    let mut items = Items {
        path: path.to_path_buf(),
        ids: Vec::new(),
        labels: Vec::new(),
        values: Vec::new(),
        archive: FeatureArchive::new(),
    };
    for (id, t) in archive.items() {
        items.ids.push(id.to_string());
        items.labels.push(archive.labels.get(id).cloned());
        items.values.push(t.to_matrix(id, path)?);
    }
    if items.ids.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            detail: "archive has no items".into(),
        });
    }
    items.archive = archive;
    Ok(items)
}

impl Items {
    fn bad(&self, detail: String) -> Error {
        Error::Manifest {
            path: self.path.clone(),
            detail,
        }
    }

    /// Every item as one row of a matrix; items must be single vectors.
    fn stacked(&self) -> Result<Matrix> {
        let cols = self.values[0].cols();
        for (id, m) in self.ids.iter().zip(&self.values) {
            if m.rows() != 1 || m.cols() != cols {
                return Err(self.bad(format!("item `{id}` is {}x{}, expected a vector of width {cols}", m.rows(), m.cols())));
            }
        }
        Matrix::vstack(&self.values.iter().collect::<Vec<_>>())
    }

    fn require_labels(&self) -> Result<Vec<&str>> {
        self.archive.validate_labels(&self.path)?;
        Ok(self.labels.iter().map(|l| l.as_deref().expect("validated")).collect())
    }
}

fn detect_kind(model: &Model, items: &Items) -> Result<Kind> {
    let (rows, cols) = items.values[0].shape();
    let shape_fit = rows == model.encoder.views() && cols == model.encoder.feature_dim;
    let sketch_fit = rows == 1 && cols == model.adapter.in_dim;
    match (shape_fit, sketch_fit) {
        (true, false) => Ok(Kind::Shapes),
        (false, true) => Ok(Kind::Sketches),
        (true, true) => Err(Error::Argument("items fit both shapes and sketches; pass --kind".into())),
        (false, false) => Err(items.bad(format!(
            "items are {rows}x{cols}; the checkpoint takes {}x{} shapes or 1x{} sketches",
            model.encoder.views(),
            model.encoder.feature_dim,
            model.adapter.in_dim
        ))),
    }
}

pub fn encode(a: EncodeArgs) -> Result<Outcome> {
    let exec = execution(a.execution)?;
    let model = Model::load(&a.ckpt)?;
    let items = read_items(&a.input)?;
    let kind = match a.kind {
        Some(k) => k,
        None => detect_kind(&model, &items)?,
    };
    let embedded = match kind {
        Kind::Shapes => {
            let rig = match items.archive.get(RIG_TENSOR) {
                Some(t) => CameraRig::from_matrix(&t.to_matrix(RIG_TENSOR, &a.input)?)?,
                None => build_camera_rig(model.encoder.views())?,
            };
            let mut views = Vec::with_capacity(items.values.len());
            for (id, m) in items.ids.iter().zip(&items.values) {
                if m.shape() != (rig.len(), model.encoder.feature_dim) || rig.len() != model.encoder.views() {
                    return Err(items.bad(format!(
                        "item `{id}` is {}x{}, the checkpoint takes {}x{}",
                        m.rows(),
                        m.cols(),
                        model.encoder.views(),
                        model.encoder.feature_dim
                    )));
                }
                views.push(ViewSet::new(m.clone(), rig.clone())?);
            }
            model.embed_shapes(&views.iter().collect::<Vec<_>>(), exec)?
        }
        Kind::Sketches => {
            let x = items.stacked()?;
            if x.cols() != model.adapter.in_dim {
                return Err(items.bad(format!("sketches have width {}, the checkpoint takes {}", x.cols(), model.adapter.in_dim)));
            }
            model.embed_sketches(&x)?
        }
    };

    let mut out = FeatureArchive::new();
    for (r, (id, label)) in items.ids.iter().zip(&items.labels).enumerate() {
        let row = Matrix::from_rows(&[embedded.row(r).to_vec()])?;
        match label {
            Some(c) => out.push_item(id, &row, c)?,
            None => out.push_matrix(id, &row)?,
        }
    }
    out.metadata.insert("kind".into(), serde_json::json!(kind));
    out.metadata.insert("embedding_dim".into(), serde_json::json!(embedded.cols()));
    write_archive(&a.out, &out)?;
    println!("embedded {} {} into {}", items.ids.len(), serde_json::json!(kind).as_str().unwrap_or(""), a.out.display());
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct Match<'a> {
    id: &'a str,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<&'a str>,
}

#[derive(Serialize)]
struct Ranked<'a> {
    query: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<&'a str>,
    matches: Vec<Match<'a>>,
}

pub fn retrieve(a: RetrieveArgs) -> Result<Outcome> {
    if a.top == 0 {
        return Err(Error::Argument("--top must be at least 1".into()));
    }
    let q = read_items(&a.query)?;
    let g = read_items(&a.gallery)?;
    let (qm, gm) = (q.stacked()?, g.stacked()?);
    if qm.cols() != gm.cols() {
        return Err(g.bad(format!("gallery width {} differs from query width {}", gm.cols(), qm.cols())));
    }
    let run = RetrievalRun::new(qm, vec![0; q.ids.len()], gm, vec![0; g.ids.len()])?;
    let sims = similarities(&run)?;
    let ranks = rank_gallery(&run)?;
    let results: Vec<Ranked> = ranks
        .iter()
        .enumerate()
        .map(|(qi, order)| Ranked {
            query: &q.ids[qi],
            class: q.labels[qi].as_deref(),
            matches: order
                .iter()
                .take(a.top)
                .map(|&gi| Match {
                    id: &g.ids[gi],
                    score: sims[qi][gi],
                    class: g.labels[gi].as_deref(),
                })
                .collect(),
        })
        .collect();
    let text = to_json(&results);
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(Outcome::Success)
}

pub fn eval(a: EvalArgs) -> Result<Outcome> {
    let q = read_items(&a.query)?;
    let g = read_items(&a.gallery)?;
    let (ql, gl) = (q.require_labels()?, g.require_labels()?);
    let names: BTreeSet<&str> = ql.iter().chain(&gl).copied().collect();
    let index: BTreeMap<&str, usize> = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
    let (qm, gm) = (q.stacked()?, g.stacked()?);
    if qm.cols() != gm.cols() {
        return Err(g.bad(format!("gallery width {} differs from query width {}", gm.cols(), qm.cols())));
    }
    let run = RetrievalRun::new(qm, ql.iter().map(|c| index[c]).collect(), gm, gl.iter().map(|c| index[c]).collect())?;
    let metrics = compute_metrics(&run)?;
    print!("{}", metrics.to_text());
    if let Some(path) = &a.hist {
        if a.bins == 0 {
            return Err(Error::Argument("--bins must be at least 1".into()));
        }
        write_text(path, &distance_histograms(&run, a.bins)?.to_csv())?;
    }
    if let Some(path) = &a.json {
        write_text(path, &to_json(&metrics))?;
    }
    Ok(Outcome::Success)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    if a.seeds == 0 {
        return Err(Error::Argument("--seeds must be at least 1".into()));
    }
    let exec = execution(a.execution)?;
    let modules: &[SuiteModule] = match a.module {
        GradModule::All => &[SuiteModule::Ops, SuiteModule::Losses, SuiteModule::Encoder],
        GradModule::Ops => &[SuiteModule::Ops],
        GradModule::Losses => &[SuiteModule::Losses],
        GradModule::Encoder => &[SuiteModule::Encoder],
    };
    let rows = gradient_suite(modules, a.seeds, exec)?;
    println!(
        "{:<8} {:<22} {:>7} {:>12} {:>12} {:>8}  status",
        "module", "function", "entries", "rel(res.)", "abs(unres.)", "strict"
    );
    let mut failed = 0;
    for r in &rows {
        let module = serde_json::json!(r.module);
        println!(
            "{:<8} {:<22} {:>7} {:>12.3e} {:>12.3e} {:>5}/{:<2}  {}",
            module.as_str().unwrap_or(""),
            r.name,
            r.entries,
            r.max_rel_resolved,
            r.max_abs_unresolved,
            r.seeds - r.strict_failures,
            r.seeds,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!("{} of {} functions pass", rows.len() - failed, rows.len());
    Ok(if failed == 0 { Outcome::Success } else { Outcome::CheckFailed })
}
