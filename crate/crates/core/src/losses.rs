//! Training objectives: prototype alignment, AM-softmax classification and
//! the quadruplet metric loss, plus the three stage compositions.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::archive::FeatureArchive;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_SCALE: f64 = 15.0;
pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_MU: f64 = 1.0;

/// Fixed per-class semantic targets, one unit row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    labels: Vec<String>,
    vectors: Matrix,
}

impl PrototypeBank {
    /// Normalizes every row; rejects fewer than two classes, duplicate labels
    /// and zero rows.
    pub fn new(labels: Vec<String>, vectors: Matrix) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Argument(format!(
                "a prototype bank needs at least 2 classes, got {}",
                labels.len()
            )));
        }
        if labels.len() != vectors.rows() {
            return Err(Error::dim(
                "prototype_bank",
                format!("{} labels for {} vectors", labels.len(), vectors.rows()),
            ));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Argument("prototype labels must be unique".into()));
        }
        let mut vectors = vectors;
        for r in 0..vectors.rows() {
            let row = vectors.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::degenerate(
                    "prototype_bank",
                    format!("prototype `{}` has norm {norm}", labels[r]),
                ));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(PrototypeBank { labels, vectors })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Argument(format!("class `{label}` is not in the prototype bank")))
    }

    /// The sub-bank for `labels`, in that order.
    pub fn restrict(&self, labels: &[String]) -> Result<PrototypeBank> {
        let idx = labels
            .iter()
            .map(|l| self.index_of(l))
            .collect::<Result<Vec<_>>>()?;
        let unique: BTreeSet<&String> = labels.iter().collect();
        if labels.len() < 2 || unique.len() != labels.len() {
            return Err(Error::Argument(format!(
                "restriction needs at least 2 distinct classes, got {labels:?}"
            )));
        }
        Ok(PrototypeBank {
            labels: labels.to_vec(),
            vectors: self.vectors.select_rows(&idx),
        })
    }

    /// One item per class, the item id being the class label itself.
    pub fn to_archive(&self) -> Result<FeatureArchive> {
        let mut a = FeatureArchive::new();
        for (r, label) in self.labels.iter().enumerate() {
            a.push_item(label.clone(), &Matrix::row_vector(self.vectors.row(r)), label.clone())?;
        }
        Ok(a)
    }

    /// Reads either one `1 x d` item per class (labelled with the class), or
    /// a single `C x d` tensor whose class order is given by a `classes`
    /// metadata array.
    pub fn from_archive(archive: &FeatureArchive, path: &Path) -> Result<PrototypeBank> {
        archive.validate_labels(path)?;
        let items: Vec<(&str, Matrix)> = archive
            .items()
            .map(|(id, t)| Ok((id, t.to_matrix(id, path)?)))
            .collect::<Result<_>>()?;
        let manifest_err = |detail: String| Error::Manifest {
            path: path.to_path_buf(),
            detail,
        };
        if let [(id, m)] = items.as_slice() {
            if m.rows() > 1 {
                let classes: Vec<String> = archive
                    .metadata
                    .get("classes")
                    .and_then(|v| serde_json::from_value(v.clone()).ok())
                    .ok_or_else(|| manifest_err(format!("`{id}` holds {} rows but no `classes` list", m.rows())))?;
                if classes.len() != m.rows() {
                    return Err(manifest_err(format!(
                        "`classes` lists {} names for {} rows",
                        classes.len(),
                        m.rows()
                    )));
                }
                return PrototypeBank::new(classes, m.clone());
            }
        }
        if items.is_empty() {
            return Err(manifest_err("prototype archive holds no items".into()));
        }
        let mut labels = Vec::new();
        for (id, m) in &items {
            if m.rows() != 1 {
                return Err(manifest_err(format!("prototype `{id}` has {} rows", m.rows())));
            }
            labels.push(archive.labels[*id].clone());
        }
        let refs: Vec<&Matrix> = items.iter().map(|(_, m)| m).collect();
        PrototypeBank::new(labels, Matrix::vstack(&refs)?)
    }
}

/// Cross-entropy over `cos(ℓ₂(p), w_i) / τ` at each row's target class,
/// averaged over rows. `projected` is `M x d_p`; `bank` is the `C x d_p`
/// matrix of unit prototypes on the tape.
pub fn semantic_loss(tape: &mut Tape, projected: Var, bank: Var, targets: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let p = tape.row_l2_normalize(projected)?;
    let wt = tape.transpose(bank)?;
    let cos = tape.matmul(p, wt)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    tape.cross_entropy(logits, targets)
}

/// Scale and margin of the cosine classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmSoftmax {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AmSoftmax {
    fn default() -> Self {
        AmSoftmax {
            scale: DEFAULT_SCALE,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl AmSoftmax {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "AM-softmax needs t > 0 and 0 <= m < 1, got t = {}, m = {}",
                self.scale, self.margin
            )));
        }
        Ok(())
    }
}

/// Batch mean of `-log(e^{t(cos_y - m)} / (e^{t(cos_y - m)} + Σ_{j≠y} e^{t cos_j}))`
/// with features and classifier rows both ℓ₂-normalized. `weights` is
/// `N_class x d`.
pub fn am_softmax_loss(tape: &mut Tape, feat: Var, weights: Var, targets: &[usize], cls: AmSoftmax) -> Result<Var> {
    cls.validate()?;
    let (m, _) = tape.shape(feat);
    let (c, _) = tape.shape(weights);
    if targets.len() != m {
        return Err(Error::dim("am_softmax_loss", format!("{} targets for {m} rows", targets.len())));
    }
    let f = tape.row_l2_normalize(feat)?;
    let w = tape.row_l2_normalize(weights)?;
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(f, wt)?;
    let scaled = tape.scale(cos, cls.scale)?;
    let mut shift = Matrix::zeros(m, c);
    for (r, &y) in targets.iter().enumerate() {
        if y >= c {
            return Err(Error::Argument(format!("target class {y} out of range for {c} classes")));
        }
        shift.set(r, y, -cls.scale * cls.margin);
    }
    let shift = tape.constant(shift);
    let logits = tape.add(scaled, shift)?;
    tape.cross_entropy(logits, targets)
}

/// The four row-aligned embedding matrices of a quadruplet batch.
#[derive(Debug, Clone, Copy)]
pub struct Quadruplet {
    pub anchor: Var,
    pub positive: Var,
    pub negative_3d: Var,
    pub negative_sketch: Var,
}

fn squared_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.row_sums(sq)
}

/// Row mean of `[μ + δ(a,p) − δ(a,n3d)]₊ + [μ + δ(a,p) − δ(a,nske)]₊` with δ
/// the squared Euclidean distance between ℓ₂-normalized rows.
pub fn quadruplet_loss(tape: &mut Tape, q: Quadruplet, mu: f64) -> Result<Var> {
    if !(mu >= 0.0) {
        return Err(Error::Argument(format!("quadruplet margin must be >= 0, got {mu}")));
    }
    let a = tape.row_l2_normalize(q.anchor)?;
    let p = tape.row_l2_normalize(q.positive)?;
    let n3 = tape.row_l2_normalize(q.negative_3d)?;
    let ns = tape.row_l2_normalize(q.negative_sketch)?;
    let dap = squared_distance(tape, a, p)?;
    let dan3 = squared_distance(tape, a, n3)?;
    let dans = squared_distance(tape, a, ns)?;
    let h1 = tape.sub(dap, dan3)?;
    let h1 = tape.add_scalar(h1, mu)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.sub(dap, dans)?;
    let h2 = tape.add_scalar(h2, mu)?;
    let h2 = tape.relu(h2)?;
    let both = tape.add(h1, h2)?;
    tape.mean(both)
}

/// Term switches and weights shared by all objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub mu: f64,
    pub am: AmSoftmax,
    pub quad: bool,
    pub cls: bool,
    pub sem: bool,
    pub quad_weight: f64,
    pub cls_weight: f64,
    pub sem_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            mu: DEFAULT_MU,
            am: AmSoftmax::default(),
            quad: true,
            cls: true,
            sem: true,
            quad_weight: 1.0,
            cls_weight: 1.0,
            sem_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.am.validate()?;
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        for (n, w) in [
            ("quad_weight", self.quad_weight),
            ("cls_weight", self.cls_weight),
            ("sem_weight", self.sem_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{n} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// A composed objective: its total and each named term.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl Objective {
    /// Weighted sum of the given terms.
    pub fn compose(tape: &mut Tape, terms: Vec<(&'static str, Var, f64)>) -> Result<Objective> {
        if terms.is_empty() {
            return Err(Error::Config("every loss term is switched off".into()));
        }
        let mut total: Option<Var> = None;
        for &(_, v, w) in &terms {
            let scaled = tape.scale(v, w)?;
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        Ok(Objective {
            total: total.expect("non-empty"),
            terms: terms.into_iter().map(|(n, v, _)| (n, v)).collect(),
        })
    }
}

/// Inputs of the 3D-side terms.
#[derive(Debug, Clone, Copy)]
pub struct ShapeSide<'a> {
    /// `M x d_out` shape embeddings.
    pub embedding: Var,
    pub targets: &'a [usize],
}

/// Inputs of the sketch-side terms.
#[derive(Debug, Clone, Copy)]
pub struct SketchSide<'a> {
    pub embedding: Var,
    pub targets: &'a [usize],
}

/// Classifier weights, projection head and prototypes as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub classifier: Var,
    pub projection: Var,
    pub bank: Var,
}

fn semantic_term(tape: &mut Tape, cfg: &LossConfig, heads: Heads, emb: Var, targets: &[usize]) -> Result<Var> {
    let projected = tape.matmul(emb, heads.projection)?;
    semantic_loss(tape, projected, heads.bank, targets, cfg.tau)
}

/// Stage I: classification plus semantic alignment of 3D embeddings.
pub fn stage1_objective(tape: &mut Tape, cfg: &LossConfig, shapes: ShapeSide, heads: Heads) -> Result<Objective> {
    let mut terms = Vec::new();
    if cfg.cls {
        let v = am_softmax_loss(tape, shapes.embedding, heads.classifier, shapes.targets, cfg.am)?;
        terms.push(("cls_3d", v, cfg.cls_weight));
    }
    if cfg.sem {
        let v = semantic_term(tape, cfg, heads, shapes.embedding, shapes.targets)?;
        terms.push(("sem_3d", v, cfg.sem_weight));
    }
    Objective::compose(tape, terms)
}

/// Stage II: quadruplet loss plus sketch classification (against the frozen
/// 3D classifier) and sketch semantic alignment.
pub fn stage2_objective(
    tape: &mut Tape,
    cfg: &LossConfig,
    quad: Quadruplet,
    sketches: SketchSide,
    heads: Heads,
) -> Result<Objective> {
    let mut terms = Vec::new();
    if cfg.quad {
        terms.push(("quad", quadruplet_loss(tape, quad, cfg.mu)?, cfg.quad_weight));
    }
    if cfg.cls {
        let v = am_softmax_loss(tape, sketches.embedding, heads.classifier, sketches.targets, cfg.am)?;
        terms.push(("cls_ske", v, cfg.cls_weight));
    }
    if cfg.sem {
        let v = semantic_term(tape, cfg, heads, sketches.embedding, sketches.targets)?;
        terms.push(("sem_ske", v, cfg.sem_weight));
    }
    Objective::compose(tape, terms)
}

/// One-stage zero-shot: quadruplet plus semantic alignment of both
/// modalities; no classification term.
pub fn zeroshot_objective(
    tape: &mut Tape,
    cfg: &LossConfig,
    quad: Quadruplet,
    shapes: ShapeSide,
    sketches: SketchSide,
    heads: Heads,
) -> Result<Objective> {
    let mut terms = Vec::new();
    if cfg.quad {
        terms.push(("quad", quadruplet_loss(tape, quad, cfg.mu)?, cfg.quad_weight));
    }
    if cfg.sem {
        let v = semantic_term(tape, cfg, heads, shapes.embedding, shapes.targets)?;
        terms.push(("sem_3d", v, cfg.sem_weight));
        let v = semantic_term(tape, cfg, heads, sketches.embedding, sketches.targets)?;
        terms.push(("sem_ske", v, cfg.sem_weight));
    }
    Objective::compose(tape, terms)
}

/// One-stage category training: every term on both modalities at once.
pub fn joint_objective(
    tape: &mut Tape,
    cfg: &LossConfig,
    quad: Quadruplet,
    shapes: ShapeSide,
    sketches: SketchSide,
    heads: Heads,
) -> Result<Objective> {
    let mut terms = Vec::new();
    if cfg.quad {
        terms.push(("quad", quadruplet_loss(tape, quad, cfg.mu)?, cfg.quad_weight));
    }
    if cfg.cls {
        let v = am_softmax_loss(tape, shapes.embedding, heads.classifier, shapes.targets, cfg.am)?;
        terms.push(("cls_3d", v, cfg.cls_weight));
        let v = am_softmax_loss(tape, sketches.embedding, heads.classifier, sketches.targets, cfg.am)?;
        terms.push(("cls_ske", v, cfg.cls_weight));
    }
    if cfg.sem {
        let v = semantic_term(tape, cfg, heads, shapes.embedding, shapes.targets)?;
        terms.push(("sem_3d", v, cfg.sem_weight));
        let v = semantic_term(tape, cfg, heads, sketches.embedding, sketches.targets)?;
        terms.push(("sem_ske", v, cfg.sem_weight));
    }
    Objective::compose(tape, terms)
}
