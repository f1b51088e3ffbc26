//! Hierarchical multi-view graph encoder and the sketch adapter.
//!
//! Each level runs a local graph convolution over the camera kNN graph,
//! global attention over all nodes, pools the node features, and (except at
//! the last level) coarsens the nodes into fewer prototypes with a soft view
//! selector. The pooled vectors of all levels are concatenated and mapped to
//! the shared embedding space by a small MLP head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{coarsen_positions, level_graph, CameraRig, ViewGraph, DEFAULT_K};
use crate::params::{init_weight, Bound, ParamStore};
use crate::tensor::{Matrix, Tape, Var};

pub const ENCODER_PREFIX: &str = "enc3d.";
pub const ADAPTER_PREFIX: &str = "ske.";

/// Variance floor of the node normalization inside the local convolution.
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

/// Which axis the normalization inside the local convolution standardizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Each feature column over the nodes of one shape.
    Nodes,
    /// Each node over its feature vector, with a per-feature affine.
    Features,
    /// No normalization; only the activation.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub out_dim: usize,
    /// Node count at each level, starting with the view count.
    pub schedule: Vec<usize>,
    pub k_neighbors: usize,
    pub leaky_slope: f64,
    pub local_gcn: bool,
    pub global_attention: bool,
    pub pooling: Pooling,
    pub norm: NormMode,
}

impl EncoderConfig {
    pub fn new(feature_dim: usize, out_dim: usize, views: usize) -> Self {
        EncoderConfig {
            feature_dim,
            out_dim,
            schedule: default_schedule(views),
            k_neighbors: DEFAULT_K,
            leaky_slope: 0.2,
            local_gcn: true,
            global_attention: true,
            pooling: Pooling::Max,
            norm: NormMode::Features,
        }
    }

    pub fn levels(&self) -> usize {
        self.schedule.len()
    }

    pub fn views(&self) -> usize {
        self.schedule[0]
    }

    pub fn selector_hidden(&self) -> usize {
        (self.feature_dim / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "feature width {} must be positive and even",
                self.feature_dim
            )));
        }
        if self.out_dim == 0 {
            return Err(Error::Config("output width must be positive".into()));
        }
        if self.schedule.is_empty() || self.schedule[0] == 0 {
            return Err(Error::Config("level schedule must start with a positive view count".into()));
        }
        if self.schedule.windows(2).any(|w| w[1] >= w[0] || w[1] == 0) {
            return Err(Error::Config(format!(
                "level schedule {:?} is not strictly decreasing",
                self.schedule
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Keeps only the first `levels` levels.
    pub fn truncated(mut self, levels: usize) -> Self {
        self.schedule.truncate(levels.max(1));
        self
    }

    fn level_name(l: usize, what: &str) -> String {
        format!("{ENCODER_PREFIX}l{l}.{what}")
    }

    /// Fresh parameters for this configuration.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let d = self.feature_dim;
        let h = self.selector_hidden();
        let mut p = ParamStore::new();
        for l in 0..self.levels() {
            p.insert(Self::level_name(l, "w_gcn"), init_weight(rng, d, d));
            p.insert(Self::level_name(l, "norm_gamma"), Matrix::filled(1, d, 1.0));
            p.insert(Self::level_name(l, "norm_beta"), Matrix::zeros(1, d));
            p.insert(Self::level_name(l, "w_q"), init_weight(rng, d, d / 2));
            p.insert(Self::level_name(l, "w_k"), init_weight(rng, d, d / 2));
            let mut wv = init_weight(rng, d, d);
            wv.scale_assign(0.5);
            p.insert(Self::level_name(l, "w_v"), wv);
            if l + 1 < self.levels() {
                let k = self.schedule[l + 1];
                p.insert(Self::level_name(l, "sel_w1"), init_weight(rng, d, h));
                p.insert(Self::level_name(l, "sel_b1"), Matrix::zeros(1, h));
                p.insert(Self::level_name(l, "sel_w2"), init_weight(rng, h, k));
            }
        }
        let concat = self.levels() * d;
        p.insert(format!("{ENCODER_PREFIX}head.w1"), init_weight(rng, concat, d));
        p.insert(format!("{ENCODER_PREFIX}head.b1"), Matrix::zeros(1, d));
        p.insert(format!("{ENCODER_PREFIX}head.w2"), init_weight(rng, d, self.out_dim));
        p.insert(format!("{ENCODER_PREFIX}head.b2"), Matrix::zeros(1, self.out_dim));
        Ok(p)
    }
}

/// Halving schedule from `views` down to no fewer than three nodes, at most
/// three levels: 12 → [12, 6, 3], 6 → [6, 3], 3 → [3], 1 → [1].
pub fn default_schedule(views: usize) -> Vec<usize> {
    let mut s = vec![views];
    while s.len() < 3 {
        let next = s[s.len() - 1] / 2;
        if next < 3 {
            break;
        }
        s.push(next);
    }
    s
}

/// View features of one shape with their cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub features: Matrix,
    pub rig: CameraRig,
}

impl ViewSet {
    pub fn new(features: Matrix, rig: CameraRig) -> Result<Self> {
        if features.rows() != rig.len() {
            return Err(Error::dim(
                "view_set",
                format!("{} feature rows for {} cameras", features.rows(), rig.len()),
            ));
        }
        Ok(ViewSet { features, rig })
    }

    /// Applies a view permutation to features and cameras together.
    pub fn permuted(&self, perm: &[usize]) -> ViewSet {
        ViewSet {
            features: self.features.select_rows(perm),
            rig: self.rig.permuted(perm),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeEmbedding {
    pub vector: Matrix,
    pub pooled: Vec<Matrix>,
}

/// Everything one encoder pass produced on the tape.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub embedding: Var,
    pub pooled: Vec<Var>,
    /// Node count entering each level.
    pub node_counts: Vec<usize>,
    /// Local, global and selector weight matrices, in evaluation order.
    pub attention: Vec<Var>,
    /// Post-attention node features of each level.
    pub level_features: Vec<Var>,
}

/// Row-stochastic attention over `neighbors(i) ∪ {i}` from scaled
/// dot-product similarity `f_i·f_j / sqrt(d)`.
pub fn local_attention_weights(tape: &mut Tape, features: Var, graph: &ViewGraph) -> Result<Var> {
    let (n, d) = tape.shape(features);
    if n != graph.node_count() {
        return Err(Error::dim(
            "local_attention_weights",
            format!("{n} feature rows for {} graph nodes", graph.node_count()),
        ));
    }
    let ft = tape.transpose(features)?;
    let sim = tape.matmul(features, ft)?;
    let sim = tape.scale(sim, 1.0 / (d as f64).sqrt())?;
    tape.masked_softmax_rows(sim, &graph.support_mask())
}

/// The nonlinearity applied after neighbourhood aggregation.
#[derive(Debug, Clone, Copy)]
pub enum Psi {
    /// Normalization then LeakyReLU.
    Full { norm: NormMode, slope: f64 },
    /// Skipped entirely (test fixture).
    Identity,
}

/// `Ψ(A F W)` with `A` from [`local_attention_weights`]. Returns the output
/// and the attention matrix.
pub fn local_gcn(
    tape: &mut Tape,
    features: Var,
    graph: &ViewGraph,
    weight: Var,
    gamma: Var,
    beta: Var,
    psi: Psi,
) -> Result<(Var, Var)> {
    let attn = local_attention_weights(tape, features, graph)?;
    let agg = tape.matmul(attn, features)?;
    let h = tape.matmul(agg, weight)?;
    let out = match psi {
        Psi::Identity => h,
        Psi::Full { norm, slope } => {
            let normed = normalize(tape, h, gamma, beta, norm)?;
            tape.leaky_relu(normed, slope)?
        }
    };
    Ok((out, attn))
}

fn normalize(tape: &mut Tape, h: Var, gamma: Var, beta: Var, mode: NormMode) -> Result<Var> {
    match mode {
        NormMode::Nodes => tape.feature_norm(h, gamma, beta, NORM_EPS),
        NormMode::Features => {
            let (n, _) = tape.shape(h);
            let ht = tape.transpose(h)?;
            let ones = tape.constant(Matrix::filled(1, n, 1.0));
            let zeros = tape.constant(Matrix::zeros(1, n));
            let std = tape.feature_norm(ht, ones, zeros, NORM_EPS)?;
            let std = tape.transpose(std)?;
            let col = tape.constant(Matrix::filled(n, 1, 1.0));
            let g = tape.matmul(col, gamma)?;
            let scaled = tape.mul(std, g)?;
            tape.add_row(scaled, beta)
        }
        NormMode::None => tape.add_row(h, beta),
    }
}

/// `F + softmax(Q Kᵀ / sqrt(d/2)) V` with `Q = F W_q`, `K = F W_k`,
/// `V = F W_v`. Returns the output and the attention matrix.
pub fn global_attention(tape: &mut Tape, features: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<(Var, Var)> {
    let d = tape.shape(features).1;
    if d % 2 != 0 {
        return Err(Error::dim("global_attention", format!("feature width {d} is odd")));
    }
    let q = tape.matmul(features, w_q)?;
    let k = tape.matmul(features, w_k)?;
    let v = tape.matmul(features, w_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / ((d / 2) as f64).sqrt())?;
    let attn = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(attn, v)?;
    Ok((tape.add(features, mixed)?, attn))
}

/// Selector MLP weights: `d → hidden → K` applied to every view. The output
/// layer has no bias: a per-prototype constant cancels in the softmax over
/// views.
#[derive(Debug, Clone, Copy)]
pub struct SelectorParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub slope: f64,
}

pub struct Selection {
    pub prototypes: Var,
    pub assignment: Var,
    pub rig: CameraRig,
}

/// Soft assignment of `V` views to `K` prototypes. Each view gets `K`
/// logits from the MLP; each prototype's row is a softmax over views.
pub fn view_selector(
    tape: &mut Tape,
    features: Var,
    rig: &CameraRig,
    params: SelectorParams,
    k_out: usize,
) -> Result<Selection> {
    let v = tape.shape(features).0;
    if k_out >= v || k_out == 0 {
        return Err(Error::Argument(format!(
            "selector must reduce {v} views to between 1 and {} prototypes, got {k_out}",
            v.saturating_sub(1)
        )));
    }
    if tape.shape(params.w2).1 != k_out {
        return Err(Error::dim(
            "view_selector",
            format!("selector emits {} logits, expected {k_out}", tape.shape(params.w2).1),
        ));
    }
    let h = tape.matmul(features, params.w1)?;
    let h = tape.add_row(h, params.b1)?;
    let h = tape.leaky_relu(h, params.slope)?;
    let logits = tape.matmul(h, params.w2)?;
    let per_prototype = tape.transpose(logits)?;
    let assignment = tape.softmax_rows(per_prototype)?;
    let prototypes = tape.matmul(assignment, features)?;
    let rig = coarsen_positions(tape.value(assignment), rig)?;
    Ok(Selection {
        prototypes,
        assignment,
        rig,
    })
}

/// Runs the full hierarchy on `features` (an `V x d` tape variable).
pub fn encode(
    tape: &mut Tape,
    config: &EncoderConfig,
    params: &Bound,
    features: Var,
    rig: &CameraRig,
) -> Result<EncoderTrace> {
    config.validate()?;
    let (v, d) = tape.shape(features);
    if v != config.views() || d != config.feature_dim || rig.len() != v {
        return Err(Error::dim(
            "encode",
            format!(
                "{v}x{d} features with {} cameras for a {}-view, width-{} encoder",
                rig.len(),
                config.views(),
                config.feature_dim
            ),
        ));
    }
    let name = EncoderConfig::level_name;
    let mut f = features;
    let mut positions = rig.clone();
    let mut trace = EncoderTrace {
        embedding: features,
        pooled: Vec::new(),
        node_counts: Vec::new(),
        attention: Vec::new(),
        level_features: Vec::new(),
    };
    for l in 0..config.levels() {
        let n = tape.shape(f).0;
        trace.node_counts.push(n);
        if config.local_gcn {
            let graph = level_graph(&positions, config.k_neighbors, l)?;
            let (out, attn) = local_gcn(
                tape,
                f,
                &graph,
                params.var(&name(l, "w_gcn"))?,
                params.var(&name(l, "norm_gamma"))?,
                params.var(&name(l, "norm_beta"))?,
                Psi::Full {
                    norm: config.norm,
                    slope: config.leaky_slope,
                },
            )?;
            f = out;
            trace.attention.push(attn);
        }
        if config.global_attention {
            let (out, attn) = global_attention(
                tape,
                f,
                params.var(&name(l, "w_q"))?,
                params.var(&name(l, "w_k"))?,
                params.var(&name(l, "w_v"))?,
            )?;
            f = out;
            trace.attention.push(attn);
        }
        trace.level_features.push(f);
        let pooled = match config.pooling {
            Pooling::Max => tape.max_over_rows(f)?,
            Pooling::Mean => tape.mean_over_rows(f)?,
        };
        trace.pooled.push(pooled);
        if l + 1 < config.levels() {
            let sel = view_selector(
                tape,
                f,
                &positions,
                SelectorParams {
                    w1: params.var(&name(l, "sel_w1"))?,
                    b1: params.var(&name(l, "sel_b1"))?,
                    w2: params.var(&name(l, "sel_w2"))?,
                    slope: config.leaky_slope,
                },
                config.schedule[l + 1],
            )?;
            f = sel.prototypes;
            positions = sel.rig;
            trace.attention.push(sel.assignment);
        }
    }
    let cat = tape.concat_cols(&trace.pooled)?;
    let h = tape.matmul(cat, params.var(&format!("{ENCODER_PREFIX}head.w1"))?)?;
    let h = tape.add_row(h, params.var(&format!("{ENCODER_PREFIX}head.b1"))?)?;
    let h = tape.leaky_relu(h, config.leaky_slope)?;
    let out = tape.matmul(h, params.var(&format!("{ENCODER_PREFIX}head.w2"))?)?;
    trace.embedding = tape.add_row(out, params.var(&format!("{ENCODER_PREFIX}head.b2"))?)?;
    Ok(trace)
}

/// Forward-only encoding with frozen parameters.
pub fn encode_shape(config: &EncoderConfig, params: &ParamStore, views: &ViewSet) -> Result<ShapeEmbedding> {
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape, |_| false);
    let f = tape.constant(views.features.clone());
    let trace = encode(&mut tape, config, &bound, f, &views.rig)?;
    Ok(ShapeEmbedding {
        vector: tape.value(trace.embedding).clone(),
        pooled: trace.pooled.iter().map(|&p| tape.value(p).clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub leaky_slope: f64,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("sketch adapter widths must be positive".into()));
        }
        Ok(())
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut p = ParamStore::new();
        p.insert(format!("{ADAPTER_PREFIX}w_skip"), init_weight(rng, self.in_dim, self.out_dim));
        p.insert(format!("{ADAPTER_PREFIX}w1"), init_weight(rng, self.in_dim, self.hidden));
        p.insert(format!("{ADAPTER_PREFIX}b1"), Matrix::zeros(1, self.hidden));
        p.insert(format!("{ADAPTER_PREFIX}w2"), init_weight(rng, self.hidden, self.out_dim));
        p.insert(format!("{ADAPTER_PREFIX}b2"), Matrix::zeros(1, self.out_dim));
        Ok(p)
    }
}

/// Trainable map from frozen sketch embeddings (`M x in_dim`, one row per
/// sketch) into the shared space:
/// `x W_skip + leaky(x W1 + b1) W2 + b2`.
pub fn sketch_adapter(tape: &mut Tape, config: &AdapterConfig, params: &Bound, input: Var) -> Result<Var> {
    let (_, w) = tape.shape(input);
    if w != config.in_dim {
        return Err(Error::Config(format!(
            "sketch embedding width {w} does not match adapter input width {}",
            config.in_dim
        )));
    }
    let skip = tape.matmul(input, params.var(&format!("{ADAPTER_PREFIX}w_skip"))?)?;
    let h = tape.matmul(input, params.var(&format!("{ADAPTER_PREFIX}w1"))?)?;
    let h = tape.add_row(h, params.var(&format!("{ADAPTER_PREFIX}b1"))?)?;
    let h = tape.leaky_relu(h, config.leaky_slope)?;
    let out = tape.matmul(h, params.var(&format!("{ADAPTER_PREFIX}w2"))?)?;
    let out = tape.add(skip, out)?;
    tape.add_row(out, params.var(&format!("{ADAPTER_PREFIX}b2"))?)
}

/// Forward-only adapter over a batch of sketch embeddings.
pub fn adapt_sketches(config: &AdapterConfig, params: &ParamStore, input: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape, |_| false);
    let x = tape.constant(input.clone());
    let y = sketch_adapter(&mut tape, config, &bound, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests;
