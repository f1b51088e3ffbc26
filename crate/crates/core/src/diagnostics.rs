//! Finite-difference gradient suite shared by the test-suite, the
//! acceptance harness and the `gradcheck` command.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{encode, AdapterConfig, EncoderConfig, sketch_adapter, ViewSet};
use crate::error::Result;
use crate::graph::build_camera_rig;
use crate::losses::{am_softmax_loss, quadruplet_loss, semantic_loss, AmSoftmax, PrototypeBank, Quadruplet, DEFAULT_MU, DEFAULT_TAU};
use crate::par::{self, Execution};
use crate::params::Bound;
use crate::tensor::{
    check_gradients, GradCheck, Matrix, Tape, Var, FD_ABS_TOLERANCE, FD_RESOLUTION, FD_STEP, FD_TOLERANCE,
    FEATURE_NORM_EPS,
};

/// Random matrix with entries uniform in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn weighted_sum(t: &mut Tape, x: Var, weights: &Matrix) -> Result<Var> {
    let k = t.constant(weights.clone());
    let y = t.mul(x, k)?;
    t.sum(y)
}

fn t_const(t: &mut Tape, m: &Matrix) -> Var {
    t.constant(m.clone())
}

type CaseFn = fn(&mut Tape, &[Var], &Matrix) -> Result<Var>;

/// One differentiable op reduced to a scalar through a random weighting.
#[derive(Clone, Copy)]
pub struct OpCase {
    pub name: &'static str,
    f: CaseFn,
}

impl OpCase {
    fn new(name: &'static str, f: CaseFn) -> Self {
        OpCase { name, f }
    }

    /// Two 4x5 inputs and the weighting drawn from `seed`; inputs in
    /// [-2, 2], weights in [-1, 1].
    pub fn check(&self, seed: u64) -> Result<GradCheck> {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = uniform(&mut rng, 4, 5, -2.0, 2.0);
        let b = uniform(&mut rng, 4, 5, -2.0, 2.0);
        let w = uniform(&mut rng, 4, 5, -1.0, 1.0);
        let f = self.f;
        check_gradients(self.name, &[a, b], FD_STEP, FD_TOLERANCE, |t, v| f(t, v, &w))
    }
}

/// Every differentiable tape op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::new("add", |t, v, w| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("sub", |t, v, w| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("mul", |t, v, w| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("scale", |t, v, w| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("add_scalar", |t, v, w| {
            let y = t.add_scalar(v[0], 0.3)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("transpose", |t, v, w| {
            let y = t.transpose(v[0])?;
            let y = t.transpose(y)?;
            let y = t.mul(y, v[1])?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("exp", |t, v, w| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("log", |t, v, w| {
            let y = t.mul(v[0], v[0])?;
            let y = t.add_scalar(y, 0.5)?;
            let y = t.log(y)?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("mean", |t, v, w| {
            let y = t.mul(v[0], v[1])?;
            let k = t_const(t, w);
            let y = t.mul(y, k)?;
            t.mean(y)
        }),
        OpCase::new("row_sums", |t, v, w| {
            let k = t_const(t, w);
            let y = t.mul(v[0], k)?;
            let y = t.row_sums(y)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }),
        OpCase::new("add_row", |t, v, w| {
            let r = t.gather_rows(v[1], &[0])?;
            let y = t.add_row(v[0], r)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("softmax_rows", |t, v, w| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("masked_softmax_rows", |t, v, w| {
            let (r, c) = t.shape(v[0]);
            let mask: Vec<bool> = (0..r * c).map(|i| i % c == i / c % c || i % 3 != 0).collect();
            let y = t.masked_softmax_rows(v[0], &mask)?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("row_l2_normalize", |t, v, w| {
            let y = t.row_l2_normalize(v[0])?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("leaky_relu", |t, v, w| {
            let y = t.leaky_relu(v[0], 0.2)?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("feature_norm", |t, v, w| {
            let gamma = t.gather_rows(v[1], &[0])?;
            let beta = t.gather_rows(v[1], &[1])?;
            let y = t.feature_norm(v[0], gamma, beta, FEATURE_NORM_EPS)?;
            weighted_sum(t, y, w)
        }),
        OpCase::new("max_over_rows", |t, v, w| {
            let y = t.max_over_rows(v[0])?;
            let wr = t.constant(Matrix::row_vector(w.row(0)));
            let y = t.mul(y, wr)?;
            t.sum(y)
        }),
        OpCase::new("mean_over_rows", |t, v, w| {
            let y = t.mean_over_rows(v[0])?;
            let y = t.mul(y, y)?;
            let wr = t.constant(Matrix::row_vector(w.row(0)));
            let y = t.mul(y, wr)?;
            t.sum(y)
        }),
        OpCase::new("concat_cols", |t, v, w| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            let y = t.mul(y, y)?;
            let y = t.row_sums(y)?;
            let first = t.gather_rows(y, &[0])?;
            let k = t_const(t, &Matrix::scalar(w.get(0, 0)));
            let y = t.mul(first, k)?;
            t.sum(y)
        }),
        OpCase::new("concat_rows", |t, v, w| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            let y = t.gather_rows(y, &[0, 4, 5])?;
            let k = t_const(t, &w.select_rows(&[0, 1, 2]));
            let y = t.mul(y, k)?;
            t.sum(y)
        }),
        OpCase::new("gather_rows", |t, v, w| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            let y = t.mul(y, y)?;
            let k = t_const(t, &w.select_rows(&[0, 1, 2, 3]));
            let y = t.mul(y, k)?;
            t.sum(y)
        }),
        OpCase::new("cross_entropy", |t, v, _| t.cross_entropy(v[0], &[1, 0, 4, 2])),
    ]
}

/// Semantic loss on one projected vector against a random 4-class bank.
pub fn semantic_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let labels = (0..4).map(|i| format!("c{i}")).collect();
    let bank = PrototypeBank::new(labels, uniform(&mut rng, 4, 8, -2.0, 2.0))?;
    let target = rng.random_range(0..4);
    let p = uniform(&mut rng, 1, 8, -2.0, 2.0);
    check_gradients("semantic_loss", &[p], FD_STEP, FD_TOLERANCE, |t, v| {
        let w = t.constant(bank.vectors().clone());
        semantic_loss(t, v[0], w, &[target], DEFAULT_TAU)
    })
}

/// AM-softmax on a 3-row batch with trainable classifier weights.
pub fn am_softmax_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let f = uniform(&mut rng, 3, 8, -2.0, 2.0);
    let w = uniform(&mut rng, 4, 8, -2.0, 2.0);
    check_gradients("am_softmax_loss", &[f, w], FD_STEP, FD_TOLERANCE, |t, v| {
        am_softmax_loss(t, v[0], v[1], &targets, AmSoftmax::default())
    })
}

/// Hinge arguments of a quadruplet batch, computed directly.
pub fn hinge_arguments(inputs: &[Matrix], mu: f64) -> Vec<f64> {
    let unit = |m: &Matrix, r: usize| {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row(r).iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut out = Vec::new();
    for r in 0..inputs[0].rows() {
        let a = unit(&inputs[0], r);
        let dap = d(&a, &unit(&inputs[1], r));
        out.push(mu + dap - d(&a, &unit(&inputs[2], r)));
        out.push(mu + dap - d(&a, &unit(&inputs[3], r)));
    }
    out
}

/// Quadruplet loss on 3 rows, resampled until every hinge argument is at
/// least 1e-3 away from its kink.
pub fn quadruplet_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
    let inputs = loop {
        let cand: Vec<Matrix> = (0..4).map(|_| uniform(&mut rng, 3, 8, -2.0, 2.0)).collect();
        if hinge_arguments(&cand, DEFAULT_MU).iter().all(|h| h.abs() >= 1e-3) {
            break cand;
        }
    };
    check_gradients("quadruplet_loss", &inputs, FD_STEP, FD_TOLERANCE, |t, v| {
        let q = Quadruplet {
            anchor: v[0],
            positive: v[1],
            negative_3d: v[2],
            negative_sketch: v[3],
        };
        quadruplet_loss(t, q, DEFAULT_MU)
    })
}

/// A random scalar projection of the full encoder output at d = 8, V = 6,
/// differentiated with respect to every parameter and the view features.
pub fn encoder_case(seed: u64, config: &EncoderConfig) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
    let params = config.init_params(&mut rng)?;
    let v = config.views();
    let features = uniform(&mut rng, v, config.feature_dim, -2.0, 2.0);
    let vs = ViewSet::new(features, build_camera_rig(v)?)?;
    let mix = uniform(&mut rng, 1, config.out_dim, -1.0, 1.0);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Matrix> = names.iter().map(|n| params.get(n).cloned()).collect::<Result<_>>()?;
    inputs.push(vs.features.clone());
    check_gradients("encode_shape", &inputs, FD_STEP, FD_TOLERANCE, |t, vars| {
        let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let trace = encode(t, config, &Bound::from_vars(map), vars[vars.len() - 1], &vs.rig)?;
        weighted_sum(t, trace.embedding, &mix)
    })
}

/// The sketch adapter on a 3-row batch, every parameter and the input.
pub fn adapter_case(seed: u64) -> Result<GradCheck> {
    let cfg = AdapterConfig {
        in_dim: 6,
        hidden: 5,
        out_dim: 4,
        leaky_slope: 0.2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
    let params = cfg.init_params(&mut rng)?;
    let x = uniform(&mut rng, 3, 6, -2.0, 2.0);
    let mix = uniform(&mut rng, 3, 4, -1.0, 1.0);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Matrix> = names.iter().map(|n| params.get(n).cloned()).collect::<Result<_>>()?;
    inputs.push(x);
    check_gradients("sketch_adapter", &inputs, FD_STEP, FD_TOLERANCE, |t, vars| {
        let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let y = sketch_adapter(t, &cfg, &Bound::from_vars(map), vars[vars.len() - 1])?;
        weighted_sum(t, y, &mix)
    })
}

/// The toy encoder used by the suite: d = 8, V = 6, schedule [6, 3].
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig::new(8, 8, 6)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteModule {
    Ops,
    Losses,
    Encoder,
}

/// Aggregate over seeds of one checked function.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub module: SuiteModule,
    pub name: String,
    pub seeds: usize,
    pub entries: usize,
    /// Worst `|a - fd| / (|fd| + 1e-8)` over every entry.
    pub max_rel_err: f64,
    /// Seeds with at least one entry over the relative tolerance.
    pub strict_failures: usize,
    /// Worst relative error among entries with `|fd| >= FD_RESOLUTION`.
    pub max_rel_resolved: f64,
    /// Worst absolute error among entries with `|fd| < FD_RESOLUTION`.
    pub max_abs_unresolved: f64,
}

impl SuiteRow {
    /// Relative criterion on resolved entries, absolute on the rest.
    pub fn passed(&self) -> bool {
        self.max_rel_resolved < FD_TOLERANCE && self.max_abs_unresolved < FD_ABS_TOLERANCE
    }

    /// Relative criterion on every entry.
    pub fn strict_passed(&self) -> bool {
        self.strict_failures == 0
    }
}

fn aggregate(module: SuiteModule, name: &str, checks: &[GradCheck]) -> SuiteRow {
    let mut row = SuiteRow {
        module,
        name: name.to_string(),
        seeds: checks.len(),
        entries: 0,
        max_rel_err: 0.0,
        strict_failures: 0,
        max_rel_resolved: 0.0,
        max_abs_unresolved: 0.0,
    };
    for c in checks {
        let (rel, abs) = c.split_at(FD_RESOLUTION);
        row.entries += c.entries.len();
        row.max_rel_err = row.max_rel_err.max(c.max_rel_err());
        row.max_rel_resolved = row.max_rel_resolved.max(rel);
        row.max_abs_unresolved = row.max_abs_unresolved.max(abs);
        if !c.passed() {
            row.strict_failures += 1;
        }
    }
    row
}

fn run_seeds(exec: Execution, seeds: usize, f: impl Fn(u64) -> Result<GradCheck> + Sync + Send) -> Result<Vec<GradCheck>> {
    par::try_map_indexed(exec, seeds, |s| f(s as u64))
}

/// Runs the selected parts of the suite over `seeds` seeds each.
pub fn gradient_suite(modules: &[SuiteModule], seeds: usize, exec: Execution) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for &m in modules {
        match m {
            SuiteModule::Ops => {
                for case in op_cases() {
                    let checks = run_seeds(exec, seeds, |s| case.check(s))?;
                    rows.push(aggregate(m, case.name, &checks));
                }
            }
            SuiteModule::Losses => {
                let fns: [(&str, fn(u64) -> Result<GradCheck>); 3] = [
                    ("semantic_loss", semantic_case),
                    ("am_softmax_loss", am_softmax_case),
                    ("quadruplet_loss", quadruplet_case),
                ];
                for (name, f) in fns {
                    let checks = run_seeds(exec, seeds, f)?;
                    rows.push(aggregate(m, name, &checks));
                }
            }
            SuiteModule::Encoder => {
                let cfg = toy_encoder();
                let checks = run_seeds(exec, seeds, |s| encoder_case(s, &cfg))?;
                rows.push(aggregate(m, "encode_shape", &checks));
                let checks = run_seeds(exec, seeds, adapter_case)?;
                rows.push(aggregate(m, "sketch_adapter", &checks));
            }
        }
    }
    Ok(rows)
}
