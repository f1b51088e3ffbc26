//! Deterministic synthetic shapes, view descriptors, sketches and prototypes.
//!
//! A shape is a point sample of a deformed primitive. Each camera sees a
//! 52-bin descriptor (36 angular bins of silhouette radius and a 16-bin depth
//! histogram) that is mapped to `d` dimensions by a seeded Gaussian matrix.
//! A sketch is one noisy view descriptor under a second map.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::ViewSet;
use crate::error::{Error, Result};
use crate::graph::{build_camera_rig, CameraRig};
use crate::losses::PrototypeBank;
use crate::par::{self, Execution};
use crate::tensor::Matrix;

use super::dataset::{Dataset, Shape, Sketch};

pub const POINTS_PER_SHAPE: usize = 1024;
pub const RADIAL_BINS: usize = 36;
pub const DEPTH_BINS: usize = 16;
pub const DESCRIPTOR_LEN: usize = RADIAL_BINS + DEPTH_BINS;

/// Largest class count the generator can produce.
pub const MAX_CLASSES: usize = 2 * Primitive::ALL.len();

/// Half-width of the per-axis scale jitter.
const ANISOTROPY: f64 = 0.05;
const RADIAL_CENTER: f64 = 0.5;
const DEPTH_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Ellipsoid,
    Prism,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Sphere,
        Primitive::Box,
        Primitive::Cylinder,
        Primitive::Cone,
        Primitive::Torus,
        Primitive::Pyramid,
        Primitive::Ellipsoid,
        Primitive::Prism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
            Primitive::Pyramid => "pyramid",
            Primitive::Ellipsoid => "ellipsoid",
            Primitive::Prism => "prism",
        }
    }
}

/// Class `c` is primitive `c mod 8`; classes 8..16 are the same primitives
/// stretched 1.6x along one horizontal axis.
pub fn class_spec(class: usize) -> Result<(Primitive, bool, String)> {
    if class >= MAX_CLASSES {
        return Err(Error::Argument(format!(
            "the synthetic generator supports at most {MAX_CLASSES} classes"
        )));
    }
    let kind = Primitive::ALL[class % Primitive::ALL.len()];
    let stretched = class >= Primitive::ALL.len();
    let name = if stretched {
        format!("{}-long", kind.name())
    } else {
        kind.name().to_string()
    };
    Ok((kind, stretched, name))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShape {
    pub class_id: usize,
    pub kind: Primitive,
    /// Centred points inside the unit ball.
    pub points: Vec<[f64; 3]>,
    pub seed: u64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

type Triangle = [[f64; 3]; 3];

fn triangle_area(t: &Triangle) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

/// Uniform sample on a triangle mesh surface.
fn sample_mesh<R: Rng>(rng: &mut R, tris: &[Triangle], n: usize) -> Vec<[f64; 3]> {
    let areas: Vec<f64> = tris.iter().map(triangle_area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut k = 0;
            while k + 1 < tris.len() && pick >= areas[k] {
                pick -= areas[k];
                k += 1;
            }
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let t = &tris[k];
            let e1 = sub(t[1], t[0]);
            let e2 = sub(t[2], t[0]);
            [
                t[0][0] + u * e1[0] + v * e2[0],
                t[0][1] + u * e1[1] + v * e2[1],
                t[0][2] + u * e1[2] + v * e2[2],
            ]
        })
        .collect()
}

fn quad(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> [Triangle; 2] {
    [[a, b, c], [a, c, d]]
}

fn box_mesh(hx: f64, hy: f64, hz: f64) -> Vec<Triangle> {
    let p = |x: f64, y: f64, z: f64| [x * hx, y * hy, z * hz];
    let mut t = Vec::new();
    for s in [-1.0, 1.0] {
        t.extend(quad(p(s, -1.0, -1.0), p(s, 1.0, -1.0), p(s, 1.0, 1.0), p(s, -1.0, 1.0)));
        t.extend(quad(p(-1.0, s, -1.0), p(1.0, s, -1.0), p(1.0, s, 1.0), p(-1.0, s, 1.0)));
        t.extend(quad(p(-1.0, -1.0, s), p(1.0, -1.0, s), p(1.0, 1.0, s), p(-1.0, 1.0, s)));
    }
    t
}

fn pyramid_mesh(half: f64, height: f64) -> Vec<Triangle> {
    let b = [
        [-half, -half, 0.0],
        [half, -half, 0.0],
        [half, half, 0.0],
        [-half, half, 0.0],
    ];
    let apex = [0.0, 0.0, height];
    let mut t: Vec<Triangle> = (0..4).map(|i| [b[i], b[(i + 1) % 4], apex]).collect();
    t.extend(quad(b[0], b[1], b[2], b[3]));
    t
}

fn prism_mesh(radius: f64, half_len: f64) -> Vec<Triangle> {
    let tri: Vec<[f64; 2]> = (0..3)
        .map(|i| {
            let a = PI / 2.0 + TAU * i as f64 / 3.0;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect();
    let p = |z: f64, k: usize| [tri[k][0], tri[k][1], z];
    let mut t = vec![
        [p(-half_len, 0), p(-half_len, 1), p(-half_len, 2)],
        [p(half_len, 0), p(half_len, 1), p(half_len, 2)],
    ];
    for k in 0..3 {
        let j = (k + 1) % 3;
        t.extend(quad(p(-half_len, k), p(-half_len, j), p(half_len, j), p(half_len, k)));
    }
    t
}

fn unit_gaussian<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n > 1e-12 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Points on the canonical (undeformed) primitive, z up.
fn canonical_points<R: Rng>(rng: &mut R, kind: Primitive, n: usize) -> Vec<[f64; 3]> {
    match kind {
        Primitive::Sphere => (0..n).map(|_| unit_gaussian(rng)).collect(),
        Primitive::Ellipsoid => (0..n)
            .map(|_| {
                let u = unit_gaussian(rng);
                [0.45 * u[0], 0.45 * u[1], u[2]]
            })
            .collect(),
        Primitive::Box => sample_mesh(rng, &box_mesh(1.0, 1.0, 0.4), n),
        Primitive::Pyramid => sample_mesh(rng, &pyramid_mesh(0.5, 1.6), n),
        Primitive::Prism => sample_mesh(rng, &prism_mesh(1.0, 0.3), n),
        Primitive::Cylinder => {
            let (r, h) = (0.5, 1.0);
            let side = TAU * r * 2.0 * h;
            let caps = 2.0 * PI * r * r;
            (0..n)
                .map(|_| {
                    let a = rng.random_range(0.0..TAU);
                    if rng.random_range(0.0..side + caps) < side {
                        [r * a.cos(), r * a.sin(), rng.random_range(-h..h)]
                    } else {
                        let rr = r * rng.random::<f64>().sqrt();
                        let z = if rng.random::<bool>() { h } else { -h };
                        [rr * a.cos(), rr * a.sin(), z]
                    }
                })
                .collect()
        }
        Primitive::Cone => {
            let (r, h): (f64, f64) = (1.0, 0.9);
            let slant = (r * r + h * h).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            (0..n)
                .map(|_| {
                    let a = rng.random_range(0.0..TAU);
                    if rng.random_range(0.0..lateral + base) < lateral {
                        // Distance from the apex is distributed like sqrt(u).
                        let s = rng.random::<f64>().sqrt();
                        [s * r * a.cos(), s * r * a.sin(), h * (1.0 - s)]
                    } else {
                        let rr = r * rng.random::<f64>().sqrt();
                        [rr * a.cos(), rr * a.sin(), 0.0]
                    }
                })
                .collect()
        }
        Primitive::Torus => {
            let (big, small) = (0.7, 0.25);
            let mut pts = Vec::with_capacity(n);
            while pts.len() < n {
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                // Area element is proportional to R + r cos v.
                if rng.random_range(0.0..big + small) <= big + small * v.cos() {
                    let w = big + small * v.cos();
                    pts.push([w * u.cos(), w * u.sin(), small * v.sin()]);
                }
            }
            pts
        }
    }
}

fn rotate_z(p: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

fn rotate_x(p: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

/// One deformed instance: random anisotropic scale in [0.95, 1.05], yaw in
/// [0, 2π), tilt within ±10°, then centred and scaled into the unit ball.
pub fn sample_shape(class_id: usize, seed: u64) -> Result<SyntheticShape> {
    let (kind, stretched, _) = class_spec(class_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = canonical_points(&mut rng, kind, POINTS_PER_SHAPE);
    let mut s = [0.0; 3];
    for v in &mut s {
        *v = rng.random_range(1.0 - ANISOTROPY..=1.0 + ANISOTROPY);
    }
    if stretched {
        s[0] *= 1.6;
    }
    let yaw = rng.random_range(0.0..TAU);
    let tilt = rng.random_range(-10f64..10.0).to_radians();
    for p in &mut pts {
        *p = [p[0] * s[0], p[1] * s[1], p[2] * s[2]];
        *p = rotate_x(rotate_z(*p, yaw), tilt);
    }
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let mut r: f64 = 0.0;
    for p in &mut pts {
        *p = sub(*p, c);
        r = r.max(norm(*p));
    }
    for p in &mut pts {
        *p = scale(*p, 1.0 / r);
    }
    Ok(SyntheticShape {
        class_id,
        kind,
        points: pts,
        seed,
    })
}

/// Image-plane basis `(right, up)` for a camera at `dir` looking at the
/// origin, with world z as the up hint.
fn image_basis(dir: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let hint = if dir[2].abs() > 0.999 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let up = sub(hint, scale(dir, dot(hint, dir)));
    let up = scale(up, 1.0 / norm(up));
    (cross(up, dir), up)
}

/// Raw 52-bin descriptor of the points seen from `dir` (a unit vector):
/// per angular bin the largest projected radius, then the fraction of
/// points in each depth bin over [-1, 1].
pub fn raw_descriptor(points: &[[f64; 3]], dir: [f64; 3]) -> [f64; DESCRIPTOR_LEN] {
    let (right, up) = image_basis(dir);
    let mut out = [0.0f64; DESCRIPTOR_LEN];
    let w = 1.0 / points.len() as f64;
    for &p in points {
        let x = dot(p, right);
        let y = dot(p, up);
        let rho = (x * x + y * y).sqrt();
        let a = (y.atan2(x) + PI) / TAU;
        let bin = ((a * RADIAL_BINS as f64) as usize).min(RADIAL_BINS - 1);
        out[bin] = out[bin].max(rho);
        let depth = ((dot(p, dir) + 1.0) / 2.0).clamp(0.0, 1.0);
        let d = ((depth * DEPTH_BINS as f64) as usize).min(DEPTH_BINS - 1);
        out[RADIAL_BINS + d] += w;
    }
    out
}

/// Centres a raw descriptor so that a featureless view is near zero.
pub fn center_descriptor(raw: &[f64; DESCRIPTOR_LEN]) -> [f64; DESCRIPTOR_LEN] {
    let mut out = *raw;
    for v in &mut out[..RADIAL_BINS] {
        *v -= RADIAL_CENTER;
    }
    for v in &mut out[RADIAL_BINS..] {
        *v = DEPTH_SCALE * *v - DEPTH_SCALE / DEPTH_BINS as f64;
    }
    out
}

/// Fixed linear map from descriptors to features.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    map: Matrix,
}

impl Embedder {
    /// `DESCRIPTOR_LEN x dim` Gaussian with variance `1 / DESCRIPTOR_LEN`.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("embedding width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (DESCRIPTOR_LEN as f64).sqrt()).expect("positive std");
        let data = (0..DESCRIPTOR_LEN * dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Embedder {
            map: Matrix::from_vec(DESCRIPTOR_LEN, dim, data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.cols()
    }

    pub fn embed(&self, descriptor: &[f64; DESCRIPTOR_LEN]) -> Matrix {
        Matrix::row_vector(descriptor)
            .matmul(&self.map)
            .expect("descriptor width matches the map")
    }
}

/// Seeds of the two shared maps.
fn view_map_seed(seed: u64) -> u64 {
    derive_seed(seed, 1, 0)
}

fn sketch_map_seed(seed: u64) -> u64 {
    derive_seed(seed, 2, 0)
}

/// View features of `shape` under every camera of `rig`.
pub fn views_with(shape: &SyntheticShape, rig: &CameraRig, embedder: &Embedder) -> Result<ViewSet> {
    let rows: Vec<Matrix> = rig
        .positions()
        .iter()
        .map(|&dir| embedder.embed(&center_descriptor(&raw_descriptor(&shape.points, dir))))
        .collect();
    let refs: Vec<&Matrix> = rows.iter().collect();
    ViewSet::new(Matrix::vstack(&refs)?, rig.clone())
}

/// View features of `shape` with the dataset-wide map derived from `seed`.
pub fn synth_views(shape: &SyntheticShape, rig: &CameraRig, d: usize, seed: u64) -> Result<ViewSet> {
    if d < 8 {
        return Err(Error::Argument(format!("feature width must be at least 8, got {d}")));
    }
    views_with(shape, rig, &Embedder::new(d, view_map_seed(seed))?)
}

/// A sketch: the descriptor of one random camera of `rig` with a `noise`
/// fraction of its bins dropped and Gaussian noise of std `0.1 * noise`.
pub fn sketch_with(shape: &SyntheticShape, rig: &CameraRig, embedder: &Embedder, noise: f64, seed: u64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Argument(format!("sketch noise must be in [0, 1], got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = rng.random_range(0..rig.len());
    let mut desc = center_descriptor(&raw_descriptor(&shape.points, rig.position(cam)));
    // A dropped bin carries no information, so it sits at the centre value.
    for v in desc.iter_mut() {
        if rng.random::<f64>() < noise {
            *v = 0.0;
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, 0.1 * noise).expect("positive std");
        for v in desc.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(embedder.embed(&desc))
}

pub fn synth_sketch(shape: &SyntheticShape, rig: &CameraRig, d_in: usize, noise: f64, seed: u64) -> Result<Matrix> {
    let embedder = Embedder::new(d_in, sketch_map_seed(seed))?;
    sketch_with(shape, rig, &embedder, noise, derive_seed(seed, 3, 0))
}

/// Seeded Gaussian rows, Gram-Schmidt orthonormalized.
pub fn synth_prototypes(classes: &[String], d_p: usize, seed: u64) -> Result<PrototypeBank> {
    let c = classes.len();
    if c > d_p {
        return Err(Error::Argument(format!(
            "cannot orthonormalize {c} prototypes in {d_p} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    while rows.len() < c {
        let mut v: Vec<f64> = (0..d_p).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Two passes of modified Gram-Schmidt keep the dot products at
        // rounding level.
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    PrototypeBank::new(classes.to_vec(), Matrix::from_rows(&rows)?)
}

/// Everything the generator needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub shapes_per_class: usize,
    pub sketches_per_class: usize,
    pub views: usize,
    pub feature_dim: usize,
    pub sketch_dim: usize,
    pub prototype_dim: usize,
    pub sketch_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 8,
            shapes_per_class: 30,
            sketches_per_class: 20,
            views: 12,
            feature_dim: 64,
            sketch_dim: 64,
            prototype_dim: 32,
            sketch_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return bad(format!("classes must be in 2..={MAX_CLASSES}, got {}", self.classes));
        }
        if self.shapes_per_class == 0 || self.sketches_per_class == 0 || self.views == 0 {
            return bad("shape, sketch and view counts must be positive".into());
        }
        if self.feature_dim < 8 || self.feature_dim % 2 != 0 {
            return bad(format!("feature_dim must be even and >= 8, got {}", self.feature_dim));
        }
        if self.sketch_dim == 0 {
            return bad("sketch_dim must be positive".into());
        }
        if self.prototype_dim < self.classes {
            return bad(format!(
                "prototype_dim {} cannot hold {} orthonormal prototypes",
                self.prototype_dim, self.classes
            ));
        }
        if !(0.0..=1.0).contains(&self.sketch_noise) {
            return bad(format!("sketch_noise must be in [0, 1], got {}", self.sketch_noise));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Result<Vec<String>> {
        (0..self.classes).map(|c| Ok(class_spec(c)?.2)).collect()
    }
}

/// The full synthetic dataset, a pure function of the configuration.
pub fn generate(cfg: &SynthConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    let names = cfg.class_names()?;
    let rig = build_camera_rig(cfg.views)?;
    let view_map = Embedder::new(cfg.feature_dim, view_map_seed(cfg.seed))?;
    let sketch_map = Embedder::new(cfg.sketch_dim, sketch_map_seed(cfg.seed))?;

    let n_shapes = cfg.classes * cfg.shapes_per_class;
    let shapes = par::try_map_indexed(exec, n_shapes, |i| -> Result<Shape> {
        let class = i / cfg.shapes_per_class;
        let shape = sample_shape(class, derive_seed(cfg.seed, 10, i as u64))?;
        Ok(Shape {
            id: format!("shape-{i:05}"),
            class,
            views: views_with(&shape, &rig, &view_map)?,
        })
    })?;

    let n_sketches = cfg.classes * cfg.sketches_per_class;
    let sketches = par::try_map_indexed(exec, n_sketches, |i| -> Result<Sketch> {
        let class = i / cfg.sketches_per_class;
        // Sketches come from their own instances, never from gallery shapes.
        let shape = sample_shape(class, derive_seed(cfg.seed, 20, i as u64))?;
        Ok(Sketch {
            id: format!("sketch-{i:05}"),
            class,
            embedding: sketch_with(&shape, &rig, &sketch_map, cfg.sketch_noise, derive_seed(cfg.seed, 21, i as u64))?,
        })
    })?;

    let prototypes = synth_prototypes(&names, cfg.prototype_dim, derive_seed(cfg.seed, 30, 0))?;
    Dataset::new(names, shapes, sketches, prototypes, rig)
}
