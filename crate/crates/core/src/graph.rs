//! Camera rigs and k-nearest-neighbour view graphs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Elevation of the default camera ring above the equator.
pub const RING_ELEVATION_DEG: f64 = 30.0;
/// Default neighbourhood size before clamping to `N - 1`.
pub const DEFAULT_K: usize = 4;

/// Camera directions on the unit sphere, one per view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    positions: Vec<[f64; 3]>,
}

impl CameraRig {
    /// Normalizes every position onto the unit sphere.
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Argument("camera rig needs at least one position".into()));
        }
        let mut out = Vec::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            let n = norm(p);
            if !(n > 1e-9) || !n.is_finite() {
                return Err(Error::degenerate(
                    "camera_rig",
                    format!("position {i} has norm {n}"),
                ));
            }
            out.push([p[0] / n, p[1] / n, p[2] / n]);
        }
        for i in 0..out.len() {
            for j in 0..i {
                if distance(&out[i], &out[j]) < 1e-12 {
                    return Err(Error::Argument(format!(
                        "camera positions {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(CameraRig { positions: out })
    }

    /// Reads one `x y z` triple per non-empty line (`#` starts a comment).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut positions = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", lineno + 1),
                })?;
            if vals.len() != 3 {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected 3 values, got {}", lineno + 1, vals.len()),
                });
            }
            positions.push([vals[0], vals[1], vals[2]]);
        }
        CameraRig::new(positions)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text: String = self
            .positions
            .iter()
            .map(|p| format!("{:?} {:?} {:?}\n", p[0], p[1], p[2]))
            .collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i]
    }

    /// Reorders cameras so that new index `i` holds old camera `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> CameraRig {
        CameraRig {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self.positions.iter().flat_map(|p| p.iter().copied()).collect();
        Matrix::from_vec(self.len(), 3, data).expect("3 columns per camera")
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.cols() != 3 {
            return Err(Error::dim("camera_rig", format!("{} columns, expected 3", m.cols())));
        }
        CameraRig::new((0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2)]).collect())
    }
}

/// `count` cameras evenly spaced in azimuth on a ring at 30° elevation.
pub fn build_camera_rig(count: usize) -> Result<CameraRig> {
    if count == 0 {
        return Err(Error::Argument("view count must be at least 1".into()));
    }
    let el = RING_ELEVATION_DEG.to_radians();
    let positions = (0..count)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
        })
        .collect();
    CameraRig::new(positions)
}

/// Directed kNN graph over camera positions at one hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    pub level: usize,
    neighbors: Vec<Vec<usize>>,
    rig: CameraRig,
}

impl ViewGraph {
    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbours of `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    /// A graph with no edges; every node only attends to itself.
    pub fn isolated(rig: CameraRig, level: usize) -> ViewGraph {
        ViewGraph {
            level,
            neighbors: vec![Vec::new(); rig.len()],
            rig,
        }
    }

    /// Row-major `N x N` mask of `neighbors(i) ∪ {i}`.
    pub fn support_mask(&self) -> Vec<bool> {
        let n = self.node_count();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
            for &j in &self.neighbors[i] {
                mask[i * n + j] = true;
            }
        }
        mask
    }
}

/// Connects each camera to its `k` nearest others by chordal distance;
/// ties go to the lower index.
pub fn knn_edges(rig: &CameraRig, k: usize) -> Result<ViewGraph> {
    knn_edges_at_level(rig, k, 0)
}

pub fn knn_edges_at_level(rig: &CameraRig, k: usize, level: usize) -> Result<ViewGraph> {
    let n = rig.len();
    if k == 0 || k >= n {
        return Err(Error::Argument(format!(
            "k = {k} outside 1..={} for {n} cameras",
            n.saturating_sub(1)
        )));
    }
    let neighbors = (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (distance(&rig.positions[i], &rig.positions[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    Ok(ViewGraph {
        level,
        neighbors,
        rig: rig.clone(),
    })
}

/// Graph for a level with `k0` requested neighbours, clamped to `N - 1`.
pub fn level_graph(rig: &CameraRig, k0: usize, level: usize) -> Result<ViewGraph> {
    let k = k0.min(rig.len().saturating_sub(1));
    if k == 0 {
        Ok(ViewGraph::isolated(rig.clone(), level))
    } else {
        knn_edges_at_level(rig, k, level)
    }
}

/// Positions of coarsened nodes: `assign · positions` renormalized to the
/// unit sphere. `assign` is `K x V` with rows summing to one.
pub fn coarsen_positions(assign: &Matrix, rig: &CameraRig) -> Result<CameraRig> {
    if assign.cols() != rig.len() {
        return Err(Error::dim(
            "coarsen_positions",
            format!("{} assignment columns for {} cameras", assign.cols(), rig.len()),
        ));
    }
    let mut out = Vec::with_capacity(assign.rows());
    for r in 0..assign.rows() {
        let row = assign.row(r);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "assignment row {r} sums to {total}, expected 1"
            )));
        }
        let mut p = [0.0; 3];
        for (w, pos) in row.iter().zip(rig.positions()) {
            for d in 0..3 {
                p[d] += w * pos[d];
            }
        }
        let n = norm(&p);
        if n < 1e-9 {
            return Err(Error::degenerate(
                "coarsen_positions",
                format!("prototype {r} position has norm {n:.3e}"),
            ));
        }
        out.push([p[0] / n, p[1] / n, p[2] / n]);
    }
    // Distinct soft assignments can land on the same direction; keep the
    // rig usable for kNN without the pairwise-distinct check.
    Ok(CameraRig { positions: out })
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
