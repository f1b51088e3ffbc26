//! MVHF tensor archives.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "MVHF"  u16 version (= 1)
//! repeated until end of file:
//!     u16 name length, UTF-8 name
//!     u8 rank, rank x u32 dims
//!     f32 payload, row-major, product(dims) values
//! ```
//!
//! Two optional JSON sidecars sit next to the archive: `<file>.labels.json`
//! maps item ids (tensor names) to class names, and `<file>.manifest.json`
//! lists every tensor's name, shape and dtype plus free-form metadata.
//! Tensor names starting with `__` are auxiliary and never need a label.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MVHF";
pub const VERSION: u16 = 1;
pub const RESERVED_PREFIX: &str = "__";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_matrix(m: &Matrix) -> Tensor {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Rank-1 tensors become a single row; rank 2 maps directly.
    pub fn to_matrix(&self, name: &str, path: &Path) -> Result<Matrix> {
        let (rows, cols) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    path: path.to_path_buf(),
                    name: name.to_string(),
                    dims: self.dims.clone(),
                })
            }
        };
        Matrix::from_vec(rows, cols, self.data.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    /// Producer-specific metadata (model id, level schedule, ...).
    #[serde(default, flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Ordered named tensors with optional class labels and metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureArchive {
    tensors: Vec<(String, Tensor)>,
    pub labels: BTreeMap<String, String>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl FeatureArchive {
    pub fn new() -> Self {
        FeatureArchive::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Argument(format!("tensor name too long: {} bytes", name.len())));
        }
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::Argument(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.push(name, Tensor::from_matrix(m))
    }

    pub fn push_item(&mut self, id: impl Into<String>, m: &Matrix, class: impl Into<String>) -> Result<()> {
        let id = id.into();
        self.push(id.clone(), Tensor::from_matrix(m))?;
        self.labels.insert(id, class.into());
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Labelled items, in file order, excluding auxiliary tensors.
    pub fn items(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(RESERVED_PREFIX))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.dims.clone(),
                    dtype: "f32".into(),
                })
                .collect(),
            extra: self.metadata.clone(),
        }
    }

    /// Every item tensor has a label and every label names an item.
    pub fn validate_labels(&self, path: &Path) -> Result<()> {
        for (name, _) in self.items() {
            if !self.labels.contains_key(name) {
                return Err(Error::Unlabeled {
                    path: path.to_path_buf(),
                    item: name.to_string(),
                });
            }
        }
        for id in self.labels.keys() {
            if self.get(id).is_none() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("label for missing item `{id}`"),
                });
            }
        }
        Ok(())
    }
}

pub fn labels_path(path: &Path) -> PathBuf {
    sidecar(path, "labels.json")
}

pub fn manifest_path(path: &Path) -> PathBuf {
    sidecar(path, "manifest.json")
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn encode(archive: &FeatureArchive) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in &archive.tensors {
        let count: usize = t.dims.iter().product();
        if count != t.data.len() || t.dims.len() > u8::MAX as usize {
            return Err(Error::Argument(format!(
                "tensor `{name}` dims {:?} do not match {} values",
                t.dims,
                t.data.len()
            )));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                what: what(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<FeatureArchive> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader {
        buf: bytes,
        pos: 4,
        path,
    };
    let v = r.take(2, || "version".into())?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let mut archive = FeatureArchive::new();
    while !r.done() {
        let idx = archive.tensors.len();
        let l = r.take(2, || format!("name length of tensor #{idx}"))?;
        let len = u16::from_le_bytes([l[0], l[1]]) as usize;
        let name_bytes = r.take(len, || format!("name of tensor #{idx}"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Manifest {
                path: path.to_path_buf(),
                detail: format!("tensor #{idx} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.take(1, || format!("rank of `{name}`"))?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.take(4, || format!("dims of `{name}`"))?;
            dims.push(u32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::ShapeMismatch {
                path: path.to_path_buf(),
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let payload = r.take(count, || format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if archive.get(&name).is_some() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                detail: format!("duplicate tensor `{name}`"),
            });
        }
        archive.tensors.push((name, Tensor { dims, data }));
    }
    Ok(archive)
}

/// Writes the archive plus its manifest sidecar, and a labels sidecar when
/// the archive carries labels.
pub fn write_archive(path: impl AsRef<Path>, archive: &FeatureArchive) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(archive)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_json(&manifest_path(path), &archive.manifest())?;
    let lp = labels_path(path);
    if !archive.labels.is_empty() {
        write_json(&lp, &archive.labels)?;
    } else if lp.exists() {
        std::fs::remove_file(&lp).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(())
}

/// Reads an archive and whichever sidecars exist, checking the manifest
/// against the binary header.
pub fn read_archive(path: impl AsRef<Path>) -> Result<FeatureArchive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut archive = decode(&bytes, path)?;

    let mp = manifest_path(path);
    if mp.exists() {
        let manifest: Manifest = read_json(&mp)?;
        if manifest.tensors.len() != archive.tensors.len() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                detail: format!(
                    "manifest lists {} tensors, archive holds {}",
                    manifest.tensors.len(),
                    archive.tensors.len()
                ),
            });
        }
        for (entry, (name, t)) in manifest.tensors.iter().zip(&archive.tensors) {
            if entry.name != *name {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("manifest names `{}` where archive has `{name}`", entry.name),
                });
            }
            if entry.shape != t.dims {
                return Err(Error::ShapeMismatch {
                    path: path.to_path_buf(),
                    name: name.clone(),
                    dims: entry.shape.clone(),
                });
            }
            if entry.dtype != "f32" {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("unsupported dtype `{}` for `{name}`", entry.dtype),
                });
            }
        }
        archive.metadata = manifest.extra;
    }

    let lp = labels_path(path);
    if lp.exists() {
        archive.labels = read_json(&lp)?;
    }
    Ok(archive)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
