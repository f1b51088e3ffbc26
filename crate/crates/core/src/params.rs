//! Named parameter matrices and their binding onto a tape.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::data::archive::{read_archive, write_archive, FeatureArchive};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Matrix, Tape, Var};

/// Parameters keyed by dotted names (`enc3d.l0.w_gcn`), iterated in name
/// order so that every traversal is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// The parameters whose names start with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every parameter of `other` into `self`.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// SHA-256 over the names, shapes and exact bits of every parameter
    /// whose name starts with one of `prefixes` (all parameters if empty).
    pub fn fingerprint(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.params {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Puts every parameter on `tape`: as a gradient leaf when `trainable`
    /// accepts its name, as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, m)| {
                let v = if trainable(name) {
                    tape.leaf(m.clone())
                } else {
                    tape.constant(m.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for m in self.params.values_mut() {
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn to_archive(&self) -> Result<FeatureArchive> {
        let mut a = FeatureArchive::new();
        for (name, m) in &self.params {
            a.push_matrix(name.clone(), m)?;
        }
        Ok(a)
    }

    pub fn from_archive(archive: &FeatureArchive, path: &Path) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in archive.tensors() {
            store.insert(name.clone(), t.to_matrix(name, path)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: BTreeMap<String, serde_json::Value>) -> Result<()> {
        let mut a = self.to_archive()?;
        a.metadata = metadata;
        write_archive(path, &a)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, BTreeMap<String, serde_json::Value>)> {
        let path = path.as_ref();
        let a = read_archive(path)?;
        Ok((ParamStore::from_archive(&a, path)?, a.metadata))
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Gradients of every bound parameter that received one.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Gaussian initialization scaled by `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let std = 1.0 / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized")
}

/// Adds `src` into `dst`, key by key.
pub fn accumulate_grads(dst: &mut BTreeMap<String, Matrix>, src: BTreeMap<String, Matrix>) {
    for (k, g) in src {
        match dst.get_mut(&k) {
            Some(acc) => acc.add_assign(&g),
            None => {
                dst.insert(k, g);
            }
        }
    }
}
