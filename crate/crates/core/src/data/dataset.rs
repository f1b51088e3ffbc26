//! Labelled shapes and sketches, their on-disk layout, and split protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ViewSet;
use crate::error::{Error, Result};
use crate::graph::{build_camera_rig, CameraRig};
use crate::losses::PrototypeBank;
use crate::tensor::Matrix;

use super::archive::{read_archive, write_archive, FeatureArchive};

pub const SHAPES_FILE: &str = "shapes.mvhf";
pub const SKETCHES_FILE: &str = "sketches.mvhf";
pub const PROTOTYPES_FILE: &str = "prototypes.mvhf";
/// Reserved tensor holding the camera positions of a shape archive.
pub const RIG_TENSOR: &str = "__rig";

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub id: String,
    pub class: usize,
    pub views: ViewSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub id: String,
    pub class: usize,
    /// 1 x d_in.
    pub embedding: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub shapes: Vec<Shape>,
    pub sketches: Vec<Sketch>,
    /// One prototype per entry of `classes`, in the same order.
    pub prototypes: PrototypeBank,
    pub rig: CameraRig,
}

impl Dataset {
    pub fn new(
        classes: Vec<String>,
        shapes: Vec<Shape>,
        sketches: Vec<Sketch>,
        prototypes: PrototypeBank,
        rig: CameraRig,
    ) -> Result<Self> {
        let ds = Dataset {
            classes,
            shapes,
            sketches,
            prototypes,
            rig,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if self.prototypes.labels() != self.classes.as_slice() {
            return Err(Error::Argument("prototype labels must list the classes in order".into()));
        }
        let dim = self.shapes.first().map(|s| s.views.features.cols());
        for s in &self.shapes {
            if s.class >= c {
                return Err(Error::Argument(format!("shape `{}` has class index {} of {c}", s.id, s.class)));
            }
            if Some(s.views.features.cols()) != dim {
                return Err(Error::dim("dataset", format!("shape `{}` has a different feature width", s.id)));
            }
        }
        let d_in = self.sketches.first().map(|s| s.embedding.cols());
        for s in &self.sketches {
            if s.class >= c {
                return Err(Error::Argument(format!("sketch `{}` has class index {} of {c}", s.id, s.class)));
            }
            if s.embedding.rows() != 1 || Some(s.embedding.cols()) != d_in {
                return Err(Error::dim("dataset", format!("sketch `{}` must be 1 x {}", s.id, d_in.unwrap_or(0))));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.shapes.first().map_or(0, |s| s.views.features.cols())
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketches.first().map_or(0, |s| s.embedding.cols())
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Argument(format!("unknown class `{name}`")))
    }

    /// Keeps only the first `n` cameras of every shape. Used by the view-count
    /// ablation.
    pub fn with_view_prefix(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.rig.len() {
            return Err(Error::Config(format!("view count must be in 1..={}, got {n}", self.rig.len())));
        }
        let keep: Vec<usize> = (0..n).collect();
        let rig = self.rig.permuted(&keep);
        let shapes = self
            .shapes
            .iter()
            .map(|s| Shape {
                id: s.id.clone(),
                class: s.class,
                views: ViewSet {
                    features: s.views.features.select_rows(&keep),
                    rig: s.views.rig.permuted(&keep),
                },
            })
            .collect();
        Dataset::new(self.classes.clone(), shapes, self.sketches.clone(), self.prototypes.clone(), rig)
    }

    /// Writes `shapes.mvhf`, `sketches.mvhf` and `prototypes.mvhf` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut shapes = FeatureArchive::new();
        for s in &self.shapes {
            shapes.push_item(&s.id, &s.views.features, &self.classes[s.class])?;
        }
        shapes.push_matrix(RIG_TENSOR, &self.rig.to_matrix())?;
        write_archive(dir.join(SHAPES_FILE), &shapes)?;

        let mut sketches = FeatureArchive::new();
        for s in &self.sketches {
            sketches.push_item(&s.id, &s.embedding, &self.classes[s.class])?;
        }
        write_archive(dir.join(SKETCHES_FILE), &sketches)?;
        write_archive(dir.join(PROTOTYPES_FILE), &self.prototypes.to_archive()?)
    }

    /// Reads a dataset directory. Shape archives without a rig tensor get the
    /// default ring rig for their view count.
    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let proto_path = dir.join(PROTOTYPES_FILE);
        let prototypes = PrototypeBank::from_archive(&read_archive(&proto_path)?, &proto_path)?;
        let classes = prototypes.labels().to_vec();
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let class_of = |archive: &FeatureArchive, id: &str, path: &Path| -> Result<usize> {
            let label = &archive.labels[id];
            index.get(label.as_str()).copied().ok_or_else(|| Error::Manifest {
                path: path.to_path_buf(),
                detail: format!("item `{id}` has class `{label}` with no prototype"),
            })
        };

        let shape_path = dir.join(SHAPES_FILE);
        let archive = read_archive(&shape_path)?;
        archive.validate_labels(&shape_path)?;
        let first_rows = archive.items().next().map(|(_, t)| t.dims.first().copied().unwrap_or(1));
        let rig = match archive.get(RIG_TENSOR) {
            Some(t) => CameraRig::from_matrix(&t.to_matrix(RIG_TENSOR, &shape_path)?)?,
            None => build_camera_rig(first_rows.unwrap_or(12))?,
        };
        let mut shapes = Vec::new();
        for (id, t) in archive.items() {
            let features = t.to_matrix(id, &shape_path)?;
            if features.rows() != rig.len() {
                return Err(Error::Manifest {
                    path: shape_path.clone(),
                    detail: format!("item `{id}` has {} views, the rig has {}", features.rows(), rig.len()),
                });
            }
            shapes.push(Shape {
                id: id.to_string(),
                class: class_of(&archive, id, &shape_path)?,
                views: ViewSet::new(features, rig.clone())?,
            });
        }

        let sketch_path = dir.join(SKETCHES_FILE);
        let archive = read_archive(&sketch_path)?;
        archive.validate_labels(&sketch_path)?;
        let mut sketches = Vec::new();
        for (id, t) in archive.items() {
            sketches.push(Sketch {
                id: id.to_string(),
                class: class_of(&archive, id, &sketch_path)?,
                embedding: t.to_matrix(id, &sketch_path)?,
            });
        }
        Dataset::new(classes, shapes, sketches, prototypes, rig)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SplitMode {
    Category,
    #[serde(rename = "zeroshot")]
    ZeroShot { unseen: Vec<String> },
}

impl SplitMode {
    /// Zero-shot split holding out the last `n` classes.
    pub fn zero_shot_last(ds: &Dataset, n: usize) -> Result<SplitMode> {
        if n == 0 || n >= ds.classes.len() {
            return Err(Error::Config(format!(
                "need between 1 and {} unseen classes, got {n}",
                ds.classes.len().saturating_sub(1)
            )));
        }
        Ok(SplitMode::ZeroShot {
            unseen: ds.classes[ds.classes.len() - n..].to_vec(),
        })
    }
}

/// Index lists into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub mode: SplitMode,
    pub train_shapes: Vec<usize>,
    pub train_sketches: Vec<usize>,
    /// Retrieval gallery.
    pub test_shapes: Vec<usize>,
    /// Retrieval queries.
    pub test_sketches: Vec<usize>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Shape share of the training split.
pub const TRAIN_SHAPE_FRACTION: (usize, usize) = (4, 5);
/// Sketch share of the training split.
pub const TRAIN_SKETCH_FRACTION: (usize, usize) = (3, 4);

fn by_class(classes: impl Iterator<Item = usize>, c: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); c];
    for (i, k) in classes.enumerate() {
        out[k].push(i);
    }
    out
}

/// Per class, the first `n * num / den` items of a seeded shuffle train and
/// the rest test. Both outputs are sorted.
fn split_groups(groups: &[Vec<usize>], frac: (usize, usize), rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for g in groups {
        let mut g = g.clone();
        g.shuffle(rng);
        let mut n = g.len() * frac.0 / frac.1;
        if g.len() >= 2 {
            n = n.clamp(1, g.len() - 1);
        }
        train.extend_from_slice(&g[..n]);
        test.extend_from_slice(&g[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Category mode: per class, 80% of shapes and 5/8 of sketches train, the
/// rest form the gallery and the queries. Zero-shot mode: every item of a
/// seen class trains; queries are the unseen-class sketches and the gallery
/// is every shape.
pub fn make_splits(ds: &Dataset, mode: &SplitMode, seed: u64) -> Result<Splits> {
    let c = ds.classes.len();
    let shape_groups = by_class(ds.shapes.iter().map(|s| s.class), c);
    let sketch_groups = by_class(ds.sketches.iter().map(|s| s.class), c);
    let splits = match mode {
        SplitMode::Category => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (train_shapes, test_shapes) = split_groups(&shape_groups, TRAIN_SHAPE_FRACTION, &mut rng);
            let (train_sketches, test_sketches) = split_groups(&sketch_groups, TRAIN_SKETCH_FRACTION, &mut rng);
            Splits {
                mode: mode.clone(),
                train_shapes,
                train_sketches,
                test_shapes,
                test_sketches,
                seen: (0..c).collect(),
                unseen: Vec::new(),
            }
        }
        SplitMode::ZeroShot { unseen } => {
            let mut held = BTreeSet::new();
            for name in unseen {
                if !held.insert(ds.class_index(name)?) {
                    return Err(Error::Config(format!("class `{name}` listed twice as unseen")));
                }
            }
            if held.is_empty() || held.len() >= c {
                return Err(Error::Config("zero-shot mode needs at least one seen and one unseen class".into()));
            }
            let seen: Vec<usize> = (0..c).filter(|k| !held.contains(k)).collect();
            let pick = |groups: &[Vec<usize>], keep: &dyn Fn(usize) -> bool| -> Vec<usize> {
                let mut v: Vec<usize> = (0..c).filter(|&k| keep(k)).flat_map(|k| groups[k].clone()).collect();
                v.sort_unstable();
                v
            };
            Splits {
                mode: mode.clone(),
                train_shapes: pick(&shape_groups, &|k| !held.contains(&k)),
                train_sketches: pick(&sketch_groups, &|k| !held.contains(&k)),
                test_shapes: (0..ds.shapes.len()).collect(),
                test_sketches: pick(&sketch_groups, &|k| held.contains(&k)),
                seen,
                unseen: held.into_iter().collect(),
            }
        }
    };
    splits.check(ds)?;
    Ok(splits)
}

impl Splits {
    /// Enforces the split contract: indices in range, train and test
    /// disjoint within a modality, and no unseen-class item in training.
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        let in_range = |v: &[usize], n: usize, what: &str| -> Result<()> {
            match v.iter().find(|&&i| i >= n) {
                Some(i) => Err(Error::Argument(format!("{what} index {i} out of range"))),
                None => Ok(()),
            }
        };
        in_range(&self.train_shapes, ds.shapes.len(), "shape")?;
        in_range(&self.test_shapes, ds.shapes.len(), "shape")?;
        in_range(&self.train_sketches, ds.sketches.len(), "sketch")?;
        in_range(&self.test_sketches, ds.sketches.len(), "sketch")?;

        let train: BTreeSet<usize> = self.train_sketches.iter().copied().collect();
        if self.test_sketches.iter().any(|i| train.contains(i)) {
            return Err(Error::Protocol("a query sketch is also a training sketch".into()));
        }
        if matches!(self.mode, SplitMode::Category) {
            let train: BTreeSet<usize> = self.train_shapes.iter().copied().collect();
            if self.test_shapes.iter().any(|i| train.contains(i)) {
                return Err(Error::Protocol("a gallery shape is also a training shape".into()));
            }
        }
        let unseen: BTreeSet<usize> = self.unseen.iter().copied().collect();
        if let Some(&i) = self.train_shapes.iter().find(|&&i| unseen.contains(&ds.shapes[i].class)) {
            return Err(Error::Protocol(format!("unseen-class shape `{}` in training", ds.shapes[i].id)));
        }
        if let Some(&i) = self.train_sketches.iter().find(|&&i| unseen.contains(&ds.sketches[i].class)) {
            return Err(Error::Protocol(format!("unseen-class sketch `{}` in training", ds.sketches[i].id)));
        }
        Ok(())
    }

    pub fn seen_names(&self, ds: &Dataset) -> Vec<String> {
        self.seen.iter().map(|&k| ds.classes[k].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthConfig};
    use crate::par::Execution;

    fn small() -> Dataset {
        let cfg = SynthConfig {
            classes: 4,
            shapes_per_class: 10,
            sketches_per_class: 8,
            views: 6,
            feature_dim: 16,
            sketch_dim: 12,
            prototype_dim: 8,
            ..SynthConfig::default()
        };
        generate(&cfg, Execution::Sequential).unwrap()
    }

    #[test]
    fn category_split_is_eighty_twenty() {
        let ds = small();
        let s = make_splits(&ds, &SplitMode::Category, 3).unwrap();
        for k in 0..4 {
            let train = s.train_shapes.iter().filter(|&&i| ds.shapes[i].class == k).count();
            let test = s.test_shapes.iter().filter(|&&i| ds.shapes[i].class == k).count();
            assert_eq!((train, test), (8, 2));
            let train = s.train_sketches.iter().filter(|&&i| ds.sketches[i].class == k).count();
            assert_eq!(train, 6);
        }
        assert_eq!(s, make_splits(&ds, &SplitMode::Category, 3).unwrap());
        assert_ne!(s, make_splits(&ds, &SplitMode::Category, 4).unwrap());
    }

    #[test]
    fn zero_shot_split_holds_out_unseen_classes() {
        let ds = small();
        let mode = SplitMode::zero_shot_last(&ds, 2).unwrap();
        let s = make_splits(&ds, &mode, 0).unwrap();
        assert_eq!(s.unseen, vec![2, 3]);
        assert_eq!(s.seen, vec![0, 1]);
        assert!(s.train_shapes.iter().all(|&i| ds.shapes[i].class < 2));
        assert!(s.train_sketches.iter().all(|&i| ds.sketches[i].class < 2));
        assert!(s.test_sketches.iter().all(|&i| ds.sketches[i].class >= 2));
        assert_eq!(s.test_shapes.len(), ds.shapes.len());
        assert_eq!(s.train_shapes.len(), 20);
    }

    #[test]
    fn leakage_is_rejected() {
        let ds = small();
        let mode = SplitMode::zero_shot_last(&ds, 1).unwrap();
        let mut s = make_splits(&ds, &mode, 0).unwrap();
        let leak = ds.shapes.iter().position(|x| x.class == 3).unwrap();
        s.train_shapes.push(leak);
        assert!(matches!(s.check(&ds), Err(Error::Protocol(_))));

        let mut s = make_splits(&ds, &SplitMode::Category, 0).unwrap();
        s.train_sketches.push(s.test_sketches[0]);
        assert!(matches!(s.check(&ds), Err(Error::Protocol(_))));
    }

    #[test]
    fn bad_unseen_lists_are_config_errors() {
        let ds = small();
        let all = SplitMode::ZeroShot { unseen: ds.classes.clone() };
        assert!(matches!(make_splits(&ds, &all, 0), Err(Error::Config(_))));
        let dup = SplitMode::ZeroShot {
            unseen: vec![ds.classes[0].clone(), ds.classes[0].clone()],
        };
        assert!(matches!(make_splits(&ds, &dup, 0), Err(Error::Config(_))));
        let unknown = SplitMode::ZeroShot { unseen: vec!["teapot".into()] };
        assert!(make_splits(&ds, &unknown, 0).is_err());
    }

    #[test]
    fn save_load_round_trip_is_f32_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.shapes.len(), ds.shapes.len());
        for (a, b) in back.shapes.iter().zip(&ds.shapes) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.class, b.class);
            let f32ed = b.views.features.map(|v| v as f32 as f64);
            assert_eq!(a.views.features, f32ed);
        }
        // A second save of the loaded data is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        let again = Dataset::load(dir2.path()).unwrap();
        assert_eq!(again, back);
        for f in [SHAPES_FILE, SKETCHES_FILE, PROTOTYPES_FILE] {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn view_prefix_truncates_every_shape() {
        let ds = small();
        let one = ds.with_view_prefix(1).unwrap();
        assert!(one.shapes.iter().all(|s| s.views.features.rows() == 1));
        assert_eq!(one.rig.len(), 1);
        assert!(ds.with_view_prefix(0).is_err());
        assert!(ds.with_view_prefix(7).is_err());
    }
}
