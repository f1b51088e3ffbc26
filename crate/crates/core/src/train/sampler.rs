//! Quadruplet sampling: (anchor sketch, positive shape, negative shape,
//! negative sketch).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Row-aligned dataset indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadrupletBatch {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative_3d: Vec<usize>,
    pub negative_sketch: Vec<usize>,
}

impl QuadrupletBatch {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    /// Checks the class constraints of every row against `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let n = self.anchor.len();
        if [self.positive.len(), self.negative_3d.len(), self.negative_sketch.len()] != [n; 3] {
            return Err(Error::dim("quadruplets", "ragged batch"));
        }
        for i in 0..n {
            let a = ds.sketches[self.anchor[i]].class;
            let ok = ds.shapes[self.positive[i]].class == a
                && ds.shapes[self.negative_3d[i]].class != a
                && ds.sketches[self.negative_sketch[i]].class != a
                && self.negative_sketch[i] != self.anchor[i];
            if !ok {
                return Err(Error::Protocol(format!("quadruplet {i} violates the class constraints")));
            }
        }
        Ok(())
    }
}

/// Draws `count` quadruplets from the given shape and sketch pools. Anchors
/// are uniform over the sketch pool; positives and negatives are uniform
/// within their class constraint.
pub fn sample_quadruplets(ds: &Dataset, shapes: &[usize], sketches: &[usize], count: usize, seed: u64) -> Result<QuadrupletBatch> {
    if shapes.is_empty() || sketches.is_empty() {
        return Err(Error::Config("quadruplet sampling needs non-empty shape and sketch pools".into()));
    }
    let mut shapes_by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in shapes {
        shapes_by.entry(ds.shapes[i].class).or_default().push(i);
    }
    let mut sketch_classes: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in sketches {
        *sketch_classes.entry(ds.sketches[i].class).or_default() += 1;
        if !shapes_by.contains_key(&ds.sketches[i].class) {
            return Err(Error::Config(format!(
                "sketch `{}` has no shape of its class in the pool",
                ds.sketches[i].id
            )));
        }
    }
    if shapes_by.len() < 2 || sketch_classes.len() < 2 {
        return Err(Error::Config("quadruplets need at least two classes in each pool".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = QuadrupletBatch {
        anchor: Vec::with_capacity(count),
        positive: Vec::with_capacity(count),
        negative_3d: Vec::with_capacity(count),
        negative_sketch: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let a = sketches[rng.random_range(0..sketches.len())];
        let c = ds.sketches[a].class;
        let pos = &shapes_by[&c];
        batch.anchor.push(a);
        batch.positive.push(pos[rng.random_range(0..pos.len())]);
        // Rejection keeps the draw uniform over the other classes' items.
        batch.negative_3d.push(loop {
            let s = shapes[rng.random_range(0..shapes.len())];
            if ds.shapes[s].class != c {
                break s;
            }
        });
        batch.negative_sketch.push(loop {
            let s = sketches[rng.random_range(0..sketches.len())];
            if ds.sketches[s].class != c {
                break s;
            }
        });
    }
    Ok(batch)
}
