//! A desk-scale visual language: each "image" is a handful of objects drawn
//! from a fixed set of classes, each object a noisy copy of its class
//! prototype, and the caption lists the classes in detection order.
//!
//! Repeated classes collapse into a count word ("two dogs"), so a correct
//! caption depends on every object in the sequence and on their order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ObjectSequence;
use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Class names, chosen to pluralize with a plain "s".
pub const CLASS_NAMES: [&str; 16] = [
    "dog", "cat", "bird", "horse", "cow", "car", "boat", "train", "plane", "bike", "kite", "chair", "cup", "ball",
    "tree", "clock",
];

const COUNT_WORDS: [&str; 9] = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            feature_dim: 16,
            noise_std: 0.1,
            max_objects: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        if self.max_objects == 0 || self.max_objects > COUNT_WORDS.len() + 1 {
            return Err(Error::Config(format!(
                "max_objects must be in 1..={}, got {}",
                COUNT_WORDS.len() + 1,
                self.max_objects
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExample {
    pub id: String,
    pub objects: ObjectSequence,
    /// Class of each object, in sequence order.
    pub classes: Vec<usize>,
    pub caption: String,
}

/// Caption for objects of the given classes, in detection order: classes in
/// order of first appearance, "a <name>" for singletons and
/// "<count> <name>s" for repeats, joined by "and".
pub fn caption_for_classes(classes: &[usize]) -> String {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for &c in classes {
        match groups.iter_mut().find(|(k, _)| *k == c) {
            Some((_, n)) => *n += 1,
            None => groups.push((c, 1)),
        }
    }
    groups
        .iter()
        .map(|&(c, n)| {
            if n == 1 {
                format!("a {}", CLASS_NAMES[c])
            } else {
                format!("{} {}s", COUNT_WORDS[n - 2], CLASS_NAMES[c])
            }
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Draws `count` examples. The same spec always yields the same data.
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Vec<SyntheticExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vector> = (0..spec.num_classes)
        .map(|_| (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let k = rng.gen_range(1..=spec.max_objects);
        let classes: Vec<usize> = (0..k).map(|_| rng.gen_range(0..spec.num_classes)).collect();
        let objects: Vec<Vector> = classes
            .iter()
            .map(|&c| prototypes[c].iter().map(|p| p + noise.sample(&mut rng)).collect())
            .collect();
        let mut global = vec![0.0; spec.feature_dim];
        for o in &objects {
            for (g, x) in global.iter_mut().zip(o) {
                *g += x;
            }
        }
        global.iter_mut().for_each(|g| *g /= k as f64);
        out.push(SyntheticExample {
            id: format!("syn{n:06}"),
            caption: caption_for_classes(&classes),
            objects: ObjectSequence::with_global(objects, global)?,
            classes,
        });
    }
    Ok(out)
}
