//! Vocabulary, bucketing, the synthetic corpus and feature-file IO.

mod bucket;
mod io;
mod synthetic;
mod vocab;

pub use bucket::{assign_bucket, pad_example, Assignment, BatchExample, Bucket, BucketSet, DEFAULT_BUCKETS};
pub(crate) use io::write_atomic;
pub use io::{
    load_captions, load_dataset, load_features, write_captions, write_features, CaptionRecord, Dataset, FeatureRecord,
};
pub use synthetic::{caption_for_classes, generate_synthetic, SyntheticExample, SyntheticSpec, CLASS_NAMES};
pub use vocab::{build_vocabulary, tokenize, Vocabulary, END, PAD, START, UNK, UNK_TEXT};

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Object feature vectors in detection-score order, the global image
/// feature last.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSequence {
    features: Vec<Vector>,
}

impl ObjectSequence {
    pub fn new(features: Vec<Vector>) -> Result<Self> {
        let dim = features.first().ok_or(Error::Empty("object sequence"))?.len();
        if dim == 0 {
            return Err(Error::Empty("object feature vector"));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::Dimension {
                    op: "object sequence",
                    left: (0, dim),
                    right: (i, f.len()),
                });
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("object feature {i}")));
            }
        }
        Ok(Self { features })
    }

    /// Objects followed by the global feature.
    pub fn with_global(objects: Vec<Vector>, global: Vector) -> Result<Self> {
        let mut features = objects;
        features.push(global);
        Self::new(features)
    }

    pub fn features(&self) -> &[Vector] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn global(&self) -> &Vector {
        self.features.last().expect("non-empty by construction")
    }

    /// The detected objects without the trailing global feature.
    pub fn objects(&self) -> &[Vector] {
        &self.features[..self.features.len() - 1]
    }

    pub fn into_features(self) -> Vec<Vector> {
        self.features
    }
}

/// One training pair: an object sequence and its caption as word indices
/// (no START/END).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub objects: ObjectSequence,
    pub caption: Vec<usize>,
}

impl Example {
    pub fn encode(id: impl Into<String>, objects: ObjectSequence, caption: &str, vocab: &Vocabulary) -> Self {
        Self {
            id: id.into(),
            objects,
            caption: vocab.encode(caption),
        }
    }
}

/// Vocabulary over a set of caption strings.
pub fn caption_vocabulary<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Vocabulary> {
    let tokenized: Vec<Vec<&str>> = captions.iter().map(|c| tokenize(c.as_ref())).collect();
    build_vocabulary(&tokenized, min_count)
}

/// Encodes synthetic examples against `vocab`.
pub fn synthetic_examples(data: &[SyntheticExample], vocab: &Vocabulary) -> Vec<Example> {
    data.iter()
        .map(|e| Example::encode(e.id.clone(), e.objects.clone(), &e.caption, vocab))
        .collect()
}
