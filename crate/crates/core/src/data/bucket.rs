use serde::{Deserialize, Serialize};

use super::vocab::{END, PAD, START};
use super::{Example, ObjectSequence};
use crate::error::{Error, Result};
use crate::numerics::Vector;

/// A `(max_objects, max_tokens)` shape class. Token counts include START
/// and END; object counts include the global feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub max_objects: usize,
    pub max_tokens: usize,
}

impl Bucket {
    pub const fn new(max_objects: usize, max_tokens: usize) -> Self {
        Self {
            max_objects,
            max_tokens,
        }
    }

    pub fn fits(&self, objects: usize, tokens: usize) -> bool {
        objects <= self.max_objects && tokens <= self.max_tokens
    }
}

pub const DEFAULT_BUCKETS: [Bucket; 4] = [
    Bucket::new(2, 10),
    Bucket::new(4, 15),
    Bucket::new(6, 20),
    Bucket::new(8, 30),
];

/// Buckets strictly increasing in both dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Bucket>", into = "Vec<Bucket>")]
pub struct BucketSet(Vec<Bucket>);

impl TryFrom<Vec<Bucket>> for BucketSet {
    type Error = Error;

    fn try_from(v: Vec<Bucket>) -> Result<Self> {
        BucketSet::new(v)
    }
}

impl From<BucketSet> for Vec<Bucket> {
    fn from(b: BucketSet) -> Self {
        b.0
    }
}

impl Default for BucketSet {
    fn default() -> Self {
        Self(DEFAULT_BUCKETS.to_vec())
    }
}

/// Where an example lands, after any truncation to the largest bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub index: usize,
    pub bucket: Bucket,
    pub object_count: usize,
    pub token_count: usize,
    pub truncated: bool,
}

impl BucketSet {
    pub fn new(buckets: Vec<Bucket>) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::Config("at least one bucket is required".into()));
        }
        if buckets.iter().any(|b| b.max_objects == 0 || b.max_tokens < 2) {
            return Err(Error::Config("buckets need ≥ 1 object and ≥ 2 tokens".into()));
        }
        for w in buckets.windows(2) {
            if w[1].max_objects <= w[0].max_objects || w[1].max_tokens <= w[0].max_tokens {
                return Err(Error::Config(format!(
                    "buckets must be strictly increasing: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self(buckets))
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.0
    }

    pub fn largest(&self) -> Bucket {
        *self.0.last().expect("non-empty by construction")
    }

    /// Assigns, truncates if the example exceeds the largest bucket, and pads.
    pub fn prepare(&self, example: &Example) -> Result<BatchExample> {
        let a = assign_bucket(self, example.objects.len(), example.caption.len() + 2)?;
        if a.truncated {
            let trimmed = truncate(example, a.object_count, a.token_count)?;
            pad_example(&trimmed, a.bucket)
        } else {
            pad_example(example, a.bucket)
        }
    }
}

/// First bucket (in configured order) holding both counts. Oversize inputs
/// are clipped to the largest bucket and flagged as truncated.
pub fn assign_bucket(buckets: &BucketSet, object_count: usize, token_count: usize) -> Result<Assignment> {
    if object_count == 0 || token_count < 2 {
        return Err(Error::Config(format!(
            "cannot bucket {object_count} objects / {token_count} tokens"
        )));
    }
    let largest = buckets.largest();
    let objects = object_count.min(largest.max_objects);
    let tokens = token_count.min(largest.max_tokens);
    let truncated = objects != object_count || tokens != token_count;
    if truncated {
        log::warn!("example with {object_count} objects / {token_count} tokens truncated to {objects} / {tokens}");
    }
    let (index, bucket) = buckets
        .0
        .iter()
        .enumerate()
        .find(|(_, b)| b.fits(objects, tokens))
        .map(|(i, b)| (i, *b))
        .expect("largest bucket always fits clipped counts");
    Ok(Assignment {
        index,
        bucket,
        object_count: objects,
        token_count: tokens,
        truncated,
    })
}

/// Keeps the highest-scored objects plus the global feature, and the
/// caption prefix that leaves room for START and END.
fn truncate(example: &Example, objects: usize, tokens: usize) -> Result<Example> {
    let seq = if example.objects.len() > objects {
        let kept = example.objects.objects()[..objects - 1].to_vec();
        ObjectSequence::with_global(kept, example.objects.global().clone())?
    } else {
        example.objects.clone()
    };
    let words = tokens.saturating_sub(2).min(example.caption.len());
    Ok(Example {
        id: example.id.clone(),
        objects: seq,
        caption: example.caption[..words].to_vec(),
    })
}

/// An example padded to its bucket's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchExample {
    /// Object features, zero vectors beyond `object_count`.
    pub objects: Vec<Vector>,
    /// START, words, END, then PAD up to the bucket length.
    pub tokens: Vec<usize>,
    pub object_count: usize,
    /// Real tokens including START and END.
    pub token_count: usize,
    pub bucket: Bucket,
}

impl BatchExample {
    /// Number of predicted positions (words plus END).
    pub fn target_len(&self) -> usize {
        self.token_count - 1
    }

    pub fn real_objects(&self) -> &[Vector] {
        &self.objects[..self.object_count]
    }

    pub fn real_tokens(&self) -> &[usize] {
        &self.tokens[..self.token_count]
    }

    /// Strips padding and START/END.
    pub fn unpad(&self) -> Result<(ObjectSequence, Vec<usize>)> {
        let objects = ObjectSequence::new(self.real_objects().to_vec())?;
        let words = self.tokens[1..self.token_count - 1].to_vec();
        Ok((objects, words))
    }
}

/// Pads `example` to exactly `bucket`'s dimensions.
pub fn pad_example(example: &Example, bucket: Bucket) -> Result<BatchExample> {
    let object_count = example.objects.len();
    let token_count = example.caption.len() + 2;
    if !bucket.fits(object_count, token_count) {
        return Err(Error::Config(format!(
            "example {} ({object_count} objects, {token_count} tokens) does not fit bucket {bucket:?}",
            example.id
        )));
    }
    let dim = example.objects.dim();
    let mut objects = example.objects.features().to_vec();
    objects.resize(bucket.max_objects, vec![0.0; dim]);
    let mut tokens = Vec::with_capacity(bucket.max_tokens);
    tokens.push(START);
    tokens.extend_from_slice(&example.caption);
    tokens.push(END);
    tokens.resize(bucket.max_tokens, PAD);
    Ok(BatchExample {
        objects,
        tokens,
        object_count,
        token_count,
        bucket,
    })
}
