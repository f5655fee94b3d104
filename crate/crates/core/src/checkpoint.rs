//! Portable JSON checkpoints: named row-major tensors, the training
//! configuration, the vocabulary, the epoch and the RNG position.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Matrix, Parameters};
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    /// ChaCha word position, as a decimal string (it is a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model: &ModelParams, train: &TrainConfig, vocab: &Vocabulary, epoch: usize, rng: &ChaCha8Rng) -> Self {
        let params = model
            .parameters()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                values: p.value.as_slice().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            train: train.clone(),
            vocab: vocab.clone(),
            epoch,
            rng: RngState::capture(rng),
            params,
        }
    }

    /// Rebuilds the model, matching tensors by name and shape.
    pub fn to_model(&self) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut config = self.model.clone();
        let init = std::mem::replace(&mut config.init_scale, 0.0);
        let mut model = ModelParams::new(config, &mut rng)?;
        model.config.init_scale = init;
        let mut params = model.parameters_mut();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                self.params.len()
            )));
        }
        for t in &self.params {
            let p = params
                .iter_mut()
                .find(|p| p.name == t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", t.name)))?;
            if p.value.shape() != (t.shape[0], t.shape[1]) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    p.value.shape()
                )));
            }
            p.value = Matrix::from_vec(t.shape[0], t.shape[1], t.values.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported version {v}"))),
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, ObjectSequence, END, START};
    use crate::model::Variant;
    use rand::RngCore;

    fn fixture(variant: Variant) -> (ModelParams, Vocabulary, TrainConfig, ChaCha8Rng) {
        let vocab = build_vocabulary(&[vec!["a", "dog", "cat"]], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = ModelConfig::new(6, 3, vocab.len());
        cfg.variant = variant;
        let model = ModelParams::new(cfg, &mut rng).unwrap();
        rng.next_u64();
        (
            model,
            vocab,
            TrainConfig {
                hidden: 6,
                variant,
                ..Default::default()
            },
            rng,
        )
    }

    #[test]
    fn save_load_reproduces_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for variant in Variant::ALL {
            let (model, vocab, cfg, rng) = fixture(variant);
            let ck = Checkpoint::new(&model, &cfg, &vocab, 3, &rng);
            let path = dir.path().join("ck.json");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.model.variant, variant);
            let restored = back.to_model().unwrap();
            let objs = ObjectSequence::new(vec![vec![0.1, 0.2, -0.3], vec![1.0, 0.0, 0.5]]).unwrap();
            let tokens = [START, 4, 5, END];
            let a = model.decode_train(&objs, &tokens).unwrap().0;
            let b = restored.decode_train(&objs, &tokens).unwrap().0;
            assert_eq!(a.to_bits(), b.to_bits());
            let mut r1 = rng.clone();
            let mut r2 = back.rng.restore().unwrap();
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }

    #[test]
    fn version_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let (model, vocab, cfg, rng) = fixture(Variant::Mat);
        let mut v = serde_json::to_value(Checkpoint::new(&model, &cfg, &vocab, 0, &rng)).unwrap();
        let path = dir.path().join("ck.json");
        v["version"] = serde_json::json!(99);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        v.as_object_mut().unwrap().remove("version");
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (model, vocab, cfg, rng) = fixture(Variant::Mat);
        let mut ck = Checkpoint::new(&model, &cfg, &vocab, 0, &rng);
        ck.params[0].shape = [1, 1];
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::new(&model, &cfg, &vocab, 0, &rng);
        ck.params.pop();
        assert!(ck.to_model().is_err());
    }
}
