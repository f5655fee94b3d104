//! Browser demo. A [`Demo`] owns a small synthetic corpus and a model that
//! trains one epoch per call; captions come back with their attention maps.
//! Everything crosses the JS boundary as JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mat::data::{
    caption_vocabulary, generate_synthetic, synthetic_examples, Example, SyntheticSpec, Vocabulary, CLASS_NAMES,
};
use mat::inference::{caption, SearchOptions};
use mat::metrics::{evaluate, CiderMode, EvalPair};
use mat::model::Variant;
use mat::numerics::Vector;
use mat::training::{EpochRecord, TrainConfig, Trainer};

const TRAIN_SIZE: usize = 600;
const VAL_SIZE: usize = 60;

/// Caption of one validation example, with one attention row per emitted
/// token over the example's objects (global feature last).
#[derive(Debug, Serialize)]
pub struct CaptionView {
    pub index: usize,
    pub objects: Vec<String>,
    pub reference: String,
    pub caption: String,
    pub logprob: f64,
    pub tokens: Vec<String>,
    pub attention: Vec<Vector>,
}

#[wasm_bindgen]
pub struct Demo {
    trainer: Trainer,
    vocab: Vocabulary,
    val: Vec<Example>,
    val_classes: Vec<Vec<usize>>,
    val_captions: Vec<String>,
}

impl Demo {
    pub fn create(seed: u64, hidden: usize, variant: &str) -> Result<Demo, String> {
        let spec = SyntheticSpec {
            num_classes: 6,
            feature_dim: 8,
            max_objects: 3,
            seed,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, TRAIN_SIZE + VAL_SIZE).map_err(|e| e.to_string())?;
        let (train_raw, val_raw) = data.split_at(TRAIN_SIZE);
        let captions: Vec<&str> = train_raw.iter().map(|e| e.caption.as_str()).collect();
        let vocab = caption_vocabulary(&captions, 1).map_err(|e| e.to_string())?;
        let config = TrainConfig {
            hidden,
            batch_size: 4,
            dropout_rate: 0.0,
            min_count: 1,
            max_epochs: 1000,
            early_stop_patience: 1000,
            seed,
            variant: variant.parse::<Variant>().map_err(|e| e.to_string())?,
            ..TrainConfig::default()
        };
        let train = synthetic_examples(train_raw, &vocab);
        let val = synthetic_examples(val_raw, &vocab);
        let trainer = Trainer::new(config, vocab.clone(), &train, &val).map_err(|e| e.to_string())?;
        Ok(Demo {
            trainer,
            vocab,
            val,
            val_classes: val_raw.iter().map(|e| e.classes.clone()).collect(),
            val_captions: val_raw.iter().map(|e| e.caption.clone()).collect(),
        })
    }

    pub fn epoch(&mut self) -> Result<EpochRecord, String> {
        self.trainer.run_epoch().map_err(|e| e.to_string())
    }

    pub fn view(&self, index: usize, beam: usize) -> Result<CaptionView, String> {
        let ex = self
            .val
            .get(index)
            .ok_or_else(|| format!("no validation example {index}"))?;
        let vocab = &self.vocab;
        let opts = SearchOptions::with_beam(beam.max(1));
        let c = caption(self.trainer.model(), vocab, &ex.objects, &opts).map_err(|e| e.to_string())?;
        let mut objects: Vec<String> = self.val_classes[index]
            .iter()
            .map(|&k| CLASS_NAMES[k].to_string())
            .collect();
        objects.push("(global)".into());
        let mut tokens: Vec<String> = c
            .tokens
            .iter()
            .map(|&t| vocab.token(t).unwrap_or("?").to_string())
            .collect();
        tokens.push("</s>".into());
        Ok(CaptionView {
            index,
            objects,
            reference: self.val_captions[index].clone(),
            caption: c.text,
            logprob: c.log_prob,
            tokens,
            attention: c.attention,
        })
    }
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    /// `variant` is `mat`, `no-attention` or `single-vector`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, hidden: u32, variant: &str) -> Result<Demo, JsError> {
        Demo::create(seed.into(), hidden as usize, variant).map_err(|e| JsError::new(&e))
    }

    /// Runs one training epoch; returns its record as JSON.
    pub fn train_epoch(&mut self) -> Result<String, JsError> {
        json(self.epoch())
    }

    #[wasm_bindgen(getter)]
    pub fn val_len(&self) -> u32 {
        self.val.len() as u32
    }

    /// Captions validation example `index`; returns a [`CaptionView`] as JSON.
    pub fn caption(&self, index: u32, beam: u32) -> Result<String, JsError> {
        json(self.view(index as usize, beam as usize))
    }
}

/// Scores one candidate against newline-separated references.
pub fn score_text(candidate: &str, references: &str) -> Result<String, String> {
    let refs: Vec<&str> = references.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if refs.is_empty() {
        return Err("at least one reference is needed".into());
    }
    let pair = EvalPair::from_text(candidate.trim(), &refs).map_err(|e| e.to_string())?;
    let report = evaluate(&[pair], CiderMode::Base).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

/// BLEU-1..4, ROUGE-L and CIDEr for a single candidate, as JSON.
#[wasm_bindgen]
pub fn score(candidate: &str, references: &str) -> Result<String, JsError> {
    score_text(candidate, references).map_err(|e| JsError::new(&e))
}
