//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Every key is optional and unknown keys are rejected. [`RunConfig::to_text`]
//! writes the effective configuration in the same format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Bucket, BucketSet, SyntheticSpec, END, START, UNK};
use crate::error::{Error, Result};
use crate::inference::SearchOptions;
use crate::lstm::ModulationMode;
use crate::metrics::CiderMode;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::numerics::{grad_check, GradCheckReport, Matrix, Vector};
use crate::training::TrainConfig;

/// The tiny model used by the gradient check command.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub hidden: usize,
    pub vocab_size: usize,
    /// Encoder inputs, global feature included.
    pub objects: usize,
    /// Caption words; END adds one more decode step.
    pub words: usize,
    pub epsilon: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            hidden: 8,
            vocab_size: 12,
            objects: 3,
            words: 4,
            epsilon: 1e-5,
        }
    }
}

impl GradCheckSetup {
    /// Builds a random model of this size from `seed`, accumulates its
    /// analytic gradient on a random example and compares it against central
    /// differences. Dropout is off.
    pub fn run(
        &self,
        variant: Variant,
        modulation: ModulationMode,
        feature_dim: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(self.hidden, feature_dim, self.vocab_size);
        cfg.variant = variant;
        cfg.modulation = modulation;
        let mut model = ModelParams::new(cfg, &mut rng)?;
        let objects: Vec<Vector> = (0..self.objects)
            .map(|_| Matrix::random_uniform(feature_dim, 1, 1.0, &mut rng).into_vec())
            .collect();
        let mut tokens = vec![START];
        tokens.extend((0..self.words).map(|_| rng.gen_range(UNK + 1..self.vocab_size)));
        tokens.push(END);
        let cache = model.forward(&objects, &tokens, None)?;
        model.backward(&cache, 1.0)?;
        grad_check(&mut model, self.epsilon, |m| {
            Ok(m.forward(&objects, &tokens, None)?.loss)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub train_size: usize,
    pub val_size: usize,
    pub search: SearchOptions,
    pub cider_mode: CiderMode,
    pub ablation_seeds: usize,
    pub grad_check: GradCheckSetup,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synthetic: SyntheticSpec::default(),
            train_size: 4000,
            val_size: 500,
            search: SearchOptions::default(),
            cider_mode: CiderMode::Base,
            ablation_seeds: 5,
            grad_check: GradCheckSetup::default(),
            data: None,
            val: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| format!("cannot parse `{value}`: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{value}`")),
    }
}

fn parse_buckets(value: &str) -> std::result::Result<BucketSet, String> {
    let buckets = value
        .split(',')
        .map(|b| {
            let (o, t) = b
                .trim()
                .split_once('x')
                .ok_or_else(|| format!("bucket `{b}` is not <objects>x<tokens>"))?;
            Ok(Bucket::new(parse(o.trim())?, parse(t.trim())?))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    BucketSet::new(buckets).map_err(|e| e.to_string())
}

fn format_buckets(b: &BucketSet) -> String {
    b.buckets()
        .iter()
        .map(|b| format!("{}x{}", b.max_objects, b.max_tokens))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_cider(value: &str) -> std::result::Result<CiderMode, String> {
    match value {
        "base" => Ok(CiderMode::Base),
        "d" => Ok(CiderMode::D),
        _ => Err(format!("cider_mode must be `base` or `d`, got `{value}`")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigLine { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let s = &mut self.synthetic;
        let g = &mut self.grad_check;
        match key {
            "batch_size" => t.batch_size = parse(v)?,
            "lr_initial" => t.lr_initial = parse(v)?,
            "plateau_patience" => t.plateau_patience = parse(v)?,
            "plateau_threshold" => t.plateau_threshold = parse(v)?,
            "dropout_rate" => t.dropout_rate = parse(v)?,
            "early_stop_patience" => t.early_stop_patience = parse(v)?,
            "max_epochs" => t.max_epochs = parse(v)?,
            "seed" => t.seed = parse(v)?,
            "buckets" => t.buckets = parse_buckets(v)?,
            "modulation" => t.modulation = parse(v)?,
            "variant" => t.variant = parse(v)?,
            "hidden" => t.hidden = parse(v)?,
            "init_scale" => t.init_scale = parse(v)?,
            "clip_norm" => t.clip_norm = if v == "none" { None } else { Some(parse(v)?) },
            "min_count" => t.min_count = parse(v)?,
            "num_classes" => s.num_classes = parse(v)?,
            "feature_dim" => s.feature_dim = parse(v)?,
            "noise_std" => s.noise_std = parse(v)?,
            "max_objects" => s.max_objects = parse(v)?,
            "data_seed" => s.seed = parse(v)?,
            "train_size" => self.train_size = parse(v)?,
            "val_size" => self.val_size = parse(v)?,
            "beam_size" => self.search.beam_size = parse(v)?,
            "max_len" => self.search.max_len = parse(v)?,
            "length_normalize" => self.search.length_normalize = parse_bool(v)?,
            "cider_mode" => self.cider_mode = parse_cider(v)?,
            "ablation_seeds" => self.ablation_seeds = parse(v)?,
            "gradcheck_hidden" => g.hidden = parse(v)?,
            "gradcheck_vocab" => g.vocab_size = parse(v)?,
            "gradcheck_objects" => g.objects = parse(v)?,
            "gradcheck_words" => g.words = parse(v)?,
            "gradcheck_epsilon" => g.epsilon = parse(v)?,
            "data" => self.data = Some(v.into()),
            "val" => self.val = Some(v.into()),
            "out" => self.out = Some(v.into()),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::Config("train_size and val_size must be positive".into()));
        }
        if self.search.beam_size == 0 || self.search.max_len == 0 {
            return Err(Error::Config("beam_size and max_len must be positive".into()));
        }
        if self.ablation_seeds == 0 {
            return Err(Error::Config("ablation_seeds must be positive".into()));
        }
        let g = &self.grad_check;
        if g.hidden == 0 || g.vocab_size < 5 || g.objects == 0 || !(g.epsilon > 0.0) {
            return Err(Error::Config(
                "grad-check setup needs hidden ≥ 1, vocab ≥ 5, objects ≥ 1, epsilon > 0".into(),
            ));
        }
        Ok(())
    }

    /// The effective configuration, one key per line; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synthetic;
        let g = &self.grad_check;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("batch_size", t.batch_size.to_string());
        put("lr_initial", t.lr_initial.to_string());
        put("plateau_patience", t.plateau_patience.to_string());
        put("plateau_threshold", t.plateau_threshold.to_string());
        put("dropout_rate", t.dropout_rate.to_string());
        put("early_stop_patience", t.early_stop_patience.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("seed", t.seed.to_string());
        put("buckets", format_buckets(&t.buckets));
        put("modulation", t.modulation.to_string());
        put("variant", t.variant.to_string());
        put("hidden", t.hidden.to_string());
        put("init_scale", t.init_scale.to_string());
        put("clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string()));
        put("min_count", t.min_count.to_string());
        put("num_classes", s.num_classes.to_string());
        put("feature_dim", s.feature_dim.to_string());
        put("noise_std", s.noise_std.to_string());
        put("max_objects", s.max_objects.to_string());
        put("data_seed", s.seed.to_string());
        put("train_size", self.train_size.to_string());
        put("val_size", self.val_size.to_string());
        put("beam_size", self.search.beam_size.to_string());
        put("max_len", self.search.max_len.to_string());
        put("length_normalize", self.search.length_normalize.to_string());
        put(
            "cider_mode",
            match self.cider_mode {
                CiderMode::Base => "base".into(),
                CiderMode::D => "d".into(),
            },
        );
        put("ablation_seeds", self.ablation_seeds.to_string());
        put("gradcheck_hidden", g.hidden.to_string());
        put("gradcheck_vocab", g.vocab_size.to_string());
        put("gradcheck_objects", g.objects.to_string());
        put("gradcheck_words", g.words.to_string());
        put("gradcheck_epsilon", g.epsilon.to_string());
        for (k, p) in [("data", &self.data), ("val", &self.val), ("out", &self.out)] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        out
    }
}
