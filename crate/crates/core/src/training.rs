//! Minibatch SGD over bucketed examples: inverted dropout, global-norm
//! clipping, learning-rate halving on a training-loss plateau and early
//! stopping on validation loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{BatchExample, BucketSet, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::lstm::ModulationMode;
use crate::model::{Dropout, ModelConfig, ModelParams, Variant};
use crate::numerics::{Parameters, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epochs without training-loss improvement before the rate is halved.
    pub plateau_patience: usize,
    /// Relative decrease that counts as an improvement.
    pub plateau_threshold: f64,
    pub dropout_rate: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub buckets: BucketSet,
    pub modulation: ModulationMode,
    pub variant: Variant,
    pub hidden: usize,
    pub init_scale: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr_initial: 0.1,
            plateau_patience: 2,
            plateau_threshold: 1e-4,
            dropout_rate: 0.5,
            early_stop_patience: 5,
            max_epochs: 30,
            seed: 0,
            buckets: BucketSet::default(),
            modulation: ModulationMode::PaperLiteral,
            variant: Variant::Mat,
            hidden: 512,
            init_scale: 0.08,
            clip_norm: Some(5.0),
            min_count: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial <= 1.0) {
            return bad(format!("lr_initial must be in (0, 1], got {}", self.lr_initial));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be ≥ 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.min_count == 0 {
            return bad("min_count must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn model_config(&self, feature_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            feature_dim,
            vocab_size,
            variant: self.variant,
            modulation: self.modulation,
            init_scale: self.init_scale,
        }
    }
}

/// Mask for inverted dropout: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vector {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout; `rate == 0` is the identity.
pub fn apply_dropout<R: Rng + ?Sized>(v: &[f64], rate: f64, rng: &mut R) -> Vector {
    if rate == 0.0 {
        return v.to_vec();
    }
    let mask = dropout_mask(v.len(), rate, rng);
    v.iter().zip(mask).map(|(x, k)| x * k).collect()
}

/// `θ ← θ − lr·∇θ`, then zeroes every gradient.
pub fn sgd_step<P: Parameters + ?Sized>(params: &mut P, lr: f64) {
    for p in params.parameters_mut() {
        p.value.axpy(-lr, &p.grad).expect("value and grad share a shape");
        p.zero_grad();
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<P: Parameters + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let norm = params
        .parameters()
        .iter()
        .map(|p| p.grad.squared_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in params.parameters_mut() {
            p.grad.scale(k);
        }
    }
    norm
}

/// Halves the learning rate after `patience` epochs without a relative
/// improvement of at least `threshold` in training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    best: f64,
    stale: usize,
    patience: usize,
    threshold: f64,
}

impl LrSchedule {
    pub fn new(lr: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            stale: 0,
            patience,
            threshold,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's training loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.best = self.best.min(loss);
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= 0.5;
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Waiting,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    best: f64,
    stale: usize,
    patience: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
            patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> StopSignal {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            StopSignal::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Waiting
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean NLL per predicted token, with dropout active.
    pub train_loss: f64,
    /// Mean NLL per predicted token on the validation set.
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

/// CSV with header `epoch,train_loss,val_loss,lr`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    crate::data::write_atomic(path, history_csv(history).as_bytes())
}

/// Mean per-token NLL of `model` over `examples`, without dropout.
pub fn mean_token_loss(model: &ModelParams, examples: &[BatchExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        total += model.forward_example(ex, None)?.loss;
        tokens += ex.target_len();
    }
    if tokens == 0 {
        return Err(Error::Empty("loss evaluation set"));
    }
    Ok(total / tokens as f64)
}

/// Epoch-at-a-time trainer. [`train`] drives it to completion.
pub struct Trainer {
    config: TrainConfig,
    vocab: Vocabulary,
    model: ModelParams,
    rng: ChaCha8Rng,
    schedule: LrSchedule,
    stopper: EarlyStopping,
    train: Vec<BatchExample>,
    val: Vec<BatchExample>,
    history: Vec<EpochRecord>,
    best: Option<(ModelParams, usize)>,
    finished: bool,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocabulary, train: &[Example], val: &[Example]) -> Result<Self> {
        config.validate()?;
        let first = train.first().ok_or(Error::Empty("training set"))?;
        if val.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let feature_dim = first.objects.dim();
        let prepare = |set: &[Example]| -> Result<Vec<BatchExample>> {
            set.iter()
                .map(|e| {
                    if e.objects.dim() != feature_dim {
                        return Err(Error::Config(format!(
                            "example {} has feature dim {}, expected {feature_dim}",
                            e.id,
                            e.objects.dim()
                        )));
                    }
                    config.buckets.prepare(e)
                })
                .collect()
        };
        let train = prepare(train)?;
        let val = prepare(val)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ModelParams::new(config.model_config(feature_dim, vocab.len()), &mut rng)?;
        Ok(Self {
            schedule: LrSchedule::new(config.lr_initial, config.plateau_patience, config.plateau_threshold),
            stopper: EarlyStopping::new(config.early_stop_patience),
            config,
            vocab,
            model,
            rng,
            train,
            val,
            history: Vec::new(),
            best: None,
            finished: false,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn best_model(&self) -> &ModelParams {
        self.best.as_ref().map_or(&self.model, |(m, _)| m)
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr()
    }

    /// Batches of training-set indices: shuffled within each bucket, cut to
    /// `batch_size`, and the batch order shuffled.
    fn batches(&mut self) -> Vec<Vec<usize>> {
        let n_buckets = self.config.buckets.buckets().len();
        let mut by_bucket: Vec<Vec<usize>> = vec![Vec::new(); n_buckets];
        for (i, ex) in self.train.iter().enumerate() {
            let b = self
                .config
                .buckets
                .buckets()
                .iter()
                .position(|b| *b == ex.bucket)
                .expect("examples are prepared against these buckets");
            by_bucket[b].push(i);
        }
        let mut batches = Vec::new();
        for mut group in by_bucket {
            group.shuffle(&mut self.rng);
            batches.extend(group.chunks(self.config.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut self.rng);
        batches
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.finished {
            return Err(Error::Config("training already finished".into()));
        }
        let epoch = self.history.len() + 1;
        let lr = self.schedule.lr();
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (b, batch) in self.batches().into_iter().enumerate() {
            self.model.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let ex = &self.train[i];
                let mut dropout = Dropout {
                    rate: self.config.dropout_rate,
                    rng: &mut self.rng,
                };
                let cache = self
                    .model
                    .forward_example(ex, Some(&mut dropout))
                    .map_err(|e| match e {
                        Error::NonFinite(_) => Error::Diverged {
                            epoch,
                            batch: b,
                            loss: f64::NAN,
                        },
                        other => other,
                    })?;
                total += cache.loss;
                tokens += ex.target_len();
                self.model.backward(&cache, scale)?;
            }
            if let Some(max) = self.config.clip_norm {
                let norm = clip_gradients(&mut self.model, max);
                if !norm.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        loss: norm,
                    });
                }
            }
            sgd_step(&mut self.model, lr);
            self.model.bump_generation();
        }
        let train_loss = total / tokens as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                loss: train_loss,
            });
        }
        let val_loss = mean_token_loss(&self.model, &self.val)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr}");
        self.history.push(record.clone());
        self.schedule.observe(train_loss);
        match self.stopper.observe(val_loss) {
            StopSignal::Improved => self.best = Some((self.model.clone(), epoch)),
            StopSignal::Waiting => {}
            StopSignal::Stop => self.finished = true,
        }
        if epoch >= self.config.max_epochs {
            self.finished = true;
        }
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (model, epoch) = match &self.best {
            Some((m, e)) => (m, *e),
            None => (&self.model, self.history.len()),
        };
        Checkpoint::new(model, &self.config, &self.vocab, epoch, &self.rng)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            checkpoint: self.checkpoint(),
            history: self.history,
        }
    }
}

/// Trains until early stopping or `max_epochs`; returns the best-validation
/// checkpoint and the per-epoch history.
pub fn train(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[Example],
    val_set: &[Example],
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), vocab.clone(), train_set, val_set)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}
