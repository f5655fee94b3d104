//! The full translator: object embedding, encoder LSTM, decoder LSTM over
//! word embeddings, attention and the vocabulary softmax, plus the two
//! ablation variants.
//!
//! Backpropagation runs over a statically unrolled graph: the forward pass
//! records every step's activations in a [`ForwardCache`], and
//! [`ModelParams::backward`] walks it in reverse.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{AttendCache, AttentionParams, AttentionTrace, EncoderMemory, MemoryGrads, OutputCache};
use crate::data::{BatchExample, ObjectSequence, START};
use crate::error::{Error, Result};
use crate::lstm::{LstmCache, LstmParams, LstmState, ModulationMode};
use crate::numerics::{Matrix, Parameter, Parameters, Vector};
use crate::training::dropout_mask;

/// Which network is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Object sequence encoder with sequential attention.
    #[default]
    Mat,
    /// Object sequence encoder, output from the decoder state alone.
    NoAttention,
    /// Only the global image feature is encoded; no attention.
    SingleVector,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mat, Variant::NoAttention, Variant::SingleVector];

    pub fn uses_attention(self) -> bool {
        self == Variant::Mat
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mat => "mat",
            Variant::NoAttention => "no-attention",
            Variant::SingleVector => "single-vector",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mat" => Ok(Variant::Mat),
            "no-attention" => Ok(Variant::NoAttention),
            "single-vector" => Ok(Variant::SingleVector),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub variant: Variant,
    pub modulation: ModulationMode,
    /// Weights start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn new(hidden: usize, feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            hidden,
            feature_dim,
            vocab_size,
            variant: Variant::Mat,
            modulation: ModulationMode::PaperLiteral,
            init_scale: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config("hidden and feature_dim must be positive".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocabulary must hold at least the special tokens".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("bad init_scale {}", self.init_scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Object feature embedding, `H × D_o`.
    pub w_e: Parameter,
    /// Word embedding, `H × |V|`; column `k` embeds token `k`.
    pub w_s: Parameter,
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    pub attn: AttentionParams,
    generation: u64,
}

/// Inverted-dropout configuration for a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn mask(&mut self, len: usize) -> Option<Vector> {
        (self.rate > 0.0).then(|| dropout_mask(len, self.rate, &mut *self.rng))
    }
}

#[derive(Clone, Debug)]
struct EncoderStep {
    input: Vector,
    mask: Option<Vector>,
    cache: LstmCache,
}

#[derive(Clone, Debug)]
struct DecoderStep {
    token_in: usize,
    target: usize,
    mask: Option<Vector>,
    lstm: LstmCache,
    attention: Option<(AttentionTrace, AttendCache)>,
    output: OutputCache,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    encoder: Vec<EncoderStep>,
    memory: Option<EncoderMemory>,
    decoder: Vec<DecoderStep>,
    pub loss: f64,
}

impl ForwardCache {
    /// Predicted distribution at each decode step.
    pub fn distributions(&self) -> Vec<&Vector> {
        self.decoder.iter().map(|s| &s.output.probs).collect()
    }

    /// Attention weights at each decode step (empty without attention).
    pub fn attention_weights(&self) -> Vec<&Vector> {
        self.decoder
            .iter()
            .filter_map(|s| s.attention.as_ref().map(|(t, _)| &t.weights))
            .collect()
    }

    pub fn target_len(&self) -> usize {
        self.decoder.len()
    }
}

/// One decode step's result during free-running generation.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: LstmState,
    pub log_probs: Vector,
    pub attention: Option<Vector>,
}

/// Encoded objects ready for step-by-step decoding.
pub struct DecoderSession<'m> {
    model: &'m ModelParams,
    memory: Option<EncoderMemory>,
    initial: LstmState,
}

impl<'m> DecoderSession<'m> {
    /// Decoder state before the first word.
    pub fn initial_state(&self) -> &LstmState {
        &self.initial
    }

    /// Feeds `prev_token` and returns log-probabilities for the next word.
    pub fn step(&self, state: &LstmState, prev_token: usize) -> Result<StepOutput> {
        let m = self.model;
        m.check_token(prev_token)?;
        let mut x = vec![0.0; m.config.hidden];
        m.w_s.value.column_acc(prev_token, &mut x);
        let (next, _) = m.decoder.step(&x, state, m.config.modulation)?;
        let (attention, context) = match &self.memory {
            Some(memory) => {
                let (trace, _) = m.attn.attend(memory, &state.h)?;
                (Some(trace.weights), Some(trace.context))
            }
            None => (None, None),
        };
        let out = m.attn.output(&next.h, context.as_deref(), None)?;
        Ok(StepOutput {
            state: next,
            log_probs: out.log_probs,
            attention,
        })
    }
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, s) = (config.hidden, config.init_scale);
        Ok(Self {
            w_e: Parameter::new("w_e", Matrix::random_uniform(h, config.feature_dim, s, rng)),
            w_s: Parameter::new("w_s", Matrix::random_uniform(h, config.vocab_size, s, rng)),
            encoder: LstmParams::new("encoder", h, h, s, rng),
            decoder: LstmParams::new("decoder", h, h, s, rng),
            attn: AttentionParams::new(h, config.vocab_size, s, rng),
            config,
            generation: 0,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Increments the parameter generation; caches from earlier forward
    /// passes become stale.
    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                index: t,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// The encoder inputs this variant consumes.
    fn encoder_inputs<'a>(&self, objects: &'a [Vector]) -> Result<&'a [Vector]> {
        if objects.is_empty() {
            return Err(Error::Empty("object sequence"));
        }
        if let Some((i, f)) = objects
            .iter()
            .enumerate()
            .find(|(_, f)| f.len() != self.config.feature_dim)
        {
            return Err(Error::Dimension {
                op: "object feature",
                left: (self.config.feature_dim, 1),
                right: (i, f.len()),
            });
        }
        Ok(match self.config.variant {
            Variant::SingleVector => &objects[objects.len() - 1..],
            _ => objects,
        })
    }

    fn run_encoder(
        &self,
        objects: &[Vector],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Vec<EncoderStep>, Vec<Vector>, LstmState)> {
        let inputs = self.encoder_inputs(objects)?;
        let mut state = LstmState::zeros(self.config.hidden);
        let mut steps = Vec::with_capacity(inputs.len());
        let mut states = Vec::with_capacity(inputs.len());
        for obj in inputs {
            let mut x = self.w_e.value.matvec(obj)?;
            let mask = dropout.as_deref_mut().and_then(|d| d.mask(x.len()));
            if let Some(m) = &mask {
                x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            let (next, cache) = self.encoder.step(&x, &state, self.config.modulation)?;
            states.push(next.h.clone());
            steps.push(EncoderStep {
                input: obj.clone(),
                mask,
                cache,
            });
            state = next;
        }
        Ok((steps, states, state))
    }

    /// Encodes the objects from a zero state; returns every hidden state
    /// and the final `(h, c)`.
    pub fn encode(&self, objects: &ObjectSequence) -> Result<(Vec<Vector>, LstmState)> {
        let (_, states, last) = self.run_encoder(objects.features(), None)?;
        Ok((states, last))
    }

    /// Encodes `objects` for free-running decoding.
    pub fn start_decoding(&self, objects: &ObjectSequence) -> Result<DecoderSession<'_>> {
        let (states, initial) = self.encode(objects)?;
        let memory = if self.config.variant.uses_attention() {
            Some(self.attn.memory(states)?)
        } else {
            None
        };
        Ok(DecoderSession {
            model: self,
            memory,
            initial,
        })
    }

    /// Teacher-forced forward pass. `tokens` is START, the words, END, with
    /// no padding; the loss is the summed NLL of `tokens[1..]`.
    pub fn forward(
        &self,
        objects: &[Vector],
        tokens: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardCache> {
        if tokens.len() < 2 {
            return Err(Error::Empty("target token sequence"));
        }
        if tokens[0] != START {
            return Err(Error::Config("target sequence must begin with START".into()));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let (encoder, states, mut state) = self.run_encoder(objects, dropout.as_deref_mut())?;
        let memory = if self.config.variant.uses_attention() {
            Some(self.attn.memory(states)?)
        } else {
            None
        };
        let hidden = self.config.hidden;
        let mut decoder = Vec::with_capacity(tokens.len() - 1);
        let mut loss = 0.0;
        for w in tokens.windows(2) {
            let (token_in, target) = (w[0], w[1]);
            let mut x = vec![0.0; hidden];
            self.w_s.value.column_acc(token_in, &mut x);
            let mask = dropout.as_deref_mut().and_then(|d| d.mask(hidden));
            if let Some(m) = &mask {
                x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            let (next, lstm) = self.decoder.step(&x, &state, self.config.modulation)?;
            let attention = match &memory {
                Some(mem) => Some(self.attn.attend(mem, &state.h)?),
                None => None,
            };
            let out_len = if attention.is_some() { 2 * hidden } else { hidden };
            let out_mask = dropout.as_deref_mut().and_then(|d| d.mask(out_len));
            let output = self
                .attn
                .output(&next.h, attention.as_ref().map(|(t, _)| t.context.as_slice()), out_mask)?;
            loss -= output.log_probs[target];
            decoder.push(DecoderStep {
                token_in,
                target,
                mask,
                lstm,
                attention,
                output,
            });
            state = next;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        Ok(ForwardCache {
            generation: self.generation,
            encoder,
            memory,
            decoder,
            loss,
        })
    }

    /// Forward pass over the real (unpadded) part of a bucketed example.
    pub fn forward_example(&self, ex: &BatchExample, dropout: Option<&mut Dropout>) -> Result<ForwardCache> {
        self.forward(ex.real_objects(), ex.real_tokens(), dropout)
    }

    /// Teacher-forced summed NLL for `objects` and `tokens` (START … END).
    pub fn decode_train(&self, objects: &ObjectSequence, tokens: &[usize]) -> Result<(f64, Vec<Vector>)> {
        let cache = self.forward(objects.features(), tokens, None)?;
        let dists = cache.distributions().into_iter().cloned().collect();
        Ok((cache.loss, dists))
    }

    /// Log-probability of generating `words` followed by END.
    pub fn sequence_log_prob(&self, objects: &ObjectSequence, words_then_end: &[usize]) -> Result<f64> {
        let mut tokens = Vec::with_capacity(words_then_end.len() + 1);
        tokens.push(START);
        tokens.extend_from_slice(words_then_end);
        Ok(-self.forward(objects.features(), &tokens, None)?.loss)
    }

    /// Accumulates `scale · ∂loss/∂θ` into every parameter gradient.
    pub fn backward(&mut self, cache: &ForwardCache, scale: f64) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::Cache("forward cache predates the latest parameter update"));
        }
        let hidden = self.config.hidden;
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        let mut mem_acc = cache.memory.as_ref().map(MemoryGrads::zeros);

        for step in cache.decoder.iter().rev() {
            let mut dlogits = step.output.probs.clone();
            dlogits[step.target] -= 1.0;
            if scale != 1.0 {
                dlogits.iter_mut().for_each(|d| *d *= scale);
            }
            let og = self.attn.output_backward(&step.output, &dlogits)?;
            let mut dh = og.d_state;
            dh.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);
            let d_prev_from_attention = match (&step.attention, &cache.memory, mem_acc.as_mut(), og.d_context) {
                (Some((trace, acache)), Some(mem), Some(acc), Some(dctx)) => {
                    Some(self.attn.attend_backward(mem, trace, acache, &dctx, acc)?)
                }
                (None, _, _, None) => None,
                _ => return Err(Error::Cache("attention cache inconsistent with variant")),
            };
            let g = self.decoder.step_backward(&step.lstm, &dh, &dc_next)?;
            let mut dx = g.dx;
            if let Some(m) = &step.mask {
                dx.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            self.w_s.grad.add_to_column(step.token_in, &dx);
            dh_next = g.dh_prev;
            if let Some(d) = d_prev_from_attention {
                dh_next.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
            dc_next = g.dc_prev;
        }

        let mut d_states = match (&cache.memory, mem_acc) {
            (Some(mem), Some(acc)) => self.attn.memory_backward(mem, acc),
            _ => vec![vec![0.0; hidden]; cache.encoder.len()],
        };
        for (step, ds) in cache.encoder.iter().zip(d_states.iter_mut()).rev() {
            ds.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);
            let g = self.encoder.step_backward(&step.cache, ds, &dc_next)?;
            let mut dx = g.dx;
            if let Some(m) = &step.mask {
                dx.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            self.w_e.grad.outer_acc(&dx, &step.input);
            dh_next = g.dh_prev;
            dc_next = g.dc_prev;
        }
        Ok(())
    }
}

impl Parameters for ModelParams {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.w_e, &self.w_s];
        v.extend(self.encoder.parameters());
        v.extend(self.decoder.parameters());
        v.extend(self.attn.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.w_e, &mut self.w_s];
        v.extend(self.encoder.parameters_mut());
        v.extend(self.decoder.parameters_mut());
        v.extend(self.attn.parameters_mut());
        v
    }
}
