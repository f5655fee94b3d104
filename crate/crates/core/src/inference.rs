//! Caption generation by beam search and greedy decoding.
//!
//! A hypothesis is a run of word tokens, closed by END once finished. Every
//! token except PAD and START is a candidate at each step; once a hypothesis
//! holds `max_len` words only END may follow, so every search finishes with
//! at most `max_len + 1` tokens.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{ObjectSequence, Vocabulary, END, PAD, START};
use crate::error::{Error, Result};
use crate::lstm::LstmState;
use crate::model::{DecoderSession, ModelParams};
use crate::numerics::Vector;

pub const DEFAULT_BEAM_SIZE: usize = 20;
pub const DEFAULT_MAX_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub beam_size: usize,
    /// Maximum number of words before END.
    pub max_len: usize,
    /// Rank by mean per-token log-probability instead of the plain sum.
    pub length_normalize: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            beam_size: DEFAULT_BEAM_SIZE,
            max_len: DEFAULT_MAX_LEN,
            length_normalize: false,
        }
    }
}

impl SearchOptions {
    pub fn with_beam(beam_size: usize) -> Self {
        Self {
            beam_size,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Generated tokens after START; ends with END iff `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: LstmState,
    pub finished: bool,
    /// Attention weights used to predict each token (empty without
    /// attention).
    pub attention: Vec<Vector>,
}

impl Hypothesis {
    /// Tokens with the closing END removed.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Higher score first; ties go to the lower token sequence, then the shorter.
fn rank(a: &Hypothesis, b: &Hypothesis, norm: bool) -> Ordering {
    b.score(norm)
        .total_cmp(&a.score(norm))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

fn candidate_tokens(vocab_size: usize, words_so_far: usize, max_len: usize) -> impl Iterator<Item = usize> {
    let only_end = words_so_far >= max_len;
    (0..vocab_size).filter(move |&k| k != PAD && k != START && (!only_end || k == END))
}

fn extend(session: &DecoderSession<'_>, hyp: &Hypothesis) -> Result<(crate::model::StepOutput, usize)> {
    let prev = hyp.tokens.last().copied().unwrap_or(START);
    Ok((session.step(&hyp.state, prev)?, hyp.tokens.len()))
}

fn child(hyp: &Hypothesis, token: usize, out: &crate::model::StepOutput) -> Hypothesis {
    let mut tokens = hyp.tokens.clone();
    tokens.push(token);
    let mut attention = hyp.attention.clone();
    if let Some(a) = &out.attention {
        attention.push(a.clone());
    }
    Hypothesis {
        tokens,
        log_prob: hyp.log_prob + out.log_probs[token],
        state: out.state.clone(),
        finished: token == END,
        attention,
    }
}

fn root(session: &DecoderSession<'_>) -> Hypothesis {
    Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: session.initial_state().clone(),
        finished: false,
        attention: Vec::new(),
    }
}

/// Beam search with a pool of retired (finished) hypotheses. Returns the best
/// finished hypothesis, or the best live one if nothing finished.
pub fn beam_search(model: &ModelParams, objects: &ObjectSequence, opts: &SearchOptions) -> Result<Hypothesis> {
    opts.validate()?;
    let session = model.start_decoding(objects)?;
    let vocab_size = model.config.vocab_size;
    let norm = opts.length_normalize;
    let mut live = vec![root(&session)];
    let mut done: Vec<Hypothesis> = Vec::new();

    for _ in 0..=opts.max_len {
        let mut candidates = Vec::new();
        for hyp in &live {
            let (out, len) = extend(&session, hyp)?;
            for k in candidate_tokens(vocab_size, len, opts.max_len) {
                candidates.push(child(hyp, k, &out));
            }
        }
        candidates.sort_by(|a, b| rank(a, b, norm));
        candidates.truncate(opts.beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        // Summed log-probabilities never increase, so no live hypothesis can
        // overtake a finished one that already scores at least as well.
        if !norm {
            let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    let pool = if done.is_empty() { live } else { done };
    pool.into_iter()
        .min_by(|a, b| rank(a, b, norm))
        .ok_or(Error::Empty("beam search produced no hypothesis"))
}

/// Picks the most probable token at every step.
pub fn greedy(model: &ModelParams, objects: &ObjectSequence, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let session = model.start_decoding(objects)?;
    let mut hyp = root(&session);
    while !hyp.finished {
        let (out, len) = extend(&session, &hyp)?;
        let best = candidate_tokens(model.config.vocab_size, len, max_len)
            .reduce(|a, b| if out.log_probs[b] > out.log_probs[a] { b } else { a })
            .ok_or(Error::Empty("candidate tokens"))?;
        hyp = child(&hyp, best, &out);
    }
    Ok(hyp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub text: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub attention: Vec<Vector>,
}

/// Beam search followed by detokenization.
pub fn caption(
    model: &ModelParams,
    vocab: &Vocabulary,
    objects: &ObjectSequence,
    opts: &SearchOptions,
) -> Result<Caption> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Dimension {
            op: "caption vocabulary",
            left: (model.config.vocab_size, 1),
            right: (vocab.len(), 1),
        });
    }
    let hyp = beam_search(model, objects, opts)?;
    Ok(Caption {
        text: vocab.decode(&hyp.tokens),
        tokens: hyp.words().to_vec(),
        log_prob: hyp.log_prob,
        attention: hyp.attention,
    })
}

/// One line of batch captioning output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vector>>,
}

/// Captions every `(id, objects)` pair, spreading the work over `threads`
/// scoped threads. Output order matches input order.
pub fn caption_all(
    model: &ModelParams,
    vocab: &Vocabulary,
    items: &[(String, ObjectSequence)],
    opts: &SearchOptions,
    with_attention: bool,
    threads: usize,
) -> Result<Vec<CaptionRecord>> {
    let one = |(id, objects): &(String, ObjectSequence)| -> Result<CaptionRecord> {
        let c = caption(model, vocab, objects, opts)?;
        Ok(CaptionRecord {
            id: id.clone(),
            caption: c.text,
            logprob: c.log_prob,
            attention: with_attention.then_some(c.attention),
        })
    };
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(one).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<CaptionRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Config("captioning thread panicked".into())))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::numerics::{Matrix, Parameters};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(4, 3, vocab);
        cfg.init_scale = 1.0;
        ModelParams::new(cfg, &mut rng).unwrap()
    }

    fn objects(seed: u64) -> ObjectSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObjectSequence::new(
            (0..3)
                .map(|_| Matrix::random_uniform(3, 1, 1.0, &mut rng).into_vec())
                .collect(),
        )
        .unwrap()
    }

    /// Every word sequence of length 0..=max_len, closed with END.
    fn brute_force(m: &ModelParams, objs: &ObjectSequence, max_len: usize) -> (Vec<usize>, f64) {
        let words: Vec<usize> = (0..m.config.vocab_size)
            .filter(|&k| k != PAD && k != START && k != END)
            .collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for len in 0..=max_len {
            for seq in &frontier {
                let mut full = seq.clone();
                full.push(END);
                let lp = m.sequence_log_prob(objs, &full).unwrap();
                let better = match &best {
                    None => true,
                    Some((b, blp)) => lp > *blp || (lp == *blp && full < *b),
                };
                if better {
                    best = Some((full, lp));
                }
            }
            if len < max_len {
                frontier = frontier
                    .iter()
                    .flat_map(|s| words.iter().map(move |&w| [s.clone(), vec![w]].concat()))
                    .collect();
            }
        }
        best.unwrap()
    }

    #[test]
    fn exhaustive_beam_matches_enumeration() {
        for seed in 0..10 {
            let m = model(6, seed);
            let objs = objects(seed + 100);
            let (seq, lp) = brute_force(&m, &objs, 3);
            let opts = SearchOptions {
                beam_size: 6usize.pow(3),
                max_len: 3,
                length_normalize: false,
            };
            let hyp = beam_search(&m, &objs, &opts).unwrap();
            assert_eq!(hyp.tokens, seq, "seed {seed}");
            assert!((hyp.log_prob - lp).abs() < 1e-10);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..20 {
            let m = model(7, seed);
            let objs = objects(seed);
            let b = beam_search(
                &m,
                &objs,
                &SearchOptions {
                    beam_size: 1,
                    max_len: 5,
                    length_normalize: false,
                },
            )
            .unwrap();
            let g = greedy(&m, &objs, 5).unwrap();
            assert_eq!(b.tokens, g.tokens);
            assert_eq!(b.log_prob, g.log_prob);
        }
    }

    #[test]
    fn wider_beam_never_scores_worse() {
        for seed in 0..100 {
            let m = model(6, seed);
            let objs = objects(seed + 7);
            let opts = |b| SearchOptions {
                beam_size: b,
                max_len: 4,
                length_normalize: false,
            };
            let wide = beam_search(&m, &objs, &opts(8)).unwrap();
            let narrow = beam_search(&m, &objs, &opts(1)).unwrap();
            assert!(wide.log_prob >= narrow.log_prob - 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn score_equals_teacher_forced_rescoring() {
        for seed in 0..20 {
            let m = model(9, seed);
            let objs = objects(seed);
            let opts = SearchOptions {
                beam_size: 4,
                max_len: 6,
                length_normalize: false,
            };
            let hyp = beam_search(&m, &objs, &opts).unwrap();
            assert!(hyp.tokens.len() <= opts.max_len + 1);
            assert_eq!(hyp.tokens.last(), Some(&END));
            let rescored = m.sequence_log_prob(&objs, &hyp.tokens).unwrap();
            assert!((hyp.log_prob - rescored).abs() < 1e-10);
        }
    }

    #[test]
    fn end_first_gives_empty_caption() {
        let mut m = model(6, 3);
        m.attn.b_v.value.as_mut_slice()[END] = 50.0;
        let vocab = crate::data::build_vocabulary(&[vec!["dog", "cat"]], 1).unwrap();
        let c = caption(&m, &vocab, &objects(1), &SearchOptions::default()).unwrap();
        assert_eq!(c.text, "");
        assert!(c.tokens.is_empty());
    }

    #[test]
    fn unk_renders_as_placeholder() {
        let mut m = model(6, 3);
        m.attn.b_v.value.as_mut_slice()[crate::data::UNK] = 50.0;
        let vocab = crate::data::build_vocabulary(&[vec!["dog", "cat"]], 1).unwrap();
        let c = caption(
            &m,
            &vocab,
            &objects(1),
            &SearchOptions {
                beam_size: 1,
                max_len: 2,
                length_normalize: false,
            },
        )
        .unwrap();
        assert_eq!(c.text, "<unk> <unk>");
        assert_eq!(c.attention.len(), 3);
    }

    #[test]
    fn deterministic_and_thread_count_independent() {
        let m = model(8, 11);
        let vocab = crate::data::build_vocabulary(&[vec!["w0", "w1", "w2", "w3"]], 1).unwrap();
        let items: Vec<_> = (0..7).map(|i| (format!("img{i}"), objects(i))).collect();
        let opts = SearchOptions {
            beam_size: 3,
            max_len: 5,
            length_normalize: false,
        };
        let a = caption_all(&m, &vocab, &items, &opts, true, 1).unwrap();
        let b = caption_all(&m, &vocab, &items, &opts, true, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[4].id, "img4");
    }

    #[test]
    fn variants_without_attention_record_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = ModelConfig::new(4, 3, 6);
        cfg.variant = Variant::NoAttention;
        let m = ModelParams::new(cfg, &mut rng).unwrap();
        let hyp = beam_search(&m, &objects(0), &SearchOptions::with_beam(3)).unwrap();
        assert!(hyp.attention.is_empty());
        assert!(m.num_weights() > 0);
    }

    #[test]
    fn invalid_options_and_empty_objects() {
        let m = model(6, 0);
        assert!(beam_search(&m, &objects(0), &SearchOptions::with_beam(0)).is_err());
        let opts = SearchOptions {
            max_len: 0,
            ..SearchOptions::default()
        };
        assert!(beam_search(&m, &objects(0), &opts).is_err());
        assert!(greedy(&m, &objects(0), 0).is_err());
    }

    #[test]
    fn length_normalization_can_prefer_longer_captions() {
        let m = model(7, 5);
        let objs = objects(2);
        let plain = beam_search(
            &m,
            &objs,
            &SearchOptions {
                beam_size: 5,
                max_len: 4,
                length_normalize: false,
            },
        )
        .unwrap();
        let norm = beam_search(
            &m,
            &objs,
            &SearchOptions {
                beam_size: 5,
                max_len: 4,
                length_normalize: true,
            },
        )
        .unwrap();
        assert!(norm.log_prob / norm.tokens.len() as f64 >= plain.log_prob / plain.tokens.len() as f64 - 1e-12);
    }
}
