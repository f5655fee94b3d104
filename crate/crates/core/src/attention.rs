//! Sequential attention over encoder hidden states and the vocabulary
//! output layer.
//!
//! At decode step `t` the scores compare every encoder state `h_i` with the
//! decoder state of step `t - 1`:
//!
//! ```text
//! u_i = vᵀ tanh(W_H h_i + W_D d_{t-1})
//! a   = softmax(u)
//! d'  = Σ a_i h_i
//! ```
//!
//! The context is concatenated with the current decoder state `d_t`,
//! projected to `H` by `W_C` and to vocabulary logits by `W_V`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, log_softmax, softmax, Matrix, Parameter, Parameters, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// Score vector, `H × 1`.
    pub v: Parameter,
    /// Encoder-state projection, `H × H`.
    pub w_h: Parameter,
    /// Decoder-state projection, `H × H`.
    pub w_d: Parameter,
    /// Maps `[d_t; d']` (length `2H`) down to `H`.
    pub w_c: Parameter,
    pub b_c: Parameter,
    /// Vocabulary projection, `|V| × H`.
    pub w_v: Parameter,
    pub b_v: Parameter,
}

/// What the layer looked at for one decode step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub scores: Vector,
    pub weights: Vector,
    pub context: Vector,
}

/// Encoder states with their `W_H` projections computed once per sequence.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub states: Vec<Vector>,
    keys: Vec<Vector>,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct AttendCache {
    d_prev: Vector,
    /// `tanh(W_H h_i + W_D d_prev)` per encoder position.
    activations: Vec<Vector>,
}

/// Gradient accumulators for an [`EncoderMemory`], summed over decode steps
/// and folded into `W_H` once by [`AttentionParams::memory_backward`].
#[derive(Clone, Debug)]
pub struct MemoryGrads {
    pub states: Vec<Vector>,
    keys: Vec<Vector>,
}

impl MemoryGrads {
    pub fn zeros(memory: &EncoderMemory) -> Self {
        let h = memory.states.first().map_or(0, Vec::len);
        Self {
            states: vec![vec![0.0; h]; memory.len()],
            keys: vec![vec![0.0; h]; memory.len()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct OutputCache {
    /// Vector entering the first projection, after any dropout mask.
    input: Vector,
    mask: Option<Vector>,
    /// `W_C · input + b_c`; absent when attention is disabled.
    hidden: Option<Vector>,
    pub log_probs: Vector,
    pub probs: Vector,
}

/// Gradients leaving the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    pub d_state: Vector,
    pub d_context: Option<Vector>,
}

impl AttentionParams {
    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn new<R: Rng + ?Sized>(hidden: usize, vocab: usize, scale: f64, rng: &mut R) -> Self {
        let mut w = |name: &str, r, c| Parameter::new(name, Matrix::random_uniform(r, c, scale, rng));
        Self {
            v: w("attn.v", hidden, 1),
            w_h: w("attn.w_h", hidden, hidden),
            w_d: w("attn.w_d", hidden, hidden),
            w_c: w("attn.w_c", hidden, 2 * hidden),
            b_c: Parameter::zeros("attn.b_c", hidden, 1),
            w_v: w("attn.w_v", vocab, hidden),
            b_v: Parameter::zeros("attn.b_v", vocab, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.value.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.w_v.value.rows()
    }

    fn check_len(&self, op: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.hidden() {
            return Err(Error::Dimension {
                op,
                left: (self.hidden(), 1),
                right: (v.len(), 1),
            });
        }
        Ok(())
    }

    pub fn memory(&self, states: Vec<Vector>) -> Result<EncoderMemory> {
        if states.is_empty() {
            return Err(Error::Empty("attention over encoder states"));
        }
        let mut keys = Vec::with_capacity(states.len());
        for h in &states {
            self.check_len("attention encoder state", h)?;
            keys.push(self.w_h.value.matvec(h)?);
        }
        Ok(EncoderMemory { states, keys })
    }

    /// Scores, weights and context for one decode step.
    pub fn attend(&self, memory: &EncoderMemory, d_prev: &[f64]) -> Result<(AttentionTrace, AttendCache)> {
        if memory.is_empty() {
            return Err(Error::Empty("attention over encoder states"));
        }
        self.check_len("attention decoder state", d_prev)?;
        let hidden = self.hidden();
        let query = self.w_d.value.matvec(d_prev)?;
        let v = self.v.value.as_slice();
        let mut scores = Vec::with_capacity(memory.len());
        let mut activations = Vec::with_capacity(memory.len());
        for key in &memory.keys {
            let z: Vector = key.iter().zip(&query).map(|(k, q)| (k + q).tanh()).collect();
            scores.push(dot(v, &z));
            activations.push(z);
        }
        let weights = softmax(&scores)?;
        let mut context = vec![0.0; hidden];
        for (a, h) in weights.iter().zip(&memory.states) {
            for (c, x) in context.iter_mut().zip(h) {
                *c += a * x;
            }
        }
        let cache = AttendCache {
            d_prev: d_prev.to_vec(),
            activations,
        };
        Ok((
            AttentionTrace {
                scores,
                weights,
                context,
            },
            cache,
        ))
    }

    /// Backpropagates `d_context` through one [`attend`](Self::attend) call.
    /// Encoder-side gradients go into `acc`; returns the gradient w.r.t.
    /// `d_prev`.
    pub fn attend_backward(
        &mut self,
        memory: &EncoderMemory,
        trace: &AttentionTrace,
        cache: &AttendCache,
        d_context: &[f64],
        acc: &mut MemoryGrads,
    ) -> Result<Vector> {
        if cache.activations.len() != memory.len() || acc.states.len() != memory.len() {
            return Err(Error::Cache("attention cache does not match encoder memory"));
        }
        self.check_len("attention context gradient", d_context)?;
        let hidden = self.hidden();
        // d context / d a_i = h_i; d context / d h_i = a_i
        let dweights: Vector = memory.states.iter().map(|h| dot(h, d_context)).collect();
        for (dh, &a) in acc.states.iter_mut().zip(&trace.weights) {
            for (d, g) in dh.iter_mut().zip(d_context) {
                *d += a * g;
            }
        }
        let mean = dot(&trace.weights, &dweights);
        let mut dquery = vec![0.0; hidden];
        let v = self.v.value.as_slice();
        for (i, z) in cache.activations.iter().enumerate() {
            let du = trace.weights[i] * (dweights[i] - mean);
            if du == 0.0 {
                continue;
            }
            for (gv, zj) in self.v.grad.as_mut_slice().iter_mut().zip(z) {
                *gv += du * zj;
            }
            for j in 0..hidden {
                let dpre = du * v[j] * (1.0 - z[j] * z[j]);
                acc.keys[i][j] += dpre;
                dquery[j] += dpre;
            }
        }
        self.w_d.grad.outer_acc(&dquery, &cache.d_prev);
        let mut dd_prev = vec![0.0; hidden];
        self.w_d.value.matvec_t_acc(&dquery, &mut dd_prev);
        Ok(dd_prev)
    }

    /// Folds accumulated key gradients into `W_H` and returns the total
    /// gradient per encoder state.
    pub fn memory_backward(&mut self, memory: &EncoderMemory, acc: MemoryGrads) -> Vec<Vector> {
        let MemoryGrads { mut states, keys } = acc;
        for ((h, dk), dh) in memory.states.iter().zip(&keys).zip(states.iter_mut()) {
            self.w_h.grad.outer_acc(dk, h);
            self.w_h.value.matvec_t_acc(dk, dh);
        }
        states
    }

    /// Vocabulary distribution from the decoder state and, when attention is
    /// enabled, the context vector. `mask` is an optional inverted-dropout
    /// mask over the projected input (`[d_t; d']`, or `d_t` alone).
    pub fn output(&self, d_t: &[f64], context: Option<&[f64]>, mask: Option<Vector>) -> Result<OutputCache> {
        self.check_len("output decoder state", d_t)?;
        let mut input = match context {
            Some(ctx) => {
                self.check_len("output context", ctx)?;
                crate::numerics::concat_rows(d_t, ctx)
            }
            None => d_t.to_vec(),
        };
        if let Some(m) = &mask {
            if m.len() != input.len() {
                return Err(Error::Dimension {
                    op: "output dropout mask",
                    left: (input.len(), 1),
                    right: (m.len(), 1),
                });
            }
            input.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
        }
        let mut logits = self.b_v.value.as_slice().to_vec();
        let hidden = match context {
            Some(_) => {
                let mut hid = self.b_c.value.as_slice().to_vec();
                self.w_c.value.matvec_acc(&input, &mut hid);
                self.w_v.value.matvec_acc(&hid, &mut logits);
                Some(hid)
            }
            None => {
                self.w_v.value.matvec_acc(&input, &mut logits);
                None
            }
        };
        let log_probs = log_softmax(&logits)?;
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok(OutputCache {
            input,
            mask,
            hidden,
            log_probs,
            probs,
        })
    }

    /// Backpropagates logit gradients through the output layer.
    pub fn output_backward(&mut self, cache: &OutputCache, dlogits: &[f64]) -> Result<OutputGrads> {
        if dlogits.len() != self.vocab_size() || cache.probs.len() != self.vocab_size() {
            return Err(Error::Cache("output cache does not match vocabulary size"));
        }
        let hidden = self.hidden();
        self.w_v
            .grad
            .outer_acc(dlogits, cache.hidden.as_deref().unwrap_or(&cache.input));
        for (g, d) in self.b_v.grad.as_mut_slice().iter_mut().zip(dlogits) {
            *g += d;
        }
        let mut dinput = vec![0.0; cache.input.len()];
        match &cache.hidden {
            Some(hid) => {
                let mut dhid = vec![0.0; hidden];
                self.w_v.value.matvec_t_acc(dlogits, &mut dhid);
                debug_assert_eq!(hid.len(), hidden);
                self.w_c.grad.outer_acc(&dhid, &cache.input);
                for (g, d) in self.b_c.grad.as_mut_slice().iter_mut().zip(&dhid) {
                    *g += d;
                }
                self.w_c.value.matvec_t_acc(&dhid, &mut dinput);
            }
            None => self.w_v.value.matvec_t_acc(dlogits, &mut dinput),
        }
        if let Some(m) = &cache.mask {
            dinput.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
        }
        Ok(if cache.hidden.is_some() {
            let d_context = dinput.split_off(hidden);
            OutputGrads {
                d_state: dinput,
                d_context: Some(d_context),
            }
        } else {
            OutputGrads {
                d_state: dinput,
                d_context: None,
            }
        })
    }
}

impl Parameters for AttentionParams {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![
            &self.v, &self.w_h, &self.w_d, &self.w_c, &self.b_c, &self.w_v, &self.b_v,
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.v,
            &mut self.w_h,
            &mut self.w_d,
            &mut self.w_c,
            &mut self.b_c,
            &mut self.w_v,
            &mut self.b_v,
        ]
    }
}

/// Attention trace for `enc_states` against `d_prev`.
pub fn attend(params: &AttentionParams, enc_states: &[Vector], d_prev: &[f64]) -> Result<AttentionTrace> {
    let memory = params.memory(enc_states.to_vec())?;
    Ok(params.attend(&memory, d_prev)?.0)
}

/// Vocabulary distribution for decoder state `d_t` given an attention trace.
pub fn output_distribution(params: &AttentionParams, d_t: &[f64], trace: &AttentionTrace) -> Result<Vector> {
    Ok(params.output(d_t, Some(&trace.context), None)?.probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(hidden: usize, vocab: usize, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = AttentionParams::new(hidden, vocab, 0.8, &mut rng);
        p.b_c.value = Matrix::random_uniform(hidden, 1, 0.5, &mut rng);
        p.b_v.value = Matrix::random_uniform(vocab, 1, 0.5, &mut rng);
        p
    }

    fn random_states(n: usize, hidden: usize, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Matrix::random_uniform(hidden, 1, 0.9, &mut rng).into_vec())
            .collect()
    }

    #[test]
    fn singleton_memory_gets_full_weight() {
        let p = random_params(3, 4, 1);
        let h = vec![0.2, -0.5, 0.7];
        let t = attend(&p, &[h.clone()], &[0.1, 0.1, -0.3]).unwrap();
        assert_eq!(t.weights, vec![1.0]);
        assert_eq!(t.context, h);
    }

    #[test]
    fn identical_states_give_uniform_weights() {
        let p = random_params(3, 4, 2);
        let h = vec![0.2, -0.5, 0.7];
        let t = attend(&p, &vec![h.clone(); 4], &[0.3, 0.0, -0.3]).unwrap();
        assert!(t.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
        for (c, x) in t.context.iter().zip(&h) {
            assert!((c - x).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_memory_is_an_error() {
        let p = random_params(3, 4, 2);
        assert!(matches!(attend(&p, &[], &[0.0; 3]), Err(Error::Empty(_))));
    }

    #[test]
    fn hand_computed_scores() {
        let mut p = random_params(2, 3, 0);
        p.v.value = Matrix::column(&[1.0, -2.0]);
        p.w_h.value = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.1, 1.0]]).unwrap();
        p.w_d.value = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        let h1 = [1.0, 2.0];
        let h2 = [-1.0, 0.5];
        let d = [0.3, -0.2];
        // W_D d = [0.1, -0.4]
        // h1: W_H h1 = [0.5, 2.1] -> tanh([0.6, 1.7])
        // h2: W_H h2 = [-0.5, 0.4] -> tanh([-0.4, 0.0])
        let u1 = 0.6f64.tanh() - 2.0 * 1.7f64.tanh();
        let u2 = (-0.4f64).tanh() - 2.0 * 0.0f64.tanh();
        let a1 = u1.exp() / (u1.exp() + u2.exp());
        let t = attend(&p, &[h1.to_vec(), h2.to_vec()], &d).unwrap();
        assert!((t.scores[0] - u1).abs() < 1e-12);
        assert!((t.scores[1] - u2).abs() < 1e-12);
        assert!((t.weights[0] - a1).abs() < 1e-12);
        assert!((t.weights[1] - (1.0 - a1)).abs() < 1e-12);
        assert!((t.context[0] - (a1 * 1.0 + (1.0 - a1) * -1.0)).abs() < 1e-12);
    }

    #[test]
    fn output_with_zero_projection_is_uniform() {
        let mut p = random_params(3, 5, 3);
        p.w_v.value.fill(0.0);
        p.b_v.value.fill(0.0);
        let t = attend(&p, &random_states(2, 3, 4), &[0.0; 3]).unwrap();
        let probs = output_distribution(&p, &[0.5, -0.5, 0.1], &t).unwrap();
        assert!(probs.iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn output_matches_scalar_oracle() {
        let p = random_params(2, 3, 5);
        let d = [0.4, -0.7];
        let ctx = [0.1, 0.9];
        let out = [d[0], d[1], ctx[0], ctx[1]];
        let mut hid = [0.0; 2];
        for (r, h) in hid.iter_mut().enumerate() {
            *h = p.b_c.value.get(r, 0);
            for (c, o) in out.iter().enumerate() {
                *h += p.w_c.value.get(r, c) * o;
            }
        }
        let mut logits = [0.0; 3];
        for (r, l) in logits.iter_mut().enumerate() {
            *l = p.b_v.value.get(r, 0) + p.w_v.value.get(r, 0) * hid[0] + p.w_v.value.get(r, 1) * hid[1];
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let trace = AttentionTrace {
            scores: vec![0.0],
            weights: vec![1.0],
            context: ctx.to_vec(),
        };
        let probs = output_distribution(&p, &d, &trace).unwrap();
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (pr, l) in probs.iter().zip(logits) {
            assert!((pr - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn output_dimension_errors() {
        let p = random_params(3, 4, 6);
        assert!(p.output(&[0.0; 2], None, None).is_err());
        assert!(p.output(&[0.0; 3], Some(&[0.0; 2]), None).is_err());
        assert!(p.output(&[0.0; 3], None, Some(vec![1.0; 6])).is_err());
    }

    /// One decode step with a fixed target: loss = -log p(target).
    struct Probe {
        states: Vec<Vector>,
        d_prev: Vector,
        d_t: Vector,
        target: usize,
    }

    impl Probe {
        fn loss(&self, p: &AttentionParams) -> Result<f64> {
            let memory = p.memory(self.states.clone())?;
            let (trace, _) = p.attend(&memory, &self.d_prev)?;
            let out = p.output(&self.d_t, Some(&trace.context), None)?;
            Ok(-out.probs[self.target].ln())
        }

        /// Returns (d states, d d_prev, d d_t).
        fn backward(&self, p: &mut AttentionParams, scale: f64) -> (Vec<Vector>, Vector, Vector) {
            let memory = p.memory(self.states.clone()).unwrap();
            let (trace, cache) = p.attend(&memory, &self.d_prev).unwrap();
            let out = p.output(&self.d_t, Some(&trace.context), None).unwrap();
            let mut dlogits = out.probs.clone();
            dlogits[self.target] -= 1.0;
            dlogits.iter_mut().for_each(|x| *x *= scale);
            let g = p.output_backward(&out, &dlogits).unwrap();
            let mut acc = MemoryGrads::zeros(&memory);
            let dd_prev = p
                .attend_backward(&memory, &trace, &cache, g.d_context.as_ref().unwrap(), &mut acc)
                .unwrap();
            (p.memory_backward(&memory, acc), dd_prev, g.d_state)
        }
    }

    fn probe(seed: u64) -> (AttentionParams, Probe) {
        let p = random_params(4, 5, seed);
        let mut s = random_states(5, 4, seed + 100);
        let d_t = s.pop().unwrap();
        let d_prev = s.pop().unwrap();
        (
            p,
            Probe {
                states: s,
                d_prev,
                d_t,
                target: 2,
            },
        )
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let (mut p, pr) = probe(7);
        let (ds, dp, dd) = pr.backward(&mut p, 0.0);
        assert!(ds.iter().flatten().chain(&dp).chain(&dd).all(|&x| x == 0.0));
        assert!(p.parameters().iter().all(|q| q.grad.squared_norm() == 0.0));
    }

    #[test]
    fn parameter_grad_check() {
        let (mut p, pr) = probe(8);
        pr.backward(&mut p, 1.0);
        let report = grad_check(&mut p, 1e-5, |q| pr.loss(q)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn input_grads_match_finite_differences_and_reach_every_state() {
        let (mut p, pr) = probe(9);
        let (ds, dp, dd) = pr.backward(&mut p, 1.0);
        let eps = 1e-5;
        let numeric = |nudge: &dyn Fn(&mut Probe, f64)| {
            let (q, mut plus) = probe(9);
            let (_, mut minus) = probe(9);
            nudge(&mut plus, eps);
            nudge(&mut minus, -eps);
            (plus.loss(&q).unwrap() - minus.loss(&q).unwrap()) / (2.0 * eps)
        };
        for i in 0..ds.len() {
            assert!(ds[i].iter().any(|&x| x != 0.0), "no gradient reaches state {i}");
            for j in 0..4 {
                let n = numeric(&|s: &mut Probe, e| s.states[i][j] += e);
                assert!((n - ds[i][j]).abs() < 1e-7, "state {i},{j}");
            }
        }
        for j in 0..4 {
            let n = numeric(&|s: &mut Probe, e| s.d_prev[j] += e);
            assert!((n - dp[j]).abs() < 1e-7);
            let n = numeric(&|s: &mut Probe, e| s.d_t[j] += e);
            assert!((n - dd[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn no_attention_output_is_projection_of_state() {
        let mut p = random_params(3, 4, 10);
        let d = [0.3, -0.1, 0.8];
        let out = p.output(&d, None, None).unwrap();
        let mut logits = p.b_v.value.as_slice().to_vec();
        p.w_v.value.matvec_acc(&d, &mut logits);
        for (a, b) in out.probs.iter().zip(softmax(&logits).unwrap()) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut dl = out.probs.clone();
        dl[1] -= 1.0;
        let g = p.output_backward(&out, &dl).unwrap();
        assert!(g.d_context.is_none());
        assert_eq!(g.d_state.len(), 3);
        assert_eq!(p.w_c.grad.squared_norm(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_are_a_distribution_and_context_is_convex(
                seed in 0u64..10_000,
                n in 1usize..8,
            ) {
                let p = random_params(4, 3, seed);
                let states = random_states(n, 4, seed ^ 0xabcd);
                let d_prev = random_states(1, 4, seed + 1).pop().unwrap();
                let t = attend(&p, &states, &d_prev).unwrap();
                let total: f64 = t.weights.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(t.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
                for j in 0..4 {
                    let lo = states.iter().map(|h| h[j]).fold(f64::INFINITY, f64::min);
                    let hi = states.iter().map(|h| h[j]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(t.context[j] >= lo - 1e-12 && t.context[j] <= hi + 1e-12);
                }
            }

            #[test]
            fn weights_follow_their_states_under_permutation(seed in 0u64..10_000) {
                let p = random_params(4, 3, seed);
                let states = random_states(5, 4, seed ^ 0x1234);
                let d_prev = random_states(1, 4, seed + 2).pop().unwrap();
                let t = attend(&p, &states, &d_prev).unwrap();
                let perm = [3usize, 0, 4, 1, 2];
                let permuted: Vec<Vector> = perm.iter().map(|&k| states[k].clone()).collect();
                let tp = attend(&p, &permuted, &d_prev).unwrap();
                for (pos, &k) in perm.iter().enumerate() {
                    prop_assert!((tp.weights[pos] - t.weights[k]).abs() < 1e-12);
                }
            }
        }
    }
}
