//! LSTM cell with hand-derived backward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Matrix, Parameter, Parameters, Vector};

/// Nonlinearity applied to the input modulation gate `g`.
///
/// `PaperLiteral` squashes `g` with the logistic function, `Standard` uses
/// `tanh` as in the usual LSTM formulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulationMode {
    #[default]
    PaperLiteral,
    Standard,
}

impl fmt::Display for ModulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModulationMode::PaperLiteral => "paper-literal",
            ModulationMode::Standard => "standard",
        })
    }
}

impl FromStr for ModulationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(ModulationMode::PaperLiteral),
            "standard" => Ok(ModulationMode::Standard),
            other => Err(Error::Config(format!("unknown modulation mode `{other}`"))),
        }
    }
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];
const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const G: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// Input-to-gate matrices, `hidden × input_dim`, in gate order i, f, o, g.
    pub w_x: [Parameter; 4],
    /// Hidden-to-gate matrices, `hidden × hidden`.
    pub w_h: [Parameter; 4],
    pub b: [Parameter; 4],
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Forward activations of one step, needed by the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    pub g: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
    mode: ModulationMode,
}

/// Gradients flowing out of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStepGrads {
    pub dx: Vector,
    pub dh_prev: Vector,
    pub dc_prev: Vector,
}

impl LstmParams {
    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn new<R: Rng + ?Sized>(prefix: &str, input_dim: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let w_x = GATES.map(|g| {
            Parameter::new(
                format!("{prefix}.w_x{g}"),
                Matrix::random_uniform(hidden, input_dim, scale, rng),
            )
        });
        let w_h = GATES.map(|g| {
            Parameter::new(
                format!("{prefix}.w_h{g}"),
                Matrix::random_uniform(hidden, hidden, scale, rng),
            )
        });
        let b = GATES.map(|g| Parameter::zeros(format!("{prefix}.b_{g}"), hidden, 1));
        Self { w_x, w_h, b }
    }

    pub fn hidden(&self) -> usize {
        self.w_h[0].value.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x[0].value.cols()
    }

    pub fn step(&self, x: &[f64], prev: &LstmState, mode: ModulationMode) -> Result<(LstmState, LstmCache)> {
        let hidden = self.hidden();
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                op: "lstm_step input",
                left: self.w_x[0].value.shape(),
                right: (x.len(), 1),
            });
        }
        if prev.h.len() != hidden || prev.c.len() != hidden {
            return Err(Error::Dimension {
                op: "lstm_step state",
                left: (hidden, hidden),
                right: (prev.h.len(), prev.c.len()),
            });
        }
        let mut pre: [Vector; 4] = std::array::from_fn(|k| self.b[k].value.as_slice().to_vec());
        for (k, a) in pre.iter_mut().enumerate() {
            self.w_x[k].value.matvec_acc(x, a);
            self.w_h[k].value.matvec_acc(&prev.h, a);
        }
        let [ai, af, ao, ag] = pre;
        let squash = |v: Vector| -> Vector { v.into_iter().map(sigmoid_scalar).collect() };
        let i = squash(ai);
        let f = squash(af);
        let o = squash(ao);
        let g: Vector = match mode {
            ModulationMode::PaperLiteral => squash(ag),
            ModulationMode::Standard => ag.into_iter().map(f64::tanh).collect(),
        };
        let c: Vector = (0..hidden).map(|j| f[j] * prev.c[j] + i[j] * g[j]).collect();
        let tanh_c: Vector = c.iter().map(|v| v.tanh()).collect();
        let h: Vector = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
        let cache = LstmCache {
            x: x.to_vec(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            i,
            f,
            o,
            g,
            c: c.clone(),
            tanh_c,
            mode,
        };
        Ok((LstmState { h, c }, cache))
    }

    /// Backpropagates `dh`, `dc` (gradients w.r.t. this step's outputs)
    /// through one step, accumulating into the parameter gradients.
    pub fn step_backward(&mut self, cache: &LstmCache, dh: &[f64], dc: &[f64]) -> Result<LstmStepGrads> {
        let hidden = self.hidden();
        if cache.i.len() != hidden || cache.x.len() != self.input_dim() {
            return Err(Error::Cache("lstm cache does not match parameter shapes"));
        }
        if dh.len() != hidden || dc.len() != hidden {
            return Err(Error::Dimension {
                op: "lstm_step_backward",
                left: (hidden, hidden),
                right: (dh.len(), dc.len()),
            });
        }
        let mut da: [Vector; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        let mut dc_prev = vec![0.0; hidden];
        for j in 0..hidden {
            let (i, f, o, g, t) = (cache.i[j], cache.f[j], cache.o[j], cache.g[j], cache.tanh_c[j]);
            let dct = dc[j] + dh[j] * o * (1.0 - t * t);
            let d_o = dh[j] * t;
            let d_i = dct * g;
            let d_g = dct * i;
            let d_f = dct * cache.c_prev[j];
            dc_prev[j] = dct * f;
            da[I][j] = d_i * i * (1.0 - i);
            da[F][j] = d_f * f * (1.0 - f);
            da[O][j] = d_o * o * (1.0 - o);
            da[G][j] = match cache.mode {
                ModulationMode::PaperLiteral => d_g * g * (1.0 - g),
                ModulationMode::Standard => d_g * (1.0 - g * g),
            };
        }
        let mut dx = vec![0.0; self.input_dim()];
        let mut dh_prev = vec![0.0; hidden];
        for (k, a) in da.iter().enumerate() {
            self.w_x[k].grad.outer_acc(a, &cache.x);
            self.w_h[k].grad.outer_acc(a, &cache.h_prev);
            for (gb, v) in self.b[k].grad.as_mut_slice().iter_mut().zip(a) {
                *gb += v;
            }
            self.w_x[k].value.matvec_t_acc(a, &mut dx);
            self.w_h[k].value.matvec_t_acc(a, &mut dh_prev);
        }
        Ok(LstmStepGrads { dx, dh_prev, dc_prev })
    }
}

impl Parameters for LstmParams {
    fn parameters(&self) -> Vec<&Parameter> {
        self.w_x.iter().chain(&self.w_h).chain(&self.b).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.w_x
            .iter_mut()
            .chain(self.w_h.iter_mut())
            .chain(self.b.iter_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, log_softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(input: usize, hidden: usize) -> LstmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        LstmParams::new("t", input, hidden, 0.0, &mut rng)
    }

    #[test]
    fn zero_params_paper_literal() {
        let p = zero_params(3, 4);
        let (s, cache) = p
            .step(&[1.0, -2.0, 3.0], &LstmState::zeros(4), ModulationMode::PaperLiteral)
            .unwrap();
        assert!(cache.g.iter().all(|&g| g == 0.5));
        assert!(s.c.iter().all(|&c| (c - 0.25).abs() < 1e-15));
        let expected = 0.5 * 0.25f64.tanh();
        assert!(s.h.iter().all(|&h| (h - expected).abs() < 1e-15));
        assert!((expected - 0.12245).abs() < 1e-5);
    }

    #[test]
    fn zero_params_standard() {
        let p = zero_params(3, 4);
        let (s, _) = p
            .step(&[1.0, -2.0, 3.0], &LstmState::zeros(4), ModulationMode::Standard)
            .unwrap();
        assert!(s.h.iter().chain(&s.c).all(|&v| v == 0.0));
    }

    /// Scalar re-implementation used as an oracle.
    fn scalar_step(p: &LstmParams, x: &[f64], prev: &LstmState, sigmoid_g: bool) -> LstmState {
        let hidden = p.hidden();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        for j in 0..hidden {
            let mut gates = [0.0; 4];
            for (k, gate) in gates.iter_mut().enumerate() {
                let mut s = p.b[k].value.get(j, 0);
                for (m, xm) in x.iter().enumerate() {
                    s += p.w_x[k].value.get(j, m) * xm;
                }
                for (m, hm) in prev.h.iter().enumerate() {
                    s += p.w_h[k].value.get(j, m) * hm;
                }
                *gate = if k == 3 && !sigmoid_g { s.tanh() } else { sig(s) };
            }
            c[j] = gates[1] * prev.c[j] + gates[0] * gates[3];
            h[j] = gates[2] * c[j].tanh();
        }
        LstmState { h, c }
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = LstmParams::new("t", 2, 3, 0.8, &mut rng);
        for b in &mut p.b {
            b.value = Matrix::random_uniform(3, 1, 0.8, &mut rng);
        }
        let prev = LstmState {
            h: vec![0.1, -0.4, 0.3],
            c: vec![0.5, -1.0, 0.2],
        };
        for (mode, sigmoid_g) in [(ModulationMode::PaperLiteral, true), (ModulationMode::Standard, false)] {
            let (s, _) = p.step(&[0.9, -0.6], &prev, mode).unwrap();
            let o = scalar_step(&p, &[0.9, -0.6], &prev, sigmoid_g);
            for j in 0..3 {
                assert!((s.h[j] - o.h[j]).abs() < 1e-12);
                assert!((s.c[j] - o.c[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let p = zero_params(3, 4);
        assert!(p.step(&[1.0], &LstmState::zeros(4), ModulationMode::Standard).is_err());
        assert!(p
            .step(&[1.0; 3], &LstmState::zeros(2), ModulationMode::Standard)
            .is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = LstmParams::new("t", 3, 4, 0.5, &mut rng);
        let (_, cache) = p
            .step(&[0.3, 0.1, -0.2], &LstmState::zeros(4), ModulationMode::PaperLiteral)
            .unwrap();
        let g = p.step_backward(&cache, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(g.dx.iter().chain(&g.dh_prev).chain(&g.dc_prev).all(|&v| v == 0.0));
        assert!(p.parameters().iter().all(|q| q.grad.squared_norm() == 0.0));
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let small = LstmParams::new("t", 3, 2, 0.5, &mut rng);
        let mut big = LstmParams::new("t", 3, 4, 0.5, &mut rng);
        let (_, cache) = small
            .step(&[0.3, 0.1, -0.2], &LstmState::zeros(2), ModulationMode::PaperLiteral)
            .unwrap();
        assert!(matches!(
            big.step_backward(&cache, &[0.0; 4], &[0.0; 4]),
            Err(Error::Cache(_))
        ));
    }

    /// Runs `xs` through the cell from `init`, applies a fixed readout to
    /// every hidden state and sums softmax NLL against `targets`.
    struct Seq {
        lstm: LstmParams,
        readout: Matrix,
        xs: Vec<Vector>,
        targets: Vec<usize>,
        init: LstmState,
        mode: ModulationMode,
    }

    impl Seq {
        fn loss(&self, lstm: &LstmParams) -> f64 {
            let mut state = self.init.clone();
            let mut total = 0.0;
            for (x, &t) in self.xs.iter().zip(&self.targets) {
                state = lstm.step(x, &state, self.mode).unwrap().0;
                let logits = self.readout.matvec(&state.h).unwrap();
                total -= log_softmax(&logits).unwrap()[t];
            }
            total
        }

        fn backward(&self, lstm: &mut LstmParams) -> (Vector, LstmStepGrads) {
            let mut state = self.init.clone();
            let mut caches = Vec::new();
            let mut dlogits = Vec::new();
            for (x, &t) in self.xs.iter().zip(&self.targets) {
                let (s, cache) = lstm.step(x, &state, self.mode).unwrap();
                let logits = self.readout.matvec(&s.h).unwrap();
                let mut p = crate::numerics::softmax(&logits).unwrap();
                p[t] -= 1.0;
                dlogits.push(p);
                caches.push(cache);
                state = s;
            }
            let hidden = lstm.hidden();
            let mut dh_next = vec![0.0; hidden];
            let mut dc_next = vec![0.0; hidden];
            let mut last = None;
            let mut dx0 = Vec::new();
            for (cache, dl) in caches.iter().zip(&dlogits).rev() {
                let mut dh = dh_next.clone();
                self.readout.matvec_t_acc(dl, &mut dh);
                let g = lstm.step_backward(cache, &dh, &dc_next).unwrap();
                dh_next = g.dh_prev.clone();
                dc_next = g.dc_prev.clone();
                dx0 = g.dx.clone();
                last = Some(g);
            }
            (dx0, last.unwrap())
        }
    }

    fn make_seq(len: usize, hidden: usize, mode: ModulationMode, seed: u64) -> Seq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lstm = LstmParams::new("t", 3, hidden, 0.5, &mut rng);
        for b in &mut lstm.b {
            b.value = Matrix::random_uniform(hidden, 1, 0.5, &mut rng);
        }
        let readout = Matrix::random_uniform(5, hidden, 1.0, &mut rng);
        let xs = (0..len)
            .map(|_| Matrix::random_uniform(3, 1, 1.0, &mut rng).into_vec())
            .collect();
        let targets = (0..len).map(|_| rng.gen_range(0..5)).collect();
        let init = LstmState {
            h: Matrix::random_uniform(hidden, 1, 0.5, &mut rng).into_vec(),
            c: Matrix::random_uniform(hidden, 1, 0.5, &mut rng).into_vec(),
        };
        Seq {
            lstm,
            readout,
            xs,
            targets,
            init,
            mode,
        }
    }

    fn check_sequence(len: usize, hidden: usize, mode: ModulationMode, seed: u64) -> f64 {
        let mut seq = make_seq(len, hidden, mode, seed);
        let mut lstm = seq.lstm.clone();
        seq.backward(&mut lstm);
        seq.lstm = lstm.clone();
        grad_check(&mut lstm, 1e-5, |l| Ok(seq.loss(l))).unwrap().max_rel_error
    }

    #[test]
    fn single_step_grad_check() {
        for mode in [ModulationMode::PaperLiteral, ModulationMode::Standard] {
            let err = check_sequence(1, 4, mode, 5);
            assert!(err < 1e-4, "{mode}: {err}");
        }
    }

    #[test]
    fn bptt_grad_check() {
        for mode in [ModulationMode::PaperLiteral, ModulationMode::Standard] {
            assert!(check_sequence(2, 4, mode, 6) < 1e-4);
            assert!(check_sequence(8, 8, mode, 7) < 1e-4);
        }
    }

    #[test]
    fn input_and_state_gradients_match_finite_differences() {
        let seq = make_seq(3, 4, ModulationMode::PaperLiteral, 9);
        let mut lstm = seq.lstm.clone();
        let (dx0, first) = seq.backward(&mut lstm);
        let eps = 1e-5;
        let probe = |f: &dyn Fn(&mut Seq)| {
            let mut s = make_seq(3, 4, ModulationMode::PaperLiteral, 9);
            f(&mut s);
            s.loss(&s.lstm)
        };
        for k in 0..3 {
            let plus = probe(&|s: &mut Seq| s.xs[0][k] += eps);
            let minus = probe(&|s: &mut Seq| s.xs[0][k] -= eps);
            let numeric = (plus - minus) / (2.0 * eps);
            assert!((numeric - dx0[k]).abs() < 1e-7, "dx[{k}]");
        }
        for k in 0..4 {
            let plus = probe(&|s: &mut Seq| s.init.h[k] += eps);
            let minus = probe(&|s: &mut Seq| s.init.h[k] -= eps);
            assert!(((plus - minus) / (2.0 * eps) - first.dh_prev[k]).abs() < 1e-7);
            let plus = probe(&|s: &mut Seq| s.init.c[k] += eps);
            let minus = probe(&|s: &mut Seq| s.init.c[k] -= eps);
            assert!(((plus - minus) / (2.0 * eps) - first.dc_prev[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_accumulates() {
        let seq = make_seq(3, 4, ModulationMode::PaperLiteral, 4);
        let mut once = seq.lstm.clone();
        seq.backward(&mut once);
        let mut twice = seq.lstm.clone();
        seq.backward(&mut twice);
        seq.backward(&mut twice);
        for (a, b) in once.parameters().iter().zip(twice.parameters()) {
            for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn modulation_mode_parses() {
        assert_eq!("standard".parse::<ModulationMode>().unwrap(), ModulationMode::Standard);
        assert_eq!(ModulationMode::default().to_string(), "paper-literal");
        assert!("sigmoid".parse::<ModulationMode>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hidden_state_and_gates_are_bounded(
                seed in 0u64..1000,
                xs in proptest::collection::vec(-50.0f64..50.0, 3),
                standard in any::<bool>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = LstmParams::new("t", 3, 5, 2.0, &mut rng);
                let mode = if standard { ModulationMode::Standard } else { ModulationMode::PaperLiteral };
                let mut state = LstmState::zeros(5);
                for _ in 0..4 {
                    let (s, cache) = p.step(&xs, &state, mode).unwrap();
                    for v in cache.i.iter().chain(&cache.f).chain(&cache.o) {
                        prop_assert!(*v >= 0.0 && *v <= 1.0);
                    }
                    for h in &s.h {
                        prop_assert!(h.abs() <= 1.0);
                    }
                    state = s;
                }
            }
        }
    }
}
