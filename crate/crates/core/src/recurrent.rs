//! LSTM cells, unrolling and bidirectional composition.
//!
//! Everything is batched: inputs are `[batch × features]` nodes and weights
//! are laid out for right-multiplication. The four gates of one direction are
//! stacked column-wise into a single matrix, in the order
//! forget | input | cell | output, so one step costs two matrix products.

use std::collections::HashMap;

use rand::Rng;

use crate::diff::{Graph, Var};
use crate::error::{Result, VelcError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gate order inside the stacked weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Cell = 2,
    Output = 3,
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub output_size: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        output_size: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input_size as f64).sqrt();
        let weight = store.insert_uniform(
            format!("{name}.weight"),
            &[input_size, output_size],
            bound,
            rng,
        );
        let bias = store.insert_uniform(format!("{name}.bias"), &[1, output_size], bound, rng);
        Linear {
            weight,
            bias,
            input_size,
            output_size,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Weights of one LSTM direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[input × 4·hidden]`
    pub w_input: ParamId,
    /// `[hidden × 4·hidden]`
    pub w_hidden: ParamId,
    /// `[1 × 4·hidden]`
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    /// Uniform initialization in `[-1/√hidden, 1/√hidden]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let h4 = 4 * hidden_size;
        let w_input = store.insert_uniform(format!("{name}.w_input"), &[input_size, h4], bound, rng);
        let w_hidden =
            store.insert_uniform(format!("{name}.w_hidden"), &[hidden_size, h4], bound, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), &[1, h4], bound, rng);
        LstmParams {
            w_input,
            w_hidden,
            bias,
            input_size,
            hidden_size,
        }
    }

    /// Column range of `gate` inside the stacked matrices.
    pub fn gate_columns(&self, gate: Gate) -> std::ops::Range<usize> {
        let h = self.hidden_size;
        let k = gate as usize;
        k * h..(k + 1) * h
    }

    /// `x·U + b` for all four gates; reused across steps when the same input
    /// is fed repeatedly.
    pub fn project_input(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_size {
            return Err(VelcError::Shape {
                op: "lstm input",
                left: shape.to_vec(),
                right: vec![self.input_size],
            });
        }
        let u = g.param(store, self.w_input);
        let b = g.param(store, self.bias);
        let xu = g.matmul(x, u)?;
        g.add_row(xu, b)
    }

    /// One step given a precomputed input projection.
    pub fn step_projected(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_proj: Var,
        state: &LstmState,
    ) -> Result<LstmState> {
        let w = g.param(store, self.w_hidden);
        let hw = g.matmul(state.h, w)?;
        let pre = g.add(x_proj, hw)?;
        let c = g.cell_state(pre, state.c)?;
        let h_new = g.cell_output(pre, c)?;
        Ok(LstmState { h: h_new, c })
    }
}

/// Hidden and cell state of one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize) -> Self {
        let h = g.input(Tensor::zeros(&[batch, hidden]));
        let c = g.input(Tensor::zeros(&[batch, hidden]));
        LstmState { h, c }
    }
}

/// `f=σ(xU_f+hW_f+b_f)`, `i=σ(…)`, `g=tanh(…)`, `o=σ(…)`,
/// `c′=f⊙c+i⊙g`, `h′=o⊙tanh(c′)`.
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    x_t: Var,
    state: &LstmState,
) -> Result<LstmState> {
    if g.shape(state.h) != g.shape(state.c) || g.shape(state.h)[1] != p.hidden_size {
        return Err(VelcError::Shape {
            op: "lstm state",
            left: g.shape(state.h).to_vec(),
            right: vec![p.hidden_size],
        });
    }
    let proj = p.project_input(g, store, x_t)?;
    p.step_projected(g, store, proj, state)
}

/// Runs one direction over `xs` from a zero state, returning every state in
/// processing order. Identical input nodes share one input projection.
pub fn lstm_unroll(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    xs: impl IntoIterator<Item = Var>,
) -> Result<Vec<LstmState>> {
    let mut projected: HashMap<Var, Var> = HashMap::new();
    let mut states = Vec::new();
    let mut state: Option<LstmState> = None;
    for x in xs {
        let proj = match projected.get(&x) {
            Some(&v) => v,
            None => {
                let v = p.project_input(g, store, x)?;
                projected.insert(x, v);
                v
            }
        };
        let prev = match state {
            Some(s) => s,
            None => LstmState::zeros(g, g.shape(x)[0], p.hidden_size),
        };
        let next = p.step_projected(g, store, proj, &prev)?;
        states.push(next);
        state = Some(next);
    }
    Ok(states)
}

/// Forward and backward LSTM directions sharing a hidden size.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        BiLstmParams {
            forward: LstmParams::new(store, &format!("{name}.fwd"), input_size, hidden_size, rng),
            backward: LstmParams::new(store, &format!("{name}.bwd"), input_size, hidden_size, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size
    }

    pub fn input_size(&self) -> usize {
        self.forward.input_size
    }
}

/// Hidden sequences of both directions, aligned by time step: `backward[t]`
/// is the backward direction's state after consuming `x_T … x_t`.
#[derive(Debug, Clone)]
pub struct BiStates {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

impl BiStates {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// `concat(h_fwd_t, h_bwd_t)`.
    pub fn concat_at(&self, g: &mut Graph, t: usize) -> Result<Var> {
        g.concat_cols(&[self.forward[t], self.backward[t]])
    }

    /// Sequence summary: the last forward state next to the last backward
    /// state (which sits at t = 0).
    pub fn summary(&self, g: &mut Graph) -> Result<Var> {
        let last = self.forward.len() - 1;
        g.concat_cols(&[self.forward[last], self.backward[0]])
    }
}

pub fn bilstm_states(
    g: &mut Graph,
    store: &ParamStore,
    p: &BiLstmParams,
    xs: &[Var],
) -> Result<BiStates> {
    if xs.is_empty() {
        return Err(VelcError::Empty("bi-LSTM input sequence".into()));
    }
    let fwd = lstm_unroll(g, store, &p.forward, xs.iter().copied())?;
    let mut bwd = lstm_unroll(g, store, &p.backward, xs.iter().rev().copied())?;
    bwd.reverse();
    Ok(BiStates {
        forward: fwd.into_iter().map(|s| s.h).collect(),
        backward: bwd.into_iter().map(|s| s.h).collect(),
    })
}

/// Per-step outputs `V·concat(h_fwd_t, h_bwd_t) + bias`.
pub fn bilstm_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &BiLstmParams,
    head: &Linear,
    xs: &[Var],
) -> Result<Vec<Var>> {
    if head.input_size != 2 * p.hidden_size() {
        return Err(VelcError::Shape {
            op: "bi-LSTM head",
            left: vec![head.input_size],
            right: vec![2 * p.hidden_size()],
        });
    }
    let states = bilstm_states(g, store, p, xs)?;
    (0..states.len())
        .map(|t| {
            let cat = states.concat_at(g, t)?;
            head.forward(g, store, cat)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check_params, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn col(values: &[f64]) -> Tensor {
        Tensor::matrix(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 2, 3, &mut rng);
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.input(col(&[0.4, -2.0]));
        let s = LstmState::zeros(&mut g, 1, 3);
        let next = lstm_step(&mut g, &store, &p, x, &s).unwrap();
        assert_eq!(g.value(next.h).data(), &[0.0; 3]);
        assert_eq!(g.value(next.c).data(), &[0.0; 3]);
    }

    #[test]
    fn zero_params_unit_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 2, 3, &mut rng);
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.input(col(&[1.0, 1.0]));
        let h = g.input(Tensor::zeros(&[1, 3]));
        let c = g.input(col(&[1.0, 1.0, 1.0]));
        let next = lstm_step(&mut g, &store, &p, x, &LstmState { h, c }).unwrap();
        for &v in g.value(next.c).data() {
            assert_eq!(v, 0.5);
        }
        for &v in g.value(next.h).data() {
            assert_eq!(v, 0.5 * 0.5f64.tanh());
        }
    }

    #[test]
    fn random_cell_matches_hand_evaluated_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 3, 2, &mut rng);
        let x = [0.3, -0.8, 1.2];
        let h = [0.1, -0.4];
        let c = [0.7, -0.2];

        let mut g = Graph::new();
        let xv = g.input(col(&x));
        let hv = g.input(col(&h));
        let cv = g.input(col(&c));
        let next = lstm_step(&mut g, &store, &p, xv, &LstmState { h: hv, c: cv }).unwrap();

        let u = store.get(p.w_input);
        let w = store.get(p.w_hidden);
        let b = store.get(p.bias);
        let pre = |col: usize| {
            let mut acc = b.data()[col];
            for (k, xk) in x.iter().enumerate() {
                acc += xk * u.get(k, col);
            }
            for (k, hk) in h.iter().enumerate() {
                acc += hk * w.get(k, col);
            }
            acc
        };
        for (j, &c_prev) in c.iter().enumerate() {
            let f = sigmoid(pre(j));
            let i = sigmoid(pre(2 + j));
            let gg = pre(4 + j).tanh();
            let o = sigmoid(pre(6 + j));
            let c_new = f * c_prev + i * gg;
            let h_new = o * c_new.tanh();
            assert!((g.value(next.c).data()[j] - c_new).abs() < 1e-12);
            assert!((g.value(next.h).data()[j] - h_new).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_output_is_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = BiLstmParams::new(&mut store, "b", 1, 4, &mut rng);
        let head = Linear::new(&mut store, "head", 8, 2, &mut rng);
        zero_all(&mut store);
        store.get_mut(head.bias).data_mut().copy_from_slice(&[0.25, -1.5]);
        let mut g = Graph::new();
        let xs: Vec<Var> = (0..5).map(|t| g.input(col(&[t as f64]))).collect();
        let out = bilstm_forward(&mut g, &store, &p, &head, &xs).unwrap();
        assert_eq!(out.len(), 5);
        for o in out {
            assert_eq!(g.value(o).data(), &[0.25, -1.5]);
        }
    }

    #[test]
    fn single_step_sequence_is_two_steps_plus_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = BiLstmParams::new(&mut store, "b", 2, 3, &mut rng);
        let head = Linear::new(&mut store, "head", 6, 1, &mut rng);
        let mut g = Graph::new();
        let x = g.input(col(&[0.5, -0.5]));
        let out = bilstm_forward(&mut g, &store, &p, &head, &[x]).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.input(col(&[0.5, -0.5]));
        let z = LstmState::zeros(&mut g2, 1, 3);
        let f = lstm_step(&mut g2, &store, &p.forward, x2, &z).unwrap();
        let b = lstm_step(&mut g2, &store, &p.backward, x2, &z).unwrap();
        let cat = g2.concat_cols(&[f.h, b.h]).unwrap();
        let o = head.forward(&mut g2, &store, cat).unwrap();
        assert_eq!(g.value(out[0]), g2.value(o));
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = BiLstmParams::new(&mut store, "b", 1, 3, &mut rng);
        let mut g = Graph::new();
        assert!(matches!(
            bilstm_states(&mut g, &store, &p, &[]),
            Err(VelcError::Empty(_))
        ));
    }

    /// Copies the forward direction's weights into the backward direction.
    fn mirror(store: &mut ParamStore, p: &BiLstmParams) {
        for (src, dst) in [
            (p.forward.w_input, p.backward.w_input),
            (p.forward.w_hidden, p.backward.w_hidden),
            (p.forward.bias, p.backward.bias),
        ] {
            let t = store.get(src).clone();
            *store.get_mut(dst) = t;
        }
    }

    #[test]
    fn palindrome_with_mirrored_params_gives_mirrored_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let p = BiLstmParams::new(&mut store, "b", 1, 3, &mut rng);
        mirror(&mut store, &p);
        let seq = [0.1, 0.9, -0.4, 0.9, 0.1];
        let mut g = Graph::new();
        let xs: Vec<Var> = seq.iter().map(|&v| g.input(col(&[v]))).collect();
        let st = bilstm_states(&mut g, &store, &p, &xs).unwrap();

        // Explicit oracle: run one direction left-to-right by hand.
        let mut g2 = Graph::new();
        let mut s = LstmState::zeros(&mut g2, 1, 3);
        let mut manual = Vec::new();
        for &v in &seq {
            let x = g2.input(col(&[v]));
            s = lstm_step(&mut g2, &store, &p.forward, x, &s).unwrap();
            manual.push(g2.value(s.h).clone());
        }
        let t_len = seq.len();
        for t in 0..t_len {
            assert_eq!(g.value(st.forward[t]), &manual[t]);
            assert_eq!(g.value(st.backward[t]), &manual[t_len - 1 - t]);
            assert_eq!(g.value(st.forward[t]), g.value(st.backward[t_len - 1 - t]));
        }
    }

    #[test]
    fn reversing_input_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let p = BiLstmParams::new(&mut store, "b", 1, 4, &mut rng);
        mirror(&mut store, &p);
        let seq: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xs: Vec<Var> = seq.iter().map(|&v| g.input(col(&[v]))).collect();
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let a = bilstm_states(&mut g, &store, &p, &xs).unwrap();
        let b = bilstm_states(&mut g, &store, &p, &rev).unwrap();
        let n = seq.len();
        for t in 0..n {
            assert_eq!(g.value(a.forward[t]), g.value(b.backward[n - 1 - t]));
            assert_eq!(g.value(a.backward[t]), g.value(b.forward[n - 1 - t]));
        }
    }

    #[test]
    fn hidden_state_stays_bounded_over_long_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 1, 4, &mut rng);
        let mut g = Graph::new();
        let xs: Vec<Var> = (0..1000)
            .map(|t| g.input(col(&[(t as f64 * 0.37).sin() * 3.0])))
            .collect();
        let states = lstm_unroll(&mut g, &store, &p, xs).unwrap();
        for s in states {
            assert!(g.value(s.h).data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn unrolled_bilstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let p = BiLstmParams::new(&mut store, "b", 1, 3, &mut rng);
        let head = Linear::new(&mut store, "head", 6, 1, &mut rng);
        let seq: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = finite_diff_check_params(
            &store,
            |g, s| {
                let xs: Vec<Var> = seq.iter().map(|&v| g.input(col(&[v]))).collect();
                let out = bilstm_forward(g, s, &p, &head, &xs)?;
                let cat = g.concat_cols(&out)?;
                let sq = g.square(cat)?;
                g.sum(sq, None)
            },
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
