// SPDX-License-Identifier: Apache-2.0

//! Parameterized layers and losses built on [`Graph`] ops.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::param::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId, TensorError> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.init(&full, shape, init, self.rng)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, d_in: usize, d_out: usize) -> Result<Self, TensorError> {
        Ok(Self {
            w: b.param("w", &[d_in, d_out], Init::Xavier)?,
            b: b.param("b", &[d_out], Init::Zeros)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// `x W + b` as a free function over explicit weight nodes.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, d: usize) -> Result<Self, TensorError> {
        Ok(Self { gain: b.param("gain", &[d], Init::Ones)?, bias: b.param("bias", &[d], Init::Zeros)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionSpec {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self, TensorError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(TensorError::Invalid(format!("d_model {d_model} not divisible by {n_heads} heads")));
        }
        Ok(Self { d_model, n_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub spec: AttentionSpec,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder<'_>, spec: AttentionSpec) -> Result<Self, TensorError> {
        let d = spec.d_model;
        Ok(Self {
            spec,
            q: Linear::new(&mut b.scope("q"), d, d)?,
            k: Linear::new(&mut b.scope("k"), d, d)?,
            v: Linear::new(&mut b.scope("v"), d, d)?,
            out: Linear::new(&mut b.scope("out"), d, d)?,
        })
    }

    /// `query: [n_q, d]`, `key`/`value: [n_k, d]` -> `[n_q, d]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var, TensorError> {
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, key)?;
        let v = self.v.forward(g, s, value)?;
        let a = g.attention(q, k, v, self.spec.n_heads)?;
        self.out.forward(g, s, a)
    }
}

/// Two-layer position-wise feed forward network with GELU.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(b: &mut Builder<'_>, d: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self { l1: Linear::new(&mut b.scope("l1"), d, hidden)?, l2: Linear::new(&mut b.scope("l2"), hidden, d)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.l1.forward(g, s, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, s, h)
    }
}

/// Single-layer LSTM cell. Gates are laid out `[input, forget, cell, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(b: &mut Builder<'_>, d_in: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            wx: b.param("wx", &[d_in, 4 * hidden], Init::Xavier)?,
            wh: b.param("wh", &[hidden, 4 * hidden], Init::Xavier)?,
            b: b.param("b", &[4 * hidden], Init::Zeros)?,
            d_in,
            hidden,
        })
    }

    /// One step on `x: [1, d_in]` with state `(h, c)`, each `[1, hidden]`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        state: (Var, Var),
    ) -> Result<(Var, Var), TensorError> {
        let hd = self.hidden;
        let wx = g.param(s, self.wx);
        let wh = g.param(s, self.wh);
        let b = g.param(s, self.b);
        let a = g.matmul(x, wx)?;
        let r = g.matmul(state.0, wh)?;
        let z = g.add(a, r)?;
        let z = g.add_row(z, b)?;
        let i = g.slice_cols(z, 0, hd)?;
        let f = g.slice_cols(z, hd, hd)?;
        let c_in = g.slice_cols(z, 2 * hd, hd)?;
        let o = g.slice_cols(z, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_in = g.tanh(c_in);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.1)?;
        let write = g.mul(i, c_in)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<T>) -> (Var, Var) {
        let shape = [1, self.hidden];
        (g.constant(crate::Tensor::zeros(&shape)), g.constant(crate::Tensor::zeros(&shape)))
    }
}

/// `sum_i -w_i log(probs[i, target_i])` over a matrix of probabilities.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    targets: &[usize],
    weights: &[T],
) -> Result<Var, TensorError> {
    let p = g.pick(probs, targets)?;
    let lp = g.log(p);
    let neg: Vec<T> = weights.iter().map(|&w| -w).collect();
    g.weighted_sum(lp, &neg)
}

/// Same as [`cross_entropy`] but from logits via a stable log-softmax.
pub fn cross_entropy_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    weights: &[T],
) -> Result<Var, TensorError> {
    let lp = g.log_softmax(logits)?;
    let p = g.pick(lp, targets)?;
    let neg: Vec<T> = weights.iter().map(|&w| -w).collect();
    g.weighted_sum(p, &neg)
}

/// Summed L1 distance between `[m, 4]` boxes and constant targets.
pub fn l1<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[T]) -> Result<Var, TensorError> {
    let rows = g.l1_rows(pred, target)?;
    Ok(g.sum(rows))
}

/// Summed `1 - GIoU` between `[m, 4]` center-form boxes and constant targets.
pub fn giou_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[T]) -> Result<Var, TensorError> {
    let rows = g.giou_loss_rows(pred, target)?;
    Ok(g.sum(rows))
}
