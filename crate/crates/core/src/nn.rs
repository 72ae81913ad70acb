//! Parameterised building blocks on top of the tape.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};

/// Deterministic parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.rng.random_range(-bound..=bound))
    }

    /// He-uniform weights for a layer with `fan_in` inputs.
    pub fn he(&mut self, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(rows, cols, bound)
    }

    /// Glorot-uniform weights, for attention projections.
    pub fn glorot(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(rows, cols, bound)
    }
}

/// Per-position linear map on `[in × N]` feature maps: `W·x + b`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1x1 {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.he(out_dim, in_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((out_dim, 1)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(w, x);
        tape.add_col(y, b)
    }
}

/// Linear map on `[L × in]` token rows: `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.glorot(in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Self { weight, bias }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Chain of 1×1 convolutions with ReLU between layers.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv1x1>,
    pub final_relu: bool,
}

impl ConvStack {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        final_relu: bool,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Conv1x1::new(store, init, &format!("{name}.{i}"), prev, w));
            prev = w;
        }
        Self { layers, final_relu }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last || self.final_relu {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Single-head scaled dot-product attention on token rows, with a residual:
/// `q_in + softmax(q_in·Wq·(kv·Wk)ᵀ / √C)·kv·Wv·Wo`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        let mut w = |suffix: &str| store.add(format!("{name}.{suffix}"), init.glorot(dim, dim));
        Self {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
            dim,
        }
    }

    /// Returns the output `[Lq × C]` and the attention weights `[Lq × Lk]`.
    pub fn forward_with_weights<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        q_in: Var,
        kv_in: Var,
    ) -> (Var, Var) {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let q = tape.matmul(q_in, wq);
        let k = tape.matmul(kv_in, wk);
        let v = tape.matmul(kv_in, wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        let mixed = tape.matmul(weights, v);
        let projected = tape.matmul(mixed, wo);
        (tape.add(q_in, projected), weights)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, q_in: Var, kv_in: Var) -> Var {
        self.forward_with_weights(tape, store, q_in, kv_in).0
    }
}
