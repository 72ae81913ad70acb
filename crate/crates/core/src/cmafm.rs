//! Cross-modal adaptive fusion: point features and object knowledge
//! re-represent each other, the knowledge is injected into the point
//! features, and affordance knowledge is fused into the image features.

use ndarray::Array2;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvStack, Init};

/// One direction of the column-oriented cross-attention:
/// `out = V·softmax((Wq·X)ᵀ(Wk·Y)/√d)ᵀ` with `V = Wv·Y`.
#[derive(Clone, Copy, Debug)]
struct ColumnAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

impl ColumnAttention {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, c: usize, d: usize) -> Self {
        Self {
            wq: store.add(format!("{name}.wq"), init.glorot(d, c)),
            wk: store.add(format!("{name}.wk"), init.glorot(d, c)),
            wv: store.add(format!("{name}.wv"), init.glorot(c, c)),
        }
    }

    /// `x: [C × Nq]`, `y: [C × Nk]` → (`[C × Nq]`, weights `[Nq × Nk]`).
    fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, y: Var, d: usize) -> (Var, Var) {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(wq, x);
        let k = tape.matmul(wk, y);
        let v = tape.matmul(wv, y);
        let qt = tape.transpose(q);
        let scores = tape.matmul(qt, k);
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        let wt = tape.transpose(weights);
        (tape.matmul(v, wt), weights)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoRepresentation {
    /// `F'_p`, `[C × N_p]`.
    pub points: Var,
    /// `T̄'_o`, `[C × N_o]`.
    pub knowledge: Var,
    /// `[N_p × N_o]`
    pub point_weights: Var,
    /// `[N_o × N_p]`
    pub knowledge_weights: Var,
}

#[derive(Clone, Debug)]
pub struct Cmafm {
    point_query: ColumnAttention,
    knowledge_query: ColumnAttention,
    /// `f_φ`: two feature-wise FC layers, shared by both inputs.
    pub f_phi: ConvStack,
    /// `f` of the geometry injection, 2C → C → C.
    pub f_geometry: ConvStack,
    /// `f` of the intention fusion, 2C → C → C.
    pub f_intention: ConvStack,
    channels: usize,
    d: usize,
}

impl Cmafm {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("attention dimension d must be positive".into()));
        }
        let c = channels;
        Ok(Self {
            point_query: ColumnAttention::new(store, init, "cmafm.points", c, d),
            knowledge_query: ColumnAttention::new(store, init, "cmafm.knowledge", c, d),
            f_phi: ConvStack::new(store, init, "cmafm.f_phi", c, &[c, c], false),
            f_geometry: ConvStack::new(store, init, "cmafm.f_geometry", 2 * c, &[c, c], false),
            f_intention: ConvStack::new(store, init, "cmafm.f_intention", 2 * c, &[c, c], false),
            channels,
            d,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn d(&self) -> usize {
        self.d
    }

    fn expect_rows(&self, tape: &Tape, v: Var, what: &str) -> Result<usize> {
        let (r, n) = tape.shape(v);
        if r != self.channels || n == 0 {
            return Err(Error::Shape(format!("{what} is {r}x{n}, expected [{} × N]", self.channels)));
        }
        Ok(n)
    }

    /// `F_p: [C × N_p]`, `T̄_o: [N_o × C]` → `F'_p`, `T̄'_o`.
    pub fn co_represent<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        f_p: Var,
        t_o: Var,
    ) -> Result<CoRepresentation> {
        self.expect_rows(tape, f_p, "F_p")?;
        let (n_o, c) = tape.shape(t_o);
        if c != self.channels || n_o == 0 {
            return Err(Error::Shape(format!("T̄_o is {n_o}x{c}, expected [N_o × {}]", self.channels)));
        }
        let t_cols = tape.transpose(t_o);
        let (points, point_weights) = self.point_query.forward(tape, store, f_p, t_cols, self.d);
        let (knowledge, knowledge_weights) = self.knowledge_query.forward(tape, store, t_cols, f_p, self.d);
        Ok(CoRepresentation {
            points,
            knowledge,
            point_weights,
            knowledge_weights,
        })
    }

    /// `P_o = f[F'_p + f_φ(F'_p), Θ(T̄'_o + f_φ(T̄'_o))]`, `[C × N_p]`.
    pub fn inject_geometry<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, f_p: Var, t_o: Var) -> Result<Var> {
        let n_p = self.expect_rows(tape, f_p, "F'_p")?;
        self.expect_rows(tape, t_o, "T̄'_o")?;
        let dp = self.f_phi.forward(tape, store, f_p);
        let points = tape.add(f_p, dp);
        let dk = self.f_phi.forward(tape, store, t_o);
        let knowledge = tape.add(t_o, dk);
        let pooled = tape.mean_cols(knowledge);
        let expanded = tape.broadcast_cols(pooled, n_p);
        let cat = tape.concat_rows(&[points, expanded]);
        Ok(self.f_geometry.forward(tape, store, cat))
    }

    /// `F_ti = f[Γ(T̄_a), F_i]` with Γ = mean over rows, broadcast over `N_i`.
    pub fn fuse_intention<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, t_a: Var, f_i: Var) -> Result<Var> {
        let n_i = self.expect_rows(tape, f_i, "F_i")?;
        let (n_a, c) = tape.shape(t_a);
        if c != self.channels || n_a == 0 {
            return Err(Error::Shape(format!("T̄_a is {n_a}x{c}, expected [N_a × {}]", self.channels)));
        }
        let pooled = tape.mean_rows(t_a);
        let col = tape.transpose(pooled);
        let gamma = tape.broadcast_cols(col, n_i);
        let cat = tape.concat_rows(&[gamma, f_i]);
        Ok(self.f_intention.forward(tape, store, cat))
    }
}

/// Sets every parameter of a stack to zero (for controlled tests and ablations).
pub fn zero_stack(store: &mut ParamStore, stack: &ConvStack) {
    for l in &stack.layers {
        store.get_mut(l.weight).fill(0.0);
        store.get_mut(l.bias).fill(0.0);
    }
}

/// Overwrites one layer's weight with `w` and clears its bias.
pub fn set_layer(store: &mut ParamStore, stack: &ConvStack, layer: usize, w: Array2<f64>) {
    let l = &stack.layers[layer];
    assert_eq!(store.get(l.weight).dim(), w.dim());
    *store.get_mut(l.weight) = w;
    store.get_mut(l.bias).fill(0.0);
}
