//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array in standard (row-major) layout.
//! Feature maps follow the `[channels × positions]` convention; token
//! sequences use `[tokens × channels]`. Parameters live in a [`ParamStore`]
//! and are borrowed by the tape, so a forward pass never copies weights.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }
}

/// Sentinel gather index producing a zero (used for padding).
pub const GATHER_ZERO: u32 = u32::MAX;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddCol(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    MeanCols(Var),
    MeanRows(Var),
    BroadcastCols(Var),
    BroadcastRows(Var),
    Gather { src: Var, index: Vec<u32> },
    GroupMax { src: Var, argmax: Vec<u32> },
    SparseMix { src: Var, entries: Vec<(u32, u32, f64)> },
    Sum(Var),
    Mean(Var),
    Scalar { input: Var, grad: Array2<f64> },
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation recorded for differentiation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Differentiable input whose gradient can be read back with [`Grads::wrt`].
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `[1 × 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.dim(), (1, 1), "scalar() on non-scalar node");
        x[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul: {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        let out = va + vb;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch");
        let out = va * vb;
        self.push(out, Op::Mul(a, b))
    }

    /// `[r × n] + [r × 1]`, the column vector added to every column.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.dim(), (va.nrows(), 1), "add_col: bad column shape");
        let out = va + vc;
        self.push(out, Op::AddCol(a, col))
    }

    /// `[l × c] + [1 × c]`, the row vector added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "add_row: bad row shape");
        let out = va + vr;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a).view());
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Stacks along the row axis (channel concatenation for feature maps).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// `[r × n] → [r × 1]`
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.ncols() as f64;
        let out = va.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
        self.push(out, Op::MeanCols(a))
    }

    /// `[l × c] → [1 × c]`
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let l = va.nrows() as f64;
        let out = va.sum_axis(Axis(0)).insert_axis(Axis(0)) / l;
        self.push(out, Op::MeanRows(a))
    }

    /// `[r × 1] → [r × n]`
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.ncols(), 1, "broadcast_cols expects a column");
        let out = va
            .broadcast((va.nrows(), n))
            .expect("broadcast")
            .to_owned();
        self.push(out, Op::BroadcastCols(a))
    }

    /// `[1 × c] → [l × c]`
    pub fn broadcast_rows(&mut self, a: Var, l: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), 1, "broadcast_rows expects a row");
        let out = va
            .broadcast((l, va.ncols()))
            .expect("broadcast")
            .to_owned();
        self.push(out, Op::BroadcastRows(a))
    }

    /// Flat gather: `out.flat[i] = src.flat[index[i]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, src: Var, index: Vec<u32>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather: index/shape mismatch");
        let data = self.value(src).as_slice().expect("standard layout");
        let out: Vec<f64> = index
            .iter()
            .map(|&i| {
                if i == GATHER_ZERO {
                    0.0
                } else {
                    data[i as usize]
                }
            })
            .collect();
        let out = Array2::from_shape_vec(shape, out).expect("gather shape");
        self.push(out, Op::Gather { src, index })
    }

    /// Gathers whole columns: `out[:, j] = src[:, cols[j]]`.
    pub fn gather_cols(&mut self, src: Var, cols: &[u32]) -> Var {
        let (r, n) = self.shape(src);
        let mut index = Vec::with_capacity(r * cols.len());
        for row in 0..r {
            for &c in cols {
                debug_assert!((c as usize) < n);
                index.push((row * n) as u32 + c);
            }
        }
        self.gather(src, index, (r, cols.len()))
    }

    /// Gathers whole rows: `out[i, :] = src[rows[i], :]`.
    pub fn gather_rows(&mut self, src: Var, rows: &[u32]) -> Var {
        let (_, c) = self.shape(src);
        let mut index = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            for col in 0..c {
                index.push(r * c as u32 + col as u32);
            }
        }
        self.gather(src, index, (rows.len(), c))
    }

    /// Max over consecutive column groups: `[r × n·k] → [r × n]`.
    pub fn group_max(&mut self, src: Var, group: usize) -> Var {
        let va = self.value(src);
        let (r, total) = va.dim();
        assert!(group > 0 && total % group == 0, "group_max: bad group size");
        let n = total / group;
        let data = va.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(r * n);
        let mut argmax = Vec::with_capacity(r * n);
        for row in 0..r {
            for g in 0..n {
                let base = row * total + g * group;
                let mut best = base;
                for i in base + 1..base + group {
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                argmax.push(best as u32);
            }
        }
        let out = Array2::from_shape_vec((r, n), out).expect("group_max shape");
        self.push(out, Op::GroupMax { src, argmax })
    }

    /// Weighted column mixing: `out[:, d] = Σ w · src[:, s]` over `(s, d, w)` entries.
    pub fn sparse_mix(&mut self, src: Var, entries: Vec<(u32, u32, f64)>, n_dst: usize) -> Var {
        let va = self.value(src);
        let mut out = Array2::<f64>::zeros((va.nrows(), n_dst));
        for &(s, d, w) in &entries {
            let col = va.column(s as usize);
            out.column_mut(d as usize).scaled_add(w, &col);
        }
        self.push(out, Op::SparseMix { src, entries })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Array2::from_elem((1, 1), va.sum() / va.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Records a scalar function of `input` whose value and local gradient
    /// were computed outside the tape.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.shape(input), "scalar_fn: gradient shape");
        self.push(Array2::from_elem((1, 1), value), Op::Scalar { input, grad })
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, g.t().as_standard_layout().into_owned());
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddCol(a, c) => {
                    if self.needs(*c) {
                        acc(&mut grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs(*r) {
                        acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, &g * *f),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(y, |gv, &yv| {
                        if yv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &xv| {
                        if xv < *lo || xv > *hi {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let gy = &g * &**y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &gy - &(&**y * &dots);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        if self.needs(*p) {
                            acc(&mut grads, *p, g.slice(s![start..start + rows, ..]).to_owned());
                        }
                        start += rows;
                    }
                }
                Op::MeanCols(a) => {
                    let n = self.value(*a).ncols();
                    let ga = g.broadcast((g.nrows(), n)).unwrap().to_owned() / n as f64;
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let l = self.value(*a).nrows();
                    let ga = g.broadcast((l, g.ncols())).unwrap().to_owned() / l as f64;
                    acc(&mut grads, *a, ga);
                }
                Op::BroadcastCols(a) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::BroadcastRows(a) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Gather { src, index } => {
                    let mut ga = Array2::<f64>::zeros(self.shape(*src));
                    {
                        let gs = ga.as_slice_mut().unwrap();
                        for (gv, &i) in g.iter().zip(index) {
                            if i != GATHER_ZERO {
                                gs[i as usize] += gv;
                            }
                        }
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::GroupMax { src, argmax } => {
                    let mut ga = Array2::<f64>::zeros(self.shape(*src));
                    {
                        let gs = ga.as_slice_mut().unwrap();
                        for (gv, &i) in g.iter().zip(argmax) {
                            gs[i as usize] += gv;
                        }
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::SparseMix { src, entries } => {
                    let mut ga = Array2::<f64>::zeros(self.shape(*src));
                    for &(s, d, w) in entries {
                        let col = g.column(d as usize);
                        ga.column_mut(s as usize).scaled_add(w, &col);
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1) as f64;
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::Scalar { input, grad } => acc(&mut grads, *input, grad * g[[0, 0]]),
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Grads { grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddCol(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Clamp(a, _, _)
        | Op::SoftmaxRows(a)
        | Op::MeanCols(a)
        | Op::MeanRows(a)
        | Op::BroadcastCols(a)
        | Op::BroadcastRows(a)
        | Op::Sum(a)
        | Op::Mean(a) => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
        Op::Gather { src, .. } | Op::GroupMax { src, .. } | Op::SparseMix { src, .. } => vec![*src],
        Op::Scalar { input, .. } => vec![*input],
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Grads {
    /// Gradient with respect to a node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients, summed over every use of each parameter.
    /// Parameters not touched by the forward pass get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = store
            .ids()
            .map(|id| Array2::zeros(store.get(id).dim()))
            .collect();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[id.0] += g;
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        diff / scale.max(1e-12)
    }

    #[test]
    fn matmul_softmax_chain_matches_finite_differences() {
        let x0 = array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]];
        let w = array![[0.2, -0.7], [1.1, 0.4], [-0.3, 0.8]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let wv = t.constant(w.clone());
            let y = t.matmul(xv, wv);
            let s = t.softmax_rows(y);
            let sq = t.mul(s, s);
            let out = t.sum(sq);
            (t.scalar(out), t.backward(out).wrt(xv).unwrap().clone())
        };
        let (_, analytic) = f(&x0);
        let numeric = numeric_grad(|x| f(x).0, &x0);
        assert!(rel_err(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn gather_group_max_and_mix_backprop() {
        let x0 = array![[0.1, 0.5, -0.2, 0.7], [1.0, -0.3, 0.4, 0.2]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let g = t.gather_cols(xv, &[3, 0, 1, 1, 2, 0]);
            let m = t.group_max(g, 3);
            let mixed = t.sparse_mix(xv, vec![(0, 0, 0.25), (2, 0, 0.75), (3, 1, 1.0)], 2);
            let both = t.mul(m, mixed);
            let out = t.sum(both);
            (t.scalar(out), t.backward(out).wrt(xv).unwrap().clone())
        };
        let (_, analytic) = f(&x0);
        let numeric = numeric_grad(|x| f(x).0, &x0);
        assert!(rel_err(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn param_used_twice_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("w", array![[2.0]]);
        let mut t = Tape::new();
        let a = t.param(&store, p);
        let b = t.param(&store, p);
        let prod = t.mul(a, b);
        let out = t.sum(prod);
        let grads = t.backward(out).param_grads(&store);
        assert_eq!(grads[0][[0, 0]], 4.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let x = t.input(array![[3.0, 4.0]]);
        let prod = t.mul(c, x);
        let out = t.sum(prod);
        let g = t.backward(out);
        assert_eq!(g.wrt(x).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]];
        let s = softmax_rows(x.view());
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
