//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Every value is an `Array2<f64>`; row vectors are `1 x n`. Parameters live
//! in a [`ParamStore`] borrowed by the tape, so building a graph never copies
//! weights.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Named parameter matrices with per-parameter trainable flags.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Rotary {
        x: Var,
        cos: Array2<f64>,
        sin: Array2<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Dropout {
        x: Var,
        mask: Array2<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.params.entry(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant with no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted (e.g. a relaxed one-hot input).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `x * w + b` for a `1 x n` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax. `-inf` entries get probability zero.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Rotary position embedding applied per head. `cos`/`sin` are
    /// `rows x head_dim/2` tables for the rows' positions.
    pub fn rotary(&mut self, x: Var, cos: Array2<f64>, sin: Array2<f64>) -> Var {
        let v = rotate(self.value(x), &cos, &sin, false);
        let rg = self.rg(x);
        self.push(v, Op::Rotary { x, cos, sin }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Multiplies by a fixed (already rescaled) dropout mask.
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let v = self.value(x) * &mask;
        let rg = self.rg(x);
        self.push(v, Op::Dropout { x, mask }, rg)
    }

    /// `sum_i weights[i] * -log softmax_support(logits_i)[targets[i]]`, a `1 x 1`
    /// node. Rows with zero weight are skipped; classes outside `support` are
    /// excluded from the normalizer.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        support: &[bool],
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        assert_eq!(lv.ncols(), support.len());
        let mut probs = Array2::zeros(lv.raw_dim());
        let mut total = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let lp = log_softmax_masked(row.as_slice().expect("contiguous"), support);
            total -= weights[r] * lp[targets[r]];
            for (c, &l) in lp.iter().enumerate() {
                probs[[r, c]] = if support[c] { l.exp() } else { 0.0 };
            }
        }
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    accumulate(&mut grads, *a, g * d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*gain) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.rg(*x) {
                        let dxhat = &g * self.value(*gain);
                        let n = dxhat.ncols() as f64;
                        let mut dx = Array2::zeros(dxhat.raw_dim());
                        for r in 0..dxhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let inv = inv_std[r];
                            for c in 0..dxhat.ncols() {
                                dx[[r, c]] = inv / n * (n * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s = row.sum();
                        row.zip_mut_with(&yr, |d, &p| *d -= p * s);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).raw_dim();
                    let mut dt = Array2::zeros(shape);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Rotary { x, cos, sin } => {
                    accumulate(&mut grads, *x, rotate(&g, cos, sin, true));
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        }
                        offset += w;
                    }
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, g * mask),
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let mut row = dl.row_mut(r);
                        row[t] -= 1.0;
                        row.mapv_inplace(|v| v * w * scale);
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Sums the gradients of every parameter node into `out` (indexed by
    /// [`ParamId`]).
    pub fn accumulate_params(&self, tape: &Tape<'_>, out: &mut [Option<Array2<f64>>]) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut out[id.0] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax over the entries where `support` is true; other entries are
/// `-inf`.
pub fn log_softmax_masked(row: &[f64], support: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(support)
        .filter(|(_, &s)| s)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .zip(support)
        .filter(|(_, &s)| s)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    let log_z = max + sum.ln();
    row.iter()
        .zip(support)
        .map(|(&v, &s)| if s { v - log_z } else { f64::NEG_INFINITY })
        .collect()
}

fn rotate(x: &Array2<f64>, cos: &Array2<f64>, sin: &Array2<f64>, inverse: bool) -> Array2<f64> {
    let half = cos.ncols();
    let head_dim = 2 * half;
    debug_assert_eq!(x.ncols() % head_dim, 0);
    let mut out = x.clone();
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..x.nrows() {
        for h in 0..x.ncols() / head_dim {
            for k in 0..half {
                let c = cos[[r, k]];
                let s = sign * sin[[r, k]];
                let i0 = h * head_dim + 2 * k;
                let (a, b) = (x[[r, i0]], x[[r, i0 + 1]]);
                out[[r, i0]] = a * c - b * s;
                out[[r, i0 + 1]] = a * s + b * c;
            }
        }
    }
    out
}

/// Cosine/sine tables for rotary embeddings at the given positions.
pub fn rotary_tables(positions: impl Iterator<Item = usize>, head_dim: usize) -> (Array2<f64>, Array2<f64>) {
    let half = head_dim / 2;
    let positions: Vec<usize> = positions.collect();
    let mut cos = Array2::zeros((positions.len(), half));
    let mut sin = Array2::zeros((positions.len(), half));
    for (r, &p) in positions.iter().enumerate() {
        for k in 0..half {
            let theta = 10_000f64.powf(-2.0 * k as f64 / head_dim as f64);
            let angle = p as f64 * theta;
            cos[[r, k]] = angle.cos();
            sin[[r, k]] = angle.sin();
        }
    }
    (cos, sin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
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

    fn check(x: Array2<f64>, build: impl Fn(&mut Tape<'_>, Var) -> Var) {
        let store = ParamStore::new();
        let eval = |x: &Array2<f64>| {
            let mut tape = Tape::new(&store);
            let v = tape.input(x.clone());
            let out = build(&mut tape, v);
            tape.value(out)[[0, 0]]
        };
        let mut tape = Tape::new(&store);
        let v = tape.input(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.wrt(v).unwrap().clone();
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7, 0.1], [1.5, 0.2, -0.4, -0.9], [-0.6, 0.8, 0.05, 1.1]]
    }

    fn weighted_sum(tape: &mut Tape<'_>, v: Var) -> Var {
        // a fixed, non-symmetric readout so every entry matters
        let (r, c) = tape.value(v).dim();
        let w = Array2::from_shape_fn((c, 1), |(i, _)| 0.5 + i as f64 * 0.3);
        let rows = Array2::from_shape_fn((1, r), |(_, j)| 1.0 - j as f64 * 0.4);
        let w = tape.constant(w);
        let rows = tape.constant(rows);
        let col = tape.matmul(v, w);
        tape.matmul(rows, col)
    }

    #[test]
    fn gelu_layer_norm_softmax_gradients() {
        check(sample(), |t, x| {
            let y = t.gelu(x);
            weighted_sum(t, y)
        });
        check(sample(), |t, x| {
            let g = t.constant(array![[1.0, 0.5, -0.3, 2.0]]);
            let b = t.constant(array![[0.1, 0.0, 0.2, -0.1]]);
            let y = t.layer_norm(x, g, b);
            weighted_sum(t, y)
        });
        check(sample(), |t, x| {
            let y = t.softmax(x);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn matmul_t_rotary_slice_concat_gradients() {
        check(sample(), |t, x| {
            let other = t.constant(array![[0.2, 0.1, -0.3, 0.4], [0.0, 1.0, 0.5, -0.5]]);
            let y = t.matmul_t(x, other);
            weighted_sum(t, y)
        });
        check(sample(), |t, x| {
            let (cos, sin) = rotary_tables(3..6, 2);
            let y = t.rotary(x, cos, sin);
            weighted_sum(t, y)
        });
        check(sample(), |t, x| {
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_cols(x, 1, 3);
            let y = t.concat_cols(&[b, a]);
            let y = t.scale(y, 1.7);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        let support = [true, true, false, true];
        check(sample(), |t, x| t.cross_entropy(x, &[0, 3, 1], &[1.0, 0.5, 2.0], &support));
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Array2::zeros((2, 4)));
        let ce = tape.cross_entropy(x, &[0, 1], &[1.0, 1.0], &support);
        assert!((tape.value(ce)[[0, 0]] - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut store = ParamStore::new();
        let id = store.add("table", sample());
        let mut tape = Tape::new(&store);
        let table = tape.param(id);
        let rows = tape.gather(table, &[2, 0, 2]);
        let out = weighted_sum(&mut tape, rows);
        let grads = tape.backward(out);
        let mut acc = vec![None];
        grads.accumulate_params(&tape, &mut acc);
        let g = acc[0].as_ref().unwrap();
        assert_eq!(g.row(1).sum(), 0.0);
        assert!(g.row(2).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", sample());
        store.set_trainable(id, false);
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let x = tape.input(Array2::ones((2, 3)));
        let y = tape.matmul(x, w);
        let out = weighted_sum(&mut tape, y);
        let grads = tape.backward(out);
        let mut acc = vec![None];
        grads.accumulate_params(&tape, &mut acc);
        assert!(acc[0].is_none());
        assert!(grads.wrt(x).is_some());
    }

    #[test]
    fn masked_log_softmax() {
        let lp = log_softmax_masked(&[0.0, 0.0, 5.0], &[true, true, false]);
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(lp[2], f64::NEG_INFINITY);
    }
}
