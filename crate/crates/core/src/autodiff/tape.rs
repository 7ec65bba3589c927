use std::collections::HashMap;

use super::functional::{gelu, gelu_grad, log_softmax_into, softmax_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `m×n + 1×n`, row broadcast.
    AddRow(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize, usize),
    PairMean(Var),
    Interleave(Var, Var),
    WeightedSqDiff {
        x: Var,
        anchor: Vec<f64>,
        weight: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Reverse-mode recording of one forward computation.
///
/// A tape is built per batch: parameters enter as leaves via [`Tape::param`],
/// every op appends a node, and [`Tape::backward`] walks the nodes in reverse.
/// Nodes are only differentiated when some input is tracked, so constants and
/// frozen parameters cost nothing on the backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Adds the gradients of every trainable parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.shape().len() <= 2);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient is wanted.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf for a stored parameter. Repeated calls return the same leaf.
    /// Frozen parameters enter as untracked leaves.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).dims2() != self.value(b).dims2() {
            return Err(Error::invalid_argument(format!(
                "{what}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::invalid_argument(format!(
                "matmul: {m}×{k} by {k2}×{n}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::invalid_argument(format!(
                "matmul_t: {m}×{k} by ({n}×{k2})ᵀ"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::Add(a, b), tracked))
    }

    /// Sum of several same-shape values.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::invalid_argument("add_n of nothing"))?;
        let (r, c) = self.shape(first);
        let mut out = vec![0.0; r * c];
        for &v in vars {
            if self.shape(v) != (r, c) {
                return Err(Error::invalid_argument(format!(
                    "add_n: shapes {:?} and {:?}",
                    (r, c),
                    self.shape(v)
                )));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        let tracked = vars.iter().any(|&v| self.tracked(v));
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddN(vars.to_vec()), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let (r, c) = self.shape(a);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::Sub(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::Mul(a, b), tracked))
    }

    /// Adds a `1×n` row to every row of an `m×n` value.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (r1, n2) = self.shape(row);
        if r1 != 1 || n2 != n {
            return Err(Error::invalid_argument(format!(
                "add_row: {m}×{n} plus {r1}×{n2}"
            )));
        }
        let rv = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            for (o, x) in chunk.iter_mut().zip(rv) {
                *o += x;
            }
        }
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, row), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, cols) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let tracked = self.tracked(a);
        self.push(
            Tensor::matrix(r, cols, data).expect("same shape"),
            Op::Scale(a, c),
            tracked,
        )
    }

    /// Same values viewed as `rows×cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(a).len();
        if rows * cols != n {
            return Err(Error::invalid_argument(format!(
                "cannot view {n} values as {rows}×{cols}"
            )));
        }
        let data = self.value(a).data().to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::Reshape(a), tracked))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let tracked = self.tracked(a);
        self.push(Tensor::matrix(r, c, data).expect("same shape"), Op::Gelu(a), tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::invalid_argument("softmax over zero columns"));
        }
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(a).data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(src, dst);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a), tracked))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::invalid_argument("log_softmax over zero columns"));
        }
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(a).data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_into(src, dst);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmaxRows(a), tracked))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::invalid_argument(format!(
                "layer_norm: width {c}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::invalid_argument("concat_rows of nothing"))?;
        let c = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vars {
            let (r, c2) = self.shape(v);
            if c2 != c {
                return Err(Error::invalid_argument(format!(
                    "concat_rows: widths {c} and {c2}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(v).data());
        }
        let tracked = vars.iter().any(|&v| self.tracked(v));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(vars.to_vec()), tracked))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::invalid_argument("concat_cols of nothing"))?;
        let r = self.shape(first).0;
        let mut total = 0;
        for &v in vars {
            let (r2, c) = self.shape(v);
            if r2 != r {
                return Err(Error::invalid_argument(format!(
                    "concat_cols: heights {r} and {r2}"
                )));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &v in vars {
                let c = self.shape(v).1;
                data.extend_from_slice(&self.value(v).data()[i * c..(i + 1) * c]);
            }
        }
        let tracked = vars.iter().any(|&v| self.tracked(v));
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(vars.to_vec()), tracked))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::invalid_argument(format!(
                "slice_rows {start}..{} of {r} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(a, start), tracked))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::invalid_argument(format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(a, start), tracked))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::invalid_argument(format!(
                    "gather: id {id} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), c, data)?,
            Op::Gather(table, ids.to_vec()),
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid_argument("mean of an empty value"));
        }
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), tracked))
    }

    /// The single entry at `(row, col)` as a scalar.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if row >= r || col >= c {
            return Err(Error::invalid_argument(format!(
                "pick ({row}, {col}) out of {r}×{c}"
            )));
        }
        let v = self.value(a).get(row, col);
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, row, col), tracked))
    }

    /// Averages adjacent column pairs: `out[k] = (x[2k] + x[2k+1]) / 2` per row.
    pub fn pair_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c % 2 != 0 {
            return Err(Error::invalid_argument(format!(
                "pair_mean needs an even width, got {c}"
            )));
        }
        let half = c / 2;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * half);
        for i in 0..r {
            for k in 0..half {
                data.push(0.5 * (src[i * c + 2 * k] + src[i * c + 2 * k + 1]));
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(r, half, data)?, Op::PairMean(a), tracked))
    }

    /// Row-wise interleave `[a0, b0, a1, b1, …]`.
    pub fn interleave(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "interleave")?;
        let (r, c) = self.shape(a);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(2 * r * c);
        for (x, y) in av.iter().zip(bv) {
            data.push(*x);
            data.push(*y);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(r, 2 * c, data)?, Op::Interleave(a, b), tracked))
    }

    /// `Σ weight ⊙ (x − anchor)²` as a scalar.
    pub fn weighted_sq_diff(&mut self, x: Var, anchor: &Tensor, weight: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != anchor.len() || xv.len() != weight.len() {
            return Err(Error::invalid_state(format!(
                "weighted_sq_diff: {} values against anchor {} and weight {}",
                xv.len(),
                anchor.len(),
                weight.len()
            )));
        }
        let s = xv
            .data()
            .iter()
            .zip(anchor.data().iter().zip(weight.data()))
            .map(|(v, (a, w))| w * (v - a) * (v - a))
            .sum();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSqDiff {
                x,
                anchor: anchor.data().to_vec(),
                weight: weight.data().to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid_argument(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.tracked(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    /// Backward pass that writes straight into the parameter store.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(())
    }

    fn acc<F>(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: F)
    where
        F: FnOnce(&mut [f64]),
    {
        if !self.tracked(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, &gg) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += s * gg;
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let s = g[i * n + j];
                            for (d, &bb) in da[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += s * bb;
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let s = g[i * n + j];
                            for (d, &aa) in db[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *d += s * aa;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |d| add_into(d, g));
                }
            }
            Op::AddN(vars) => {
                for &v in vars {
                    self.acc(grads, v, |d| add_into(d, g));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for ((x, gg), bb) in d.iter_mut().zip(g).zip(bv) {
                        *x += gg * bb;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, gg), aa) in d.iter_mut().zip(g).zip(av) {
                        *x += gg * aa;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.shape(*a).1;
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *row, |d| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |d| {
                    for (x, gg) in d.iter_mut().zip(g) {
                        *x += c * gg;
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((x, gg), &aa) in d.iter_mut().zip(g).zip(av) {
                        *x += gg * gelu_grad(aa);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = self.shape(*a).1;
                let y = node.value.data();
                self.acc(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = self.shape(*a).1;
                let y = node.value.data();
                self.acc(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for ((x, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += gg - yy.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.shape(*x);
                let gv = self.value(*gamma).data();
                self.acc(grads, *gamma, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for chunk in g.chunks(c) {
                        add_into(d, chunk);
                    }
                });
                self.acc(grads, *x, |d| {
                    let cf = c as f64;
                    for i in 0..r {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * c + j];
                        }
                        mean_dh /= cf;
                        mean_dh_h /= cf;
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            d[i * c + j] += inv_std[i] * (dh - mean_dh - xhat[i * c + j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::ConcatRows(vars) => {
                let mut offset = 0;
                for &v in vars {
                    let len = self.value(v).len();
                    self.acc(grads, v, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(vars) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut col = 0;
                for &v in vars {
                    let c = self.shape(v).1;
                    self.acc(grads, v, |d| {
                        for i in 0..r {
                            add_into(&mut d[i * c..(i + 1) * c], &g[i * total + col..i * total + col + c]);
                        }
                    });
                    col += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a).1;
                self.acc(grads, *a, |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                let (r, len) = node.value.dims2();
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let c = self.shape(*table).1;
                self.acc(grads, *table, |d| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Pick(a, row, col) => {
                let c = self.shape(*a).1;
                self.acc(grads, *a, |d| d[row * c + col] += g[0]);
            }
            Op::PairMean(a) => {
                self.acc(grads, *a, |d| {
                    for (k, gg) in g.iter().enumerate() {
                        d[2 * k] += 0.5 * gg;
                        d[2 * k + 1] += 0.5 * gg;
                    }
                });
            }
            Op::Interleave(a, b) => {
                self.acc(grads, *a, |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[2 * k];
                    }
                });
                self.acc(grads, *b, |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[2 * k + 1];
                    }
                });
            }
            Op::WeightedSqDiff { x, anchor, weight } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for (i, dd) in d.iter_mut().enumerate() {
                        *dd += g[0] * 2.0 * weight[i] * (xv[i] - anchor[i]);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
