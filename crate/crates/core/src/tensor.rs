//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] and enter the graph by value; [`Graph::backward`]
//! returns per-node gradients that [`Gradients::for_slot`] maps back onto
//! the store that produced them. Stores entered with `slot = None` are
//! treated as constants and receive no gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 2-D array of doubles, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with transposes expressed as strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    // op(a) is m x k, op(b) is k x n
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Named trainable tensors of one network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Sets every parameter to `v`.
    pub fn fill(&mut self, v: f64) {
        for t in &mut self.values {
            t.data.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Flat layout: `(name, shape, offset)` per tensor plus the concatenated values.
    pub fn to_flat(&self) -> (Vec<FlatEntry>, Vec<f64>) {
        let mut entries = Vec::with_capacity(self.len());
        let mut data = Vec::with_capacity(self.num_scalars());
        for (name, t) in self.names.iter().zip(&self.values) {
            entries.push(FlatEntry {
                name: name.clone(),
                shape: t.shape(),
                offset: data.len(),
            });
            data.extend_from_slice(&t.data);
        }
        (entries, data)
    }

    pub fn from_flat(entries: &[FlatEntry], data: &[f64]) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in entries {
            let len = e.shape[0] * e.shape[1];
            let slice = data.get(e.offset..e.offset + len).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "entry {} exceeds data ({} values)",
                    e.name,
                    data.len()
                ))
            })?;
            store.add(
                e.name.clone(),
                Tensor::from_vec(e.shape[0], e.shape[1], slice.to_vec())?,
            );
        }
        Ok(store)
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

/// `target <- (1 - tau) * target + tau * online`.
pub fn soft_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(Error::ShapeMismatch(
            "soft update between different layouts".into(),
        ));
    }
    for (t, o) in target.values.iter_mut().zip(&online.values) {
        for (a, b) in t.data.iter_mut().zip(&o.data) {
            *a = (1.0 - tau) * *a + tau * b;
        }
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .values
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::ShapeMismatch("optimizer/parameter count".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.values[i];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {}",
                    store.names[i]
                )));
            }
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn from_moments(lr: f64, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param { slot: usize, index: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    SegmentMax { x: NodeId, argmax: Vec<usize> },
    RepeatRows { x: NodeId, times: usize },
    GatherRows { x: NodeId, rows: Vec<usize> },
    GatherElems { x: NodeId, idx: Vec<(usize, usize)> },
    Sum(NodeId),
    WeightedSum { x: NodeId, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Enters parameter `index` of `store`. With `slot = None` the value is
    /// a constant for this pass.
    pub fn param(&mut self, store: &ParamStore, index: usize, slot: Option<usize>) -> NodeId {
        let value = store.values[index].clone();
        match slot {
            Some(slot) => self.push(value, Op::Param { slot, index }, true),
            None => self.push(value, Op::Input, false),
        }
    }

    /// `x W + b` with `b` a single row broadcast over all rows of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols {
            return Err(Error::ShapeMismatch(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            out.data[r * n..(r + 1) * n].copy_from_slice(&bv.data);
        }
        gemm(
            m,
            k,
            n,
            &xv.data,
            false,
            &wv.data,
            false,
            1.0,
            &mut out.data,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.cols != bv.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(
            av.rows,
            av.cols,
            bv.cols,
            &av.data,
            false,
            &bv.data,
            false,
            0.0,
            &mut out.data,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        Ok(Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.nodes[x].value.map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.nodes[p].value.rows)
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.nodes[p].value.rows != rows) {
            return Err(Error::ShapeMismatch("concat: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let v = &self.nodes[p].value;
                out.data[r * cols + c0..r * cols + c0 + v.cols].copy_from_slice(v.row(r));
                c0 += v.cols;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if start > end || end > v.cols {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{end} of {} columns",
                v.cols
            )));
        }
        let w = end - start;
        let mut out = Tensor::zeros(v.rows, w);
        for r in 0..v.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&v.row(r)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Column-wise max over `segments` equal blocks of consecutive rows.
    /// Ties resolve to the first row of the block.
    pub fn segment_max(&mut self, x: NodeId, segments: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if segments == 0 || !v.rows.is_multiple_of(segments) || v.rows == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} rows do not split into {segments} segments",
                v.rows
            )));
        }
        let per = v.rows / segments;
        let mut out = Tensor::zeros(segments, v.cols);
        let mut argmax = vec![0usize; segments * v.cols];
        for s in 0..segments {
            for c in 0..v.cols {
                let mut best = s * per;
                let mut bv = v.get(best, c);
                for r in s * per + 1..(s + 1) * per {
                    let val = v.get(r, c);
                    if val > bv {
                        bv = val;
                        best = r;
                    }
                }
                out.set(s, c, bv);
                argmax[s * v.cols + c] = best;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMax { x, argmax }, rg))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let v = &self.nodes[x].value;
        let mut out = Tensor::zeros(v.rows * times, v.cols);
        for r in 0..v.rows {
            for t in 0..times {
                let o = (r * times + t) * v.cols;
                out.data[o..o + v.cols].copy_from_slice(v.row(r));
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::RepeatRows { x, times }, rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if rows.iter().any(|&r| r >= v.rows) {
            return Err(Error::ShapeMismatch("gather row out of range".into()));
        }
        let mut out = Tensor::zeros(rows.len(), v.cols);
        for (o, &r) in rows.iter().enumerate() {
            out.data[o * v.cols..(o + 1) * v.cols].copy_from_slice(v.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Column vector of the selected `(row, col)` elements.
    pub fn gather_elems(&mut self, x: NodeId, idx: &[(usize, usize)]) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if idx.iter().any(|&(r, c)| r >= v.rows || c >= v.cols) {
            return Err(Error::ShapeMismatch("gather element out of range".into()));
        }
        let data = idx.iter().map(|&(r, c)| v.get(r, c)).collect();
        let out = Tensor::from_vec(idx.len(), 1, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum_ij w_ij x_ij` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape() != weights.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weighted sum: {:?} vs {:?}",
                v.shape(),
                weights.shape()
            )));
        }
        let s = v.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        let y = self.input(target);
        let d = self.sub(x, y)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.shape() != [1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Param { .. } => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (m, k, n) = (xv.rows, xv.cols, wv.cols);
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(m, k);
                        gemm(m, n, k, &g.data, false, &wv.data, true, 0.0, &mut dx.data);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = Tensor::zeros(k, n);
                        gemm(k, m, n, &xv.data, true, &g.data, false, 0.0, &mut dw.data);
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(1, n);
                        for r in 0..m {
                            for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    if self.rg(*a) {
                        let mut da = Tensor::zeros(m, k);
                        gemm(m, n, k, &g.data, false, &bv.data, true, 0.0, &mut da.data);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(k, n);
                        gemm(k, m, n, &av.data, true, &g.data, false, 0.0, &mut db.data);
                        accumulate(&mut grads, *b, db);
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
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.rg(*a) {
                        let d = zip_map(&g, bv, |gi, bi| gi * bi);
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = zip_map(&g, av, |gi, ai| gi * ai);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Relu(x) => {
                    let d = zip_map(
                        &g,
                        &self.nodes[*x].value,
                        |gi, xi| if xi > 0.0 { gi } else { 0.0 },
                    );
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = zip_map(&g, &node.value, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, *x, d);
                }
                Op::Square(x) => {
                    let d = zip_map(&g, &self.nodes[*x].value, |gi, xi| 2.0 * gi * xi);
                    accumulate(&mut grads, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols;
                        if self.rg(p) {
                            let mut d = Tensor::zeros(g.rows, w);
                            for r in 0..g.rows {
                                d.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[c0..c0 + w]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        c0 += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = &self.nodes[*x].value;
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        d.data[r * xv.cols + start..r * xv.cols + start + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::SegmentMax { x, argmax } => {
                    let xv = &self.nodes[*x].value;
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for s in 0..g.rows {
                        for c in 0..g.cols {
                            let r = argmax[s * g.cols + c];
                            d.data[r * xv.cols + c] += g.get(s, c);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::RepeatRows { x, times } => {
                    let xv = &self.nodes[*x].value;
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        for t in 0..*times {
                            let src = g.row(r * times + t);
                            for (a, b) in d.data[r * xv.cols..(r + 1) * xv.cols].iter_mut().zip(src)
                            {
                                *a += b;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::GatherRows { x, rows } => {
                    let xv = &self.nodes[*x].value;
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for (o, &r) in rows.iter().enumerate() {
                        for (a, b) in d.data[r * xv.cols..(r + 1) * xv.cols]
                            .iter_mut()
                            .zip(g.row(o))
                        {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::GatherElems { x, idx } => {
                    let xv = &self.nodes[*x].value;
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for (o, &(r, c)) in idx.iter().enumerate() {
                        d.data[r * xv.cols + c] += g.data[o];
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[*x].value;
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows, xv.cols, g.item()));
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.item();
                    accumulate(&mut grads, *x, weights.map(|w| w * s));
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(id, n)| match n.op {
                    Op::Param { slot, index } => Some((id, slot, index)),
                    _ => None,
                })
                .collect(),
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, if it received any.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    /// Gradients aligned with `store`, summed over every use of each
    /// parameter in the pass and zero for unused ones.
    pub fn for_slot(&self, slot: usize, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for &(id, s, index) in &self.params {
            if s == slot {
                if let Some(g) = &self.grads[id] {
                    out[index].add_assign(g);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Layer widths including the input width, e.g. `[7, 64, 128]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: Activation) -> Self {
        Self {
            widths,
            hidden: Activation::Relu,
            output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp widths {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Registers weights in `store` with uniform fan-in initialisation.
    pub fn new<R: Rng>(
        spec: MlpSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for (l, pair) in spec.widths.windows(2).enumerate() {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            let w = store.add(
                format!("{prefix}.{l}.weight"),
                Tensor::uniform(pair[0], pair[1], bound, rng),
            );
            let b = store.add(
                format!("{prefix}.{l}.bias"),
                Tensor::uniform(1, pair[1], bound, rng),
            );
            layers.push((w, b));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Store indices of `(weight, bias)` per layer.
    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    /// Rescales the last layer's initial weights, e.g. to start a bounded
    /// head near zero.
    pub fn scale_output_layer(&self, store: &mut ParamStore, factor: f64) {
        if let Some(&(w, b)) = self.layers.last() {
            for idx in [w, b] {
                store
                    .get_mut(idx)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v *= factor);
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
    ) -> Result<NodeId> {
        if g.value(x).cols() != self.spec.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "mlp expects {} input columns, got {}",
                self.spec.input_width(),
                g.value(x).cols()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(store, w, slot);
            let bn = g.param(store, b, slot);
            h = g.linear(h, wn, bn)?;
            let act = if l == last {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.apply(g, h);
        }
        Ok(h)
    }
}

/// Segmentation-style encoder: a shared per-point MLP, a max-pooled global
/// feature, and a second shared MLP over `[local, global]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEncoderSpec {
    /// Per-point MLP widths, starting with the input feature width.
    pub local: Vec<usize>,
    /// Widths after the concatenation; the first entry must be twice the
    /// last local width.
    pub decode: Vec<usize>,
}

impl PointEncoderSpec {
    pub fn output_width(&self) -> usize {
        *self.decode.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEncoder {
    local: Mlp,
    decode: Mlp,
}

impl PointEncoder {
    pub fn new<R: Rng>(
        spec: &PointEncoderSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let pooled = *spec.local.last().unwrap_or(&0);
        if spec.decode.first() != Some(&(2 * pooled)) {
            return Err(Error::InvalidArgument(format!(
                "decode input must be {} (local {:?})",
                2 * pooled,
                spec.local
            )));
        }
        let local = Mlp::new(
            MlpSpec::new(spec.local.clone(), Activation::Relu),
            store,
            &format!("{prefix}.local"),
            rng,
        )?;
        let decode = Mlp::new(
            MlpSpec::new(spec.decode.clone(), Activation::Relu),
            store,
            &format!("{prefix}.decode"),
            rng,
        )?;
        Ok(Self { local, decode })
    }

    pub fn output_width(&self) -> usize {
        self.decode.spec().output_width()
    }

    /// `x` stacks `clouds` point clouds of equal size row-wise; the result
    /// has one feature row per input row.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
        clouds: usize,
    ) -> Result<NodeId> {
        let rows = g.value(x).rows();
        if clouds == 0 || !rows.is_multiple_of(clouds) {
            return Err(Error::ShapeMismatch(format!(
                "{rows} rows for {clouds} clouds"
            )));
        }
        let h = self.local.forward(g, store, slot, x)?;
        let pooled = g.segment_max(h, clouds)?;
        let spread = g.repeat_rows(pooled, rows / clouds);
        let cat = g.concat_cols(&[h, spread])?;
        self.decode.forward(g, store, slot, cat)
    }

    /// One pooled vector per cloud (classification-style use).
    pub fn forward_global(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
        clouds: usize,
    ) -> Result<NodeId> {
        let h = self.local.forward(g, store, slot, x)?;
        g.segment_max(h, clouds)
    }
}
