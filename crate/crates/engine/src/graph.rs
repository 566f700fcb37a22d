//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows the [`ParamStore`] for the duration of one forward
//! pass and records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! returns the gradients of parameters and of leaves created with
//! [`Graph::input`].

use std::collections::HashMap;

use crate::error::{shape_err, EngineError, Result};
use crate::ops::{self, AttentionMask, AttnLayout};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{gemm, Operand, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// 3-D convolution geometry over channels-last `[B, T, H, W, C]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || span < self.kernel[a] {
                return Err(shape_err("conv3d", format!("axis {a}: extent {} too small", input[a])));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Sparse linear map over rows: output row `r` is `Σ w · input[k]` over
/// the `(k, w)` pairs of entry `r`.
pub type RowMap = Vec<Vec<(usize, f64)>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BinaryCrossEntropy { logits: Var, targets: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Combine { x: Var, map: RowMap },
    Reshape(Var),
    Conv3d { x: Var, w: Var, b: Var, spec: Conv3dSpec, cols: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }
}

fn col_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.value(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs = self.params.get(id).requires_grad;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.shape().len() != 2 || tb.rows() != k {
            return Err(shape_err("matmul", format!("{:?}·{:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, Operand::plain(ta.data(), k), Operand::plain(tb.data(), n), &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), needs))
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        if tw.shape().len() != 2 || tw.rows() != k {
            return Err(shape_err("linear", format!("{:?}·{:?}", tx.shape(), tw.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, Operand::plain(tx.data(), k), Operand::plain(tw.data(), n), &mut out, false);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != n {
                return Err(shape_err("linear", format!("bias {:?} for width {n}", tb.shape())));
            }
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, needs))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Adds a vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(shape_err("add_row", format!("{:?} + {:?}", ta.shape(), tr.shape())));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, v) in chunk.iter_mut().zip(tr.data()) {
                *o += v;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let needs = self.needs(&[a]);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(&[a]);
        self.push(t, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.sum() / ta.len() as f64);
        let needs = self.needs(&[a]);
        self.push(t, Op::Mean(a), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(ops::gelu);
        let needs = self.needs(&[a]);
        self.push(t, Op::Gelu(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(&[a]);
        self.push(t, Op::Relu(a), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            data.extend(ops::softmax(row)?);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(t, Op::Softmax(a), needs))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", format!("width {c}, gamma {:?}", tg.shape())));
        }
        let (out, xhat, rstd) = ops::layer_norm_forward(tx.data(), c, tg.data(), tb.data(), eps);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs))
    }

    /// Inverted dropout; returns `x` unchanged outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let tx = self.value(x);
        let mask = ops::dropout_mask(tx.len(), rate, rng);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, needs))
    }

    /// Batched multi-head attention over projected operands; see
    /// [`AttnLayout`] for the row layout.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.cols() != tk.cols() {
            return Err(shape_err("attention", "query and key widths differ"));
        }
        let vw = tv.cols();
        let (out, probs) =
            ops::attention_forward(tq.data(), tk.data(), tv.data(), tq.cols(), vw, &layout, mask)?;
        let t = Tensor::new(vec![layout.groups * layout.q_len, vw], out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, layout, probs }, needs))
    }

    /// Mean cross-entropy over the rows of `[N × C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (loss, probs) = ops::cross_entropy_forward(tl.data(), tl.cols(), targets)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
        ))
    }

    /// Mean sigmoid cross-entropy over all entries of `[N × C]` logits.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let loss = ops::binary_cross_entropy_forward(self.value(logits).data(), targets)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy { logits, targets: targets.to_vec() },
            needs,
        ))
    }

    /// Concatenates 2-D operands with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let needs = self.needs(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks operands with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols;
        let t = Tensor::new(vec![rows, cols], data)?;
        let needs = self.needs(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Applies a sparse row map; see [`RowMap`].
    pub fn combine_rows(&mut self, x: Var, map: RowMap) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; map.len() * c];
        for (r, entry) in map.iter().enumerate() {
            let out = &mut data[r * c..(r + 1) * c];
            for &(k, w) in entry {
                if k >= rows {
                    return Err(shape_err("combine_rows", format!("row {k} of {rows}")));
                }
                for (o, v) in out.iter_mut().zip(tx.row(k)) {
                    *o += w * v;
                }
            }
        }
        let t = Tensor::new(vec![map.len(), c], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Combine { x, map }, needs))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.combine_rows(x, rows.iter().map(|&r| vec![(r, 1.0)]).collect())
    }

    /// Mean of consecutive blocks of `group` rows.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if group == 0 || rows % group != 0 {
            return Err(shape_err("mean_row_groups", format!("{rows} rows in groups of {group}")));
        }
        let w = 1.0 / group as f64;
        let map = (0..rows / group)
            .map(|g| (0..group).map(|i| (g * group + i, w)).collect())
            .collect();
        self.combine_rows(x, map)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// 3-D convolution of a channels-last `[B, T, H, W, C]` input with a
    /// `[kt·kh·kw·C × C_out]` weight; output is `[B, T', H', W', C_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: Conv3dSpec) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let s = tx.shape();
        if s.len() != 5 {
            return Err(shape_err("conv3d", format!("input must be 5-D, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3], s[4]];
        let k = spec.taps() * dims[4];
        if tw.rows() != k || tb.len() != tw.cols() {
            return Err(shape_err("conv3d", format!("weight {:?} for {k} taps", tw.shape())));
        }
        let out_ext = spec.output_extent([dims[1], dims[2], dims[3]])?;
        let positions = dims[0] * out_ext.iter().product::<usize>();
        let cout = tw.cols();
        let cols = im2col(tx.data(), dims, &spec, out_ext);
        let mut out = vec![0.0; positions * cout];
        gemm(positions, k, cout, Operand::plain(&cols, k), Operand::plain(tw.data(), cout), &mut out, false);
        for row in out.chunks_mut(cout) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(vec![dims[0], out_ext[0], out_ext[1], out_ext[2], cout], out)?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(t, Op::Conv3d { x, w, b, spec, cols }, needs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(EngineError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut result = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    result.inputs.insert(Var(i), dy);
                }
                Op::Param(id) => result.params.push((*id, dy)),
                op => self.propagate(op, Var(i), dy, &mut grads)?,
            }
        }
        result.params.sort_by_key(|(id, _)| *id);
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let shape = self.value(v).shape().to_vec();
        self.acc(grads, v, Tensor::new(shape, data)?)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: Var, dy: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) | Op::Linear { x: a, w: b, .. } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, Operand::plain(dy.data(), n), Operand::transposed(tb.data(), n), &mut da, false);
                    self.acc_data(grads, *a, da)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, Operand::transposed(ta.data(), k), Operand::plain(dy.data(), n), &mut db, false);
                    self.acc_data(grads, *b, db)?;
                }
                if let Op::Linear { b: Some(bias), .. } = op {
                    if self.wants(*bias) {
                        self.acc_data(grads, *bias, col_sums(dy.data(), n))?;
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone())?;
                self.acc(grads, *b, dy)?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, dy.map(|v| -v))?;
                self.acc(grads, *a, dy)?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.acc_data(grads, *a, d)?;
                }
                if self.wants(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*row) {
                    let c = dy.cols();
                    self.acc_data(grads, *row, col_sums(dy.data(), c))?;
                }
                self.acc(grads, *a, dy)?;
            }
            Op::Scale(a, c) => self.acc(grads, *a, dy.map(|v| v * c))?,
            Op::Sum(a) | Op::Mean(a) => {
                let ta = self.value(*a);
                let mut g = dy.data()[0];
                if matches!(op, Op::Mean(_)) {
                    g /= ta.len() as f64;
                }
                self.acc(grads, *a, Tensor::full(ta.shape(), g))?;
            }
            Op::Gelu(a) => {
                let d = dy.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * ops::gelu_grad(*x)).collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Relu(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let y = self.value(out);
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.data().chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma);
                let c = tg.len();
                let (dx, dg, db) = ops::layer_norm_backward(dy.data(), xhat, rstd, tg.data(), c);
                self.acc_data(grads, *x, dx)?;
                self.acc_data(grads, *gamma, dg)?;
                self.acc_data(grads, *beta, db)?;
            }
            Op::Dropout { x, mask } => {
                let d = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc_data(grads, *x, d)?;
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = ops::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    dy.data(),
                    tq.cols(),
                    tv.cols(),
                    layout,
                );
                self.acc_data(grads, *q, dq)?;
                self.acc_data(grads, *k, dk)?;
                self.acc_data(grads, *v, dv)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let scale = dy.data()[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.acc_data(grads, *logits, d)?;
            }
            Op::BinaryCrossEntropy { logits, targets } => {
                let tl = self.value(*logits);
                let scale = dy.data()[0] / tl.len() as f64;
                let d = tl.data().iter().zip(targets).map(|(x, y)| (ops::sigmoid(*x) - y) * scale).collect();
                self.acc_data(grads, *logits, d)?;
            }
            Op::ConcatCols(parts) => {
                let rows = dy.rows();
                let total = dy.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&dy.data()[r * total + offset..][..c]);
                        }
                        self.acc_data(grads, *p, d)?;
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        self.acc_data(grads, *p, dy.data()[offset..offset + n].to_vec())?;
                    }
                    offset += n;
                }
            }
            Op::Combine { x, map } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for (r, entry) in map.iter().enumerate() {
                    let g = &dy.data()[r * c..(r + 1) * c];
                    for &(k, w) in entry {
                        for (o, gv) in d[k * c..(k + 1) * c].iter_mut().zip(g) {
                            *o += w * gv;
                        }
                    }
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::Reshape(x) => self.acc_data(grads, *x, dy.into_data())?,
            Op::Conv3d { x, w, b, spec, cols } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let s = tx.shape();
                let dims = [s[0], s[1], s[2], s[3], s[4]];
                let k = tw.rows();
                let cout = tw.cols();
                let positions = dy.len() / cout;
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * cout];
                    gemm(k, positions, cout, Operand::transposed(cols, k), Operand::plain(dy.data(), cout), &mut dw, false);
                    self.acc_data(grads, *w, dw)?;
                }
                if self.wants(*b) {
                    self.acc_data(grads, *b, col_sums(dy.data(), cout))?;
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; positions * k];
                    gemm(positions, cout, k, Operand::plain(dy.data(), cout), Operand::transposed(tw.data(), cout), &mut dcols, false);
                    let ds = dy.shape();
                    let out_ext = [ds[1], ds[2], ds[3]];
                    let dx = col2im(&dcols, dims, spec, out_ext);
                    self.acc_data(grads, *x, dx)?;
                }
            }
        }
        Ok(())
    }
}

fn for_each_tap(
    dims: [usize; 5],
    spec: &Conv3dSpec,
    out_ext: [usize; 3],
    mut f: impl FnMut(usize, usize, usize),
) {
    // f(col_row_offset, input_offset, channels) for every in-bounds tap.
    let [b, t, h, w, c] = dims;
    let [kt, kh, kw] = spec.kernel;
    let k = kt * kh * kw * c;
    let mut row = 0;
    for bi in 0..b {
        for ot in 0..out_ext[0] {
            for oh in 0..out_ext[1] {
                for ow in 0..out_ext[2] {
                    for dt in 0..kt {
                        let it = (ot * spec.stride[0] + dt) as isize - spec.padding[0] as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for dh in 0..kh {
                            let ih = (oh * spec.stride[1] + dh) as isize - spec.padding[1] as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for dw in 0..kw {
                                let iw = (ow * spec.stride[2] + dw) as isize - spec.padding[2] as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let col = ((dt * kh + dh) * kw + dw) * c;
                                let src = (((bi * t + it as usize) * h + ih as usize) * w + iw as usize) * c;
                                f(row * k + col, src, c);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col(x: &[f64], dims: [usize; 5], spec: &Conv3dSpec, out_ext: [usize; 3]) -> Vec<f64> {
    let k = spec.taps() * dims[4];
    let positions = dims[0] * out_ext.iter().product::<usize>();
    let mut cols = vec![0.0; positions * k];
    for_each_tap(dims, spec, out_ext, |dst, src, c| {
        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
    });
    cols
}

fn col2im(dcols: &[f64], dims: [usize; 5], spec: &Conv3dSpec, out_ext: [usize; 3]) -> Vec<f64> {
    let mut dx = vec![0.0; dims.iter().product()];
    for_each_tap(dims, spec, out_ext, |src, dst, c| {
        for (o, g) in dx[dst..dst + c].iter_mut().zip(&dcols[src..src + c]) {
            *o += g;
        }
    });
    dx
}
