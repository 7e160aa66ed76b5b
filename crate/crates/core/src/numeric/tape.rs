//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Every value produced while a [`Tape`] is alive is appended as a node; a
//! node requires a gradient iff it is a trainable leaf or depends on one.
//! Inputs always precede outputs, so the record is a topological order and
//! the backward sweep is a single reverse pass.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction extent: the whole tensor, down the rows (axis 0), or across the
/// columns (axis 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Rows,
    Cols,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Leaf,
    MatMul,
    /// Elementwise binary ops broadcast the second operand when it is a
    /// `1 x c` row, an `r x 1` column or a `1 x 1` scalar.
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum of two equally shaped operands.
    Maximum,
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Row lookup; rows equal to `padding` come out as zeros and receive no
    /// gradient.
    Gather { indices: Vec<usize>, padding: Option<usize> },
    ReduceSum(Axis),
    ReduceMean(Axis),
    ReduceMax(Axis),
    Transpose,
    /// Per-row standardisation (no affine part).
    LayerNorm { eps: f64 },
    Softmax,
    LogSoftmax,
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    CrossEntropy { targets: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::Div => "divide",
            Primitive::Maximum => "maximum",
            Primitive::Scale(_) => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Gather { .. } => "gather",
            Primitive::ReduceSum(_) => "reduce-sum",
            Primitive::ReduceMean(_) => "reduce-mean",
            Primitive::ReduceMax(_) => "reduce-max",
            Primitive::Transpose => "transpose",
            Primitive::LayerNorm { .. } => "layer-norm",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::CrossEntropy { .. } => "cross-entropy",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Primitive::Leaf => n == 0,
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Maximum => n == 2,
            Primitive::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    Argmax(Vec<usize>),
    RowScale(Vec<f64>),
    Probs(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Record {
    prim: Primitive,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.by_node.iter()
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.records.push(Record {
            prim: Primitive::Leaf,
            inputs: Vec::new(),
            value,
            saved: Saved::None,
            requires_grad,
        });
        NodeId(self.records.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.records[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.records[id.0].requires_grad
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.records.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if !prim.arity_ok(inputs.len()) {
            return Err(Error::invalid(format!(
                "{} does not take {} inputs",
                prim.name(),
                inputs.len()
            )));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let (value, saved) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.records[id.0].value).collect();
            forward(&prim, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let requires_grad = inputs.iter().any(|id| self.records[id.0].requires_grad);
        self.records.push(Record { prim, inputs: inputs.to_vec(), value, saved, requires_grad });
        Ok(NodeId(self.records.len() - 1))
    }

    /// Recomputes every non-leaf node from its recorded inputs and checks the
    /// result is bit-identical to what was stored.
    pub fn replay_matches(&self) -> Result<bool> {
        for rec in &self.records {
            if rec.prim == Primitive::Leaf {
                continue;
            }
            let vals: Vec<&Tensor> = rec.inputs.iter().map(|id| &self.records[id.0].value).collect();
            let (value, _) = forward(&rec.prim, &vals)?;
            if value.shape() != rec.value.shape()
                || value.data().iter().zip(rec.value.data()).any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let loss_val = &self.records[loss.0].value;
        if loss_val.len() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let rec = &self.records[idx];
            if !rec.requires_grad || rec.prim == Primitive::Leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let vals: Vec<&Tensor> = rec.inputs.iter().map(|id| &self.records[id.0].value).collect();
            let needs: Vec<bool> =
                rec.inputs.iter().map(|id| self.records[id.0].requires_grad).collect();
            let input_grads = adjoint(rec, &vals, &needs, &g)?;
            for ((id, need), ig) in rec.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&ig) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let mut by_node = BTreeMap::new();
        for (idx, rec) in self.records.iter().enumerate() {
            if rec.prim != Primitive::Leaf || !rec.requires_grad {
                continue;
            }
            let shape = rec.value.shape().to_vec();
            let data = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; rec.value.len()]);
            by_node.insert(NodeId(idx), Tensor::new(shape, data)?);
        }
        Ok(Gradients { by_node })
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Maximum, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Gather { indices: indices.to_vec(), padding: None }, &[table])
    }
    pub fn gather_padded(&mut self, table: NodeId, indices: &[usize], padding: usize) -> Result<NodeId> {
        self.apply(
            Primitive::Gather { indices: indices.to_vec(), padding: Some(padding) },
            &[table],
        )
    }
    pub fn sum(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.apply(Primitive::ReduceSum(axis), &[a])
    }
    pub fn mean(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.apply(Primitive::ReduceMean(axis), &[a])
    }
    pub fn max(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.apply(Primitive::ReduceMax(axis), &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::CrossEntropy { targets: targets.to_vec() }, &[logits])
    }

    /// `x * x`, elementwise.
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Adds a scalar constant.
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let c = self.constant(Tensor::scalar(s));
        self.add(a, c)
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

/// Broadcast mode of the second operand of an elementwise op.
#[derive(Clone, Copy)]
struct Bcast {
    rows: usize,
    cols: usize,
    b_rows: usize,
    b_cols: usize,
}

impl Bcast {
    fn resolve(op: &str, a: &Tensor, b: &Tensor) -> Result<Self> {
        let (rows, cols) = a.dims2()?;
        let (b_rows, b_cols) = b.dims2()?;
        let ok = (b_rows == rows || b_rows == 1) && (b_cols == cols || b_cols == 1);
        if !ok {
            return Err(shape_err(op, a, b));
        }
        Ok(Self { rows, cols, b_rows, b_cols })
    }

    #[inline]
    fn b_index(&self, i: usize, j: usize) -> usize {
        let bi = if self.b_rows == 1 { 0 } else { i };
        let bj = if self.b_cols == 1 { 0 } else { j };
        bi * self.b_cols + bj
    }

    fn is_same(&self) -> bool {
        self.b_rows == self.rows && self.b_cols == self.cols
    }
}

fn binary(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let bc = Bcast::resolve(op, a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let data = if bc.is_same() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let mut out = Vec::with_capacity(ad.len());
        for i in 0..bc.rows {
            for j in 0..bc.cols {
                out.push(f(ad[i * bc.cols + j], bd[bc.b_index(i, j)]));
            }
        }
        out
    };
    Tensor::new(a.shape().to_vec(), data)
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(f)
}

fn row_softmax(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let none = |t: Tensor| Ok((t, Saved::None));
    match prim {
        Primitive::Leaf => Err(Error::invalid("leaf has no forward")),
        Primitive::MatMul => {
            let (m, k) = x[0].dims2()?;
            let (k2, n) = x[1].dims2()?;
            if k != k2 {
                return Err(shape_err("matmul", x[0], x[1]));
            }
            none(Tensor::new(vec![m, n], kernels::matmul(x[0].data(), x[1].data(), m, k, n))?)
        }
        Primitive::Add => none(binary("add", x[0], x[1], |a, b| a + b)?),
        Primitive::Sub => none(binary("subtract", x[0], x[1], |a, b| a - b)?),
        Primitive::Mul => none(binary("multiply", x[0], x[1], |a, b| a * b)?),
        Primitive::Div => none(binary("divide", x[0], x[1], |a, b| a / b)?),
        Primitive::Maximum => {
            if x[0].dims2()? != x[1].dims2()? {
                return Err(shape_err("maximum", x[0], x[1]));
            }
            none(binary("maximum", x[0], x[1], |a, b| if a >= b { a } else { b })?)
        }
        Primitive::Scale(s) => none(unary(x[0], |v| v * s)),
        Primitive::Tanh => none(unary(x[0], f64::tanh)),
        Primitive::Sigmoid => none(unary(x[0], sigmoid)),
        Primitive::Relu => none(unary(x[0], |v| if v > 0.0 { v } else { 0.0 })),
        Primitive::Exp => none(unary(x[0], f64::exp)),
        Primitive::Log => none(unary(x[0], f64::ln)),
        Primitive::Sqrt => none(unary(x[0], f64::sqrt)),
        Primitive::Concat { axis } => {
            let dims: Vec<(usize, usize)> = x.iter().map(|t| t.dims2()).collect::<Result<_>>()?;
            match axis {
                0 => {
                    let cols = dims[0].1;
                    if dims.iter().any(|d| d.1 != cols) {
                        return Err(Error::Shape(format!("concat rows: column counts {dims:?}")));
                    }
                    let rows: usize = dims.iter().map(|d| d.0).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for t in x {
                        data.extend_from_slice(t.data());
                    }
                    none(Tensor::new(vec![rows, cols], data)?)
                }
                1 => {
                    let rows = dims[0].0;
                    if dims.iter().any(|d| d.0 != rows) {
                        return Err(Error::Shape(format!("concat cols: row counts {dims:?}")));
                    }
                    let cols: usize = dims.iter().map(|d| d.1).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for (t, d) in x.iter().zip(&dims) {
                            data.extend_from_slice(&t.data()[r * d.1..(r + 1) * d.1]);
                        }
                    }
                    none(Tensor::new(vec![rows, cols], data)?)
                }
                _ => Err(Error::Shape(format!("concat axis {axis} out of range"))),
            }
        }
        Primitive::Slice { axis, start, len } => {
            let (rows, cols) = x[0].dims2()?;
            let (start, len) = (*start, *len);
            let extent = match axis {
                0 => rows,
                1 => cols,
                _ => return Err(Error::Shape(format!("slice axis {axis} out of range"))),
            };
            if len == 0 || start + len > extent {
                return Err(Error::Shape(format!(
                    "slice [{start}, {}) outside axis {axis} of extent {extent}",
                    start + len
                )));
            }
            let d = x[0].data();
            if *axis == 0 {
                none(Tensor::new(vec![len, cols], d[start * cols..(start + len) * cols].to_vec())?)
            } else {
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
                }
                none(Tensor::new(vec![rows, len], data)?)
            }
        }
        Primitive::Gather { indices, padding } => {
            let (vocab, cols) = x[0].dims2()?;
            if indices.is_empty() {
                return Err(Error::Shape("gather with no indices".into()));
            }
            let d = x[0].data();
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &ix in indices {
                if ix >= vocab {
                    return Err(Error::Shape(format!("gather index {ix} >= table rows {vocab}")));
                }
                if Some(ix) == *padding {
                    data.extend(std::iter::repeat_n(0.0, cols));
                } else {
                    data.extend_from_slice(&d[ix * cols..(ix + 1) * cols]);
                }
            }
            none(Tensor::new(vec![indices.len(), cols], data)?)
        }
        Primitive::ReduceSum(axis) | Primitive::ReduceMean(axis) => {
            let (rows, cols) = x[0].dims2()?;
            let d = x[0].data();
            let mean = matches!(prim, Primitive::ReduceMean(_));
            let t = match axis {
                Axis::All => {
                    let s: f64 = d.iter().sum();
                    Tensor::scalar(if mean { s / d.len() as f64 } else { s })
                }
                Axis::Rows => {
                    let mut out = vec![0.0; cols];
                    for r in 0..rows {
                        for (o, v) in out.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
                            *o += v;
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|o| *o /= rows as f64);
                    }
                    Tensor::new(vec![1, cols], out)?
                }
                Axis::Cols => {
                    let out = (0..rows)
                        .map(|r| {
                            let s: f64 = d[r * cols..(r + 1) * cols].iter().sum();
                            if mean {
                                s / cols as f64
                            } else {
                                s
                            }
                        })
                        .collect();
                    Tensor::new(vec![rows, 1], out)?
                }
            };
            none(t)
        }
        Primitive::ReduceMax(axis) => {
            let (rows, cols) = x[0].dims2()?;
            let d = x[0].data();
            let argmax_of = |idx: &mut dyn Iterator<Item = usize>| -> usize {
                let mut best = usize::MAX;
                for i in idx {
                    if best == usize::MAX || d[i] > d[best] {
                        best = i;
                    }
                }
                best
            };
            let (shape, arg): (Vec<usize>, Vec<usize>) = match axis {
                Axis::All => (vec![1, 1], vec![argmax_of(&mut (0..d.len()))]),
                Axis::Rows => (
                    vec![1, cols],
                    (0..cols).map(|c| argmax_of(&mut (0..rows).map(|r| r * cols + c))).collect(),
                ),
                Axis::Cols => (
                    vec![rows, 1],
                    (0..rows).map(|r| argmax_of(&mut (r * cols..(r + 1) * cols))).collect(),
                ),
            };
            let data = arg.iter().map(|&i| d[i]).collect();
            Ok((Tensor::new(shape, data)?, Saved::Argmax(arg)))
        }
        Primitive::Transpose => none(x[0].transpose()?),
        Primitive::LayerNorm { eps } => {
            let (rows, cols) = x[0].dims2()?;
            let d = x[0].data();
            let mut out = vec![0.0; rows * cols];
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &d[r * cols..(r + 1) * cols];
                let mu = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let s = 1.0 / (var + eps).sqrt();
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = (v - mu) * s;
                }
                rstd.push(s);
            }
            Ok((Tensor::new(vec![rows, cols], out)?, Saved::RowScale(rstd)))
        }
        Primitive::Softmax => {
            let (rows, cols) = x[0].dims2()?;
            none(Tensor::new(vec![rows, cols], row_softmax(x[0].data(), rows, cols))?)
        }
        Primitive::LogSoftmax => {
            let (rows, cols) = x[0].dims2()?;
            let d = x[0].data();
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &d[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = v - lse;
                }
            }
            none(Tensor::new(vec![rows, cols], out)?)
        }
        Primitive::CrossEntropy { targets } => {
            let (rows, cols) = x[0].dims2()?;
            if targets.len() != rows {
                return Err(Error::Shape(format!(
                    "cross-entropy: {} targets for {rows} rows",
                    targets.len()
                )));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
                return Err(Error::Shape(format!("cross-entropy target {t} >= {cols} classes")));
            }
            let d = x[0].data();
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &d[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            let probs = row_softmax(d, rows, cols);
            Ok((Tensor::scalar(total / rows as f64), Saved::Probs(probs)))
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Vector-Jacobian products of one record: the gradient of each input given
/// the output gradient `g`. `None` entries are skipped by the caller.
fn adjoint(rec: &Record, x: &[&Tensor], needs: &[bool], g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let y = rec.value.data();
    let one = |v: Vec<f64>| Ok(vec![Some(v)]);
    match &rec.prim {
        Primitive::Leaf => Ok(Vec::new()),
        Primitive::MatMul => {
            let (m, k) = x[0].dims2()?;
            let (_, n) = x[1].dims2()?;
            let ga = needs[0].then(|| {
                let mut out = vec![0.0; m * k];
                kernels::matmul_nt_acc(g, x[1].data(), &mut out, m, n, k);
                out
            });
            let gb = needs[1].then(|| {
                let mut out = vec![0.0; k * n];
                kernels::matmul_tn_acc(x[0].data(), g, &mut out, m, k, n);
                out
            });
            Ok(vec![ga, gb])
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let bc = Bcast::resolve(rec.prim.name(), x[0], x[1])?;
            let (ad, bd) = (x[0].data(), x[1].data());
            let mut ga = needs[0].then(|| vec![0.0; ad.len()]);
            let mut gb = needs[1].then(|| vec![0.0; bd.len()]);
            for i in 0..bc.rows {
                for j in 0..bc.cols {
                    let ia = i * bc.cols + j;
                    let ib = bc.b_index(i, j);
                    let gv = g[ia];
                    let (da, db) = match rec.prim {
                        Primitive::Add => (gv, gv),
                        Primitive::Sub => (gv, -gv),
                        Primitive::Mul => (gv * bd[ib], gv * ad[ia]),
                        _ => (gv / bd[ib], -gv * ad[ia] / (bd[ib] * bd[ib])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                }
            }
            Ok(vec![ga, gb])
        }
        Primitive::Maximum => {
            let (ad, bd) = (x[0].data(), x[1].data());
            let ga = needs[0]
                .then(|| g.iter().zip(ad.iter().zip(bd)).map(|(gv, (a, b))| if a >= b { *gv } else { 0.0 }).collect());
            let gb = needs[1]
                .then(|| g.iter().zip(ad.iter().zip(bd)).map(|(gv, (a, b))| if a >= b { 0.0 } else { *gv }).collect());
            Ok(vec![ga, gb])
        }
        Primitive::Scale(s) => one(g.iter().map(|v| v * s).collect()),
        Primitive::Tanh => one(g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect()),
        Primitive::Sigmoid => one(g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect()),
        Primitive::Relu => one(
            g.iter()
                .zip(x[0].data())
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect(),
        ),
        Primitive::Exp => one(g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()),
        Primitive::Log => one(g.iter().zip(x[0].data()).map(|(gv, xv)| gv / xv).collect()),
        Primitive::Sqrt => one(g.iter().zip(y).map(|(gv, yv)| gv / (2.0 * yv)).collect()),
        Primitive::Concat { axis } => {
            let dims: Vec<(usize, usize)> = x.iter().map(|t| t.dims2()).collect::<Result<_>>()?;
            let mut out = Vec::with_capacity(x.len());
            if *axis == 0 {
                let mut offset = 0;
                for (d, need) in dims.iter().zip(needs) {
                    let n = d.0 * d.1;
                    out.push(need.then(|| g[offset..offset + n].to_vec()));
                    offset += n;
                }
            } else {
                let rows = dims[0].0;
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut col0 = 0;
                for (d, need) in dims.iter().zip(needs) {
                    out.push(need.then(|| {
                        let mut v = Vec::with_capacity(rows * d.1);
                        for r in 0..rows {
                            v.extend_from_slice(&g[r * total + col0..r * total + col0 + d.1]);
                        }
                        v
                    }));
                    col0 += d.1;
                }
            }
            Ok(out)
        }
        Primitive::Slice { axis, start, len } => {
            let (rows, cols) = x[0].dims2()?;
            let mut out = vec![0.0; rows * cols];
            if *axis == 0 {
                out[start * cols..(start + len) * cols].copy_from_slice(g);
            } else {
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
            }
            one(out)
        }
        Primitive::Gather { indices, padding } => {
            let (vocab, cols) = x[0].dims2()?;
            let mut out = vec![0.0; vocab * cols];
            for (r, &ix) in indices.iter().enumerate() {
                if Some(ix) == *padding {
                    continue;
                }
                for (o, v) in out[ix * cols..(ix + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            one(out)
        }
        Primitive::ReduceSum(axis) | Primitive::ReduceMean(axis) => {
            let (rows, cols) = x[0].dims2()?;
            let mean = matches!(rec.prim, Primitive::ReduceMean(_));
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = match axis {
                        Axis::All => g[0] / if mean { (rows * cols) as f64 } else { 1.0 },
                        Axis::Rows => g[c] / if mean { rows as f64 } else { 1.0 },
                        Axis::Cols => g[r] / if mean { cols as f64 } else { 1.0 },
                    };
                }
            }
            one(out)
        }
        Primitive::ReduceMax(_) => {
            let Saved::Argmax(arg) = &rec.saved else {
                return Err(Error::invalid("reduce-max record lost its argmax"));
            };
            let mut out = vec![0.0; x[0].len()];
            for (gv, &i) in g.iter().zip(arg) {
                out[i] += gv;
            }
            one(out)
        }
        Primitive::Transpose => {
            let (rows, cols) = x[0].dims2()?;
            one(kernels::transpose(g, cols, rows))
        }
        Primitive::LayerNorm { .. } => {
            let Saved::RowScale(rstd) = &rec.saved else {
                return Err(Error::invalid("layer-norm record lost its statistics"));
            };
            let (rows, cols) = x[0].dims2()?;
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let mg = gr.iter().sum::<f64>() / cols as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for ((o, gv), yv) in out[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                    *o = rstd[r] * (gv - mg - yv * mgy);
                }
            }
            one(out)
        }
        Primitive::Softmax => {
            let (rows, cols) = rec.value.dims2()?;
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in out[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            one(out)
        }
        Primitive::LogSoftmax => {
            let (rows, cols) = rec.value.dims2()?;
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let s: f64 = gr.iter().sum();
                for ((o, gv), yv) in out[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                    *o = gv - yv.exp() * s;
                }
            }
            one(out)
        }
        Primitive::CrossEntropy { targets } => {
            let Saved::Probs(p) = &rec.saved else {
                return Err(Error::invalid("cross-entropy record lost its probabilities"));
            };
            let (rows, cols) = x[0].dims2()?;
            let scale = g[0] / rows as f64;
            let mut out: Vec<f64> = p.iter().map(|v| v * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                out[r * cols + t] -= scale;
            }
            one(out)
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.variable(Tensor::scalar(3.0));
        let loss = tape.mul(x, y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let loss = tape.tanh(x).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn identity_matmul_and_zero_tanh() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 4.0, 5.0, -6.0]).unwrap();
        let mn = tape.constant(m.clone());
        let out = tape.matmul(i2, mn).unwrap();
        assert_eq!(tape.value(out), &m);
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let t = tape.tanh(z).unwrap();
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_selects_rows() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.gather(table, &[1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 1.0, 2.0]);
        let p = tape.gather_padded(table, &[0, 1], 0).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        let neg = tape.constant(Tensor::scalar(-1.0));
        assert!(matches!(tape.log(neg), Err(Error::NonFinite { .. })));
        let zero = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.log(zero), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        assert!(matches!(tape.backward(NodeId(99)), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.5));
        let unused = tape.variable(Tensor::zeros(&[2, 2]));
        let loss = tape.square(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert!(g.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_repeatable_and_replay_exact() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::matrix(2, 2, vec![0.3, -0.2, 0.7, 0.1]).unwrap());
        let x = tape.constant(Tensor::matrix(3, 2, vec![1., 2., -1., 0.5, 0.0, 3.0]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let h = tape.tanh(h).unwrap();
        let h = tape.layer_norm(h, 1e-5).unwrap();
        let s = tape.softmax(h).unwrap();
        let loss = tape.sum(s, Axis::Rows).unwrap();
        let loss = tape.max(loss, Axis::All).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert!(tape.replay_matches().unwrap());
    }
}
