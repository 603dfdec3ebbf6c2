use std::collections::HashMap;

use super::kernels::{self, gemm};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    ConcatCols,
    ConcatRows,
    SliceCols,
    SliceRows,
    Reshape,
    ShiftRows,
    Sigmoid,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    Embedding,
    L1Loss,
    MseLoss,
    CrossEntropy,
    Detach,
    Sum,
    Mean,
    Attention,
    WeightedSum,
    StraightThrough,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::Reshape => "reshape",
            OpKind::ShiftRows => "shift_rows",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding",
            OpKind::L1Loss => "l1_loss",
            OpKind::MseLoss => "mse_loss",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Detach => "detach",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Attention => "attention",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::StraightThrough => "straight_through",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 29] = [
    OpKind::Leaf,
    OpKind::Linear,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddRow,
    OpKind::ConcatCols,
    OpKind::ConcatRows,
    OpKind::SliceCols,
    OpKind::SliceRows,
    OpKind::Reshape,
    OpKind::ShiftRows,
    OpKind::Sigmoid,
    OpKind::Relu,
    OpKind::Gelu,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::Embedding,
    OpKind::L1Loss,
    OpKind::MseLoss,
    OpKind::CrossEntropy,
    OpKind::Detach,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Attention,
    OpKind::WeightedSum,
    OpKind::StraightThrough,
];

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow {
        x: Var,
        b: Var,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    ShiftRows {
        x: Var,
        shift: isize,
    },
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    L1Loss(Var, Var),
    MseLoss(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Detach,
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    StraightThrough(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ShiftRows { .. } => OpKind::ShiftRows,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::L1Loss(..) => OpKind::L1Loss,
            Op::MseLoss(..) => OpKind::MseLoss,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Detach => OpKind::Detach,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Attention { .. } => OpKind::Attention,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::StraightThrough(_) => OpKind::StraightThrough,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A graph that never records gradients; used for inference.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Test hook: every backward rule of `kind` is scaled by 1.5.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.kind().name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf input. `requires_grad` is ignored on inference graphs.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; the same id always maps to the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.trainable(id);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(x));
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", format!("input width {k}, weight {ws:?}")));
        }
        let n = ws[1];
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::shape("linear", format!("bias {:?}", bv.shape())));
            }
            for r in 0..m {
                out[r * n..(r + 1) * n].copy_from_slice(bv.data());
            }
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a));
        let (k2, n) = matrix_dims(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(kind.name(), self.value(a), self.value(b))?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.scale_in_place(s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(b).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("row width {c}, vector {:?}", self.value(b).shape()),
            ));
        }
        let mut t = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for r in 0..t.rows() {
            for (v, bb) in t.row_mut(r).iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(t, Op::AddRow { x, b }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {}", xv.cols())));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![rows, end - start], data)?,
            Op::SliceCols { x, start },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {}", xv.rows())));
        }
        let t = xv.slice_rows(start, end);
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Row `t` of the output is row `t - shift` of `x`, zero outside range.
    /// A positive shift delays the sequence (causal); negative looks ahead.
    pub fn shift_rows(&mut self, x: Var, shift: isize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims(xv);
        let mut out = Tensor::zeros(&[rows, cols]);
        for t in 0..rows {
            let src = t as isize - shift;
            if src >= 0 && (src as usize) < rows {
                out.row_mut(t).copy_from_slice(xv.row(src as usize));
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::ShiftRows { x, shift }, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    /// Softmax along the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        for r in 0..t.rows() {
            kernels::softmax_in_place(t.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims(xv);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            inv_std[r] = kernels::layer_norm_row(
                xv.row(r),
                g,
                b,
                eps,
                &mut out.data_mut()[r * cols..(r + 1) * cols],
                &mut normalized[r * cols..(r + 1) * cols],
            );
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Rows of `table` selected by `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (k, d) = matrix_dims(tv);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::shape(
                "embedding",
                format!("index {bad} out of range for {k} rows"),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(vec![indices.len(), d], data)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("l1_loss", self.value(a), self.value(b))?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::L1Loss(a, b), rg)
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse_loss", self.value(a), self.value(b))?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::MseLoss(a, b), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, k) = matrix_dims(lv);
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows, {} targets", targets.len()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy: no valid targets".into()));
        }
        let mut probs = vec![0.0; rows * k];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= k {
                return Err(Error::shape("cross_entropy", format!("target {target} >= {k} classes")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * k..(r + 1) * k];
            let mut sum = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                sum += *pi;
            }
            total += sum.ln() + max - row[target];
            for pi in p.iter_mut() {
                *pi /= sum;
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Stop-gradient: same value, no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.push(t, Op::Detach, false)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Multi-head scaled dot-product attention on `T x D` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, d) = matrix_dims(self.value(q));
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        same_shape("attention", self.value(q), self.value(k))?;
        same_shape("attention", self.value(q), self.value(v))?;
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            d,
            heads,
            causal,
        );
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::new(vec![t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            rg,
        )
    }

    /// `sum_i weights[i] * items[i]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        if self.value(weights).len() != items.len() || items.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} items", self.value(weights).len(), items.len()),
            ));
        }
        let mut out = Tensor::zeros(self.value(items[0]).shape());
        for (i, &it) in items.iter().enumerate() {
            same_shape("weighted_sum", &out, self.value(it))?;
            let w = self.value(weights).data()[i];
            for (o, x) in out.data_mut().iter_mut().zip(self.value(it).data()) {
                *o += w * x;
            }
        }
        let rg = self.rg(items) || self.rg(&[weights]);
        self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            rg,
        )
    }

    /// Forward value is `quantized`; the gradient passes to `input` unchanged.
    pub fn straight_through(&mut self, input: Var, quantized: Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(input), &quantized)?;
        let rg = self.rg(&[input]);
        self.push(quantized, Op::StraightThrough(input), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contribs = self.node_backward(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    t.scale_in_place(1.5);
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // Keep intermediate grads inspectable.
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Linear { x, w, b } => {
                let (m, k) = matrix_dims(val(*x));
                let n = val(*w).shape()[1];
                if need(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, val(*w).data(), true, &mut dx, false);
                    out.push((*x, Tensor::new(val(*x).shape().to_vec(), dx)?));
                }
                if need(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, val(*x).data(), true, g.data(), false, &mut dw, false);
                    out.push((*w, Tensor::new(vec![k, n], dw)?));
                }
                if let Some(b) = b {
                    if need(*b) {
                        out.push((*b, Tensor::new(val(*b).shape().to_vec(), col_sums(g))?));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = matrix_dims(val(*a));
                let n = val(*b).cols();
                if need(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut da, false);
                    out.push((*a, Tensor::new(val(*a).shape().to_vec(), da)?));
                }
                if need(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut db, false);
                    out.push((*b, Tensor::new(val(*b).shape().to_vec(), db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                let mut nb = g.clone();
                nb.scale_in_place(-1.0);
                out.push((*b, nb));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
                }
                if need(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    out.push((*b, Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_in_place(*s);
                out.push((*a, d));
            }
            Op::AddRow { x, b } => {
                out.push((*x, g.clone()));
                if need(*b) {
                    out.push((*b, Tensor::new(val(*b).shape().to_vec(), col_sums(g))?));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if need(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[off..off + c]);
                        }
                        out.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if need(p) {
                        let d = g.slice_rows(off, off + r).into_data();
                        out.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                    }
                    off += r;
                }
            }
            Op::SliceCols { x, start } => {
                let mut d = Tensor::zeros(val(*x).shape());
                let c = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + c].copy_from_slice(g.row(r));
                }
                out.push((*x, d));
            }
            Op::SliceRows { x, start } => {
                let mut d = Tensor::zeros(val(*x).shape());
                let c = g.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                out.push((*x, d));
            }
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(val(*x).shape())?));
            }
            Op::ShiftRows { x, shift } => {
                let rows = g.rows();
                let mut d = Tensor::zeros(val(*x).shape());
                for t in 0..rows {
                    let src = t as isize - shift;
                    if src >= 0 && (src as usize) < rows {
                        d.row_mut(src as usize).copy_from_slice(g.row(t));
                    }
                }
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gg, y)| gg * y * (1.0 - y))
                    .collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gg, xx)| if *xx > 0.0 { *gg } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Gelu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gg, xx)| gg * kernels::gelu_grad(*xx))
                    .collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = kernels::dot(yr, gr);
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - inner);
                    }
                }
                out.push((*x, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = matrix_dims(val(*x));
                let gv = val(*gain).data();
                if need(*x) {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    let mut dn = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let nr = &normalized[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            dn[i] = gr[i] * gv[i];
                        }
                        let s1: f64 = dn.iter().sum();
                        let s2 = kernels::dot(&dn, nr);
                        let c = cols as f64;
                        for (i, dxi) in dx.row_mut(r).iter_mut().enumerate() {
                            *dxi = inv_std[r] / c * (c * dn[i] - s1 - nr[i] * s2);
                        }
                    }
                    out.push((*x, dx));
                }
                if need(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for i in 0..cols {
                            dg[i] += g.row(r)[i] * normalized[r * cols + i];
                        }
                    }
                    out.push((*gain, Tensor::new(val(*gain).shape().to_vec(), dg)?));
                }
                if need(*bias) {
                    out.push((*bias, Tensor::new(val(*bias).shape().to_vec(), col_sums(g))?));
                }
            }
            Op::Embedding { table, indices } => {
                let mut d = Tensor::zeros(val(*table).shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (a, b) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                out.push((*table, d));
            }
            Op::L1Loss(a, b) => {
                let n = val(*a).len() as f64;
                let s = g.item() / n;
                let d: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| {
                        let diff = x - y;
                        if diff > 0.0 {
                            s
                        } else if diff < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let da = Tensor::new(val(*a).shape().to_vec(), d)?;
                let mut db = da.clone();
                db.scale_in_place(-1.0);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::MseLoss(a, b) => {
                let n = val(*a).len() as f64;
                let s = 2.0 * g.item() / n;
                let d: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| s * (x - y))
                    .collect();
                let da = Tensor::new(val(*a).shape().to_vec(), d)?;
                let mut db = da.clone();
                db.scale_in_place(-1.0);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = val(*logits).cols();
                let s = g.item() / *count as f64;
                let mut d = Tensor::zeros(val(*logits).shape());
                for (r, target) in targets.iter().enumerate() {
                    let Some(target) = *target else { continue };
                    let row = d.row_mut(r);
                    for (j, dv) in row.iter_mut().enumerate() {
                        *dv = s * probs[r * k + j];
                    }
                    row[target] -= s;
                }
                out.push((*logits, d));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape(), g.item())));
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                out.push((*x, Tensor::full(val(*x).shape(), g.item() / n)));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => {
                let (t, d) = matrix_dims(val(*q));
                let (dq, dk, dv) = kernels::attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g.data(),
                    t,
                    d,
                    *heads,
                    *causal,
                );
                out.push((*q, Tensor::new(vec![t, d], dq)?));
                out.push((*k, Tensor::new(vec![t, d], dk)?));
                out.push((*v, Tensor::new(vec![t, d], dv)?));
            }
            Op::WeightedSum { weights, items } => {
                let w = val(*weights).data();
                for (i, &it) in items.iter().enumerate() {
                    if need(it) {
                        let mut d = g.clone();
                        d.scale_in_place(w[i]);
                        out.push((it, d));
                    }
                }
                if need(*weights) {
                    let dw = items.iter().map(|&it| kernels::dot(g.data(), val(it).data())).collect();
                    out.push((*weights, Tensor::new(val(*weights).shape().to_vec(), dw)?));
                }
            }
            Op::StraightThrough(x) => {
                out.push((*x, g.clone()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1]), true).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true)
            .unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_squared_norm_is_twice_x() {
        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0];
        let x = g.input(Tensor::new(vec![1, 3], data.clone()).unwrap(), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let xv = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
        let yv = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let x = g.input(xv.clone(), true).unwrap();
        let y = g.input(yv, true).unwrap();
        let xd = g.detach(x).unwrap();
        let p = g.mul(xd, y).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), xv.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1], 1e308), true).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_k() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 1024]), true).unwrap();
        let ce = g.cross_entropy(x, &[Some(1), Some(5), Some(1023)]).unwrap();
        assert!((g.value(ce).item() - 1024f64.ln()).abs() < 1e-12);
        assert!((1024f64.ln() - 6.9315).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g
            .input(
                Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap(),
                false,
            )
            .unwrap();
        let y = g.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_rows_delays_sequence() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap(), false)
            .unwrap();
        let d = g.shift_rows(x, 1).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 1.0, 2.0]);
        let a = g.shift_rows(x, -1).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in ALL_KINDS {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
