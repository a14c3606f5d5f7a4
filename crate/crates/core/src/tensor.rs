//! Dense f64 arrays with a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation in creation order, so node indices are
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep. Parameters live outside the graph in a [`ParamSet`]; a forward pass
//! binds them as leaves and copies gradients back after backward.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| dist.sample(rng))
                .collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    ConstMul {
        a: Var,
        factors: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        rows: Vec<bool>,
        train: bool,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        pairs: Vec<(usize, usize)>,
        probs: HashMap<usize, Vec<f64>>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<(usize, f64)>,
    },
    MeanPool {
        a: Var,
        groups: Vec<Vec<usize>>,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ConstMul { .. } => "const_mul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm_rows",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gather { .. } => "embedding_gather",
            Op::SelectRows { .. } => "select_rows",
            Op::Concat { .. } => "concat_last_axis",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "binary_cross_entropy",
            Op::MeanPool { .. } => "mean_pool_rows",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-column batch mean and biased variance.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Batch-norm statistics used in evaluation mode.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize with statistics of the selected rows and report them.
    Batch,
    /// Normalize with frozen running statistics.
    Frozen { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
fn matmul_tn_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over entries with `mask != 0`; fully masked rows are zero.
fn masked_softmax_row(row: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j] != 0.0);
    let max = (0..row.len())
        .filter(|&j| allowed(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for j in 0..row.len() {
        out[j] = if allowed(j) {
            (row[j] - max).exp()
        } else {
            0.0
        };
        total += out[j];
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn log_softmax_row(row: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    (row.iter().map(|v| (v - lse).exp()).collect(), lse)
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if let Some(index) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDetected {
                op: op.name(),
                index,
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self
                .parents(&op)
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::ConstMul { a, .. }
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::SelectRows { a, .. }
            | Op::Reshape(a)
            | Op::MeanPool { a, .. }
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } | Op::BceLogits { logits, .. } => vec![*logits],
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// a[.., k] · b[k, n] → [.., n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape.len() != 2 || ta.cols() != tb.shape[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape, tb.shape),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, &tb.data, &mut out, m, k, n);
        let mut shape = ta.shape.clone();
        *shape.last_mut().expect("rank >= 1") = n;
        self.push(Tensor { shape, data: out }, Op::MatMul { a, b })
    }

    /// a[B,m,k] · b[B,k,n] (or b[B,n,k]ᵀ when `trans_b`) → [B,m,n]
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 3 || tb.shape.len() != 3 || ta.shape[0] != tb.shape[0] {
            return Err(shape_err(
                "batch_matmul",
                format!("{:?} x {:?}", ta.shape, tb.shape),
            ));
        }
        let (bs, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let (kb, n) = if trans_b {
            (tb.shape[2], tb.shape[1])
        } else {
            (tb.shape[1], tb.shape[2])
        };
        if kb != k {
            return Err(shape_err(
                "batch_matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", ta.shape, tb.shape),
            ));
        }
        let mut out = vec![0.0; bs * m * n];
        for s in 0..bs {
            let (ad, bd) = (
                &ta.data[s * m * k..(s + 1) * m * k],
                &tb.data[s * k * n..(s + 1) * k * n],
            );
            let od = &mut out[s * m * n..(s + 1) * m * n];
            if trans_b {
                matmul_nt_into(ad, bd, od, m, k, n);
            } else {
                matmul_into(ad, bd, od, m, k, n);
            }
        }
        self.push(
            Tensor {
                shape: vec![bs, m, n],
                data: out,
            },
            Op::BatchMatMul { a, b, trans_b },
        )
    }

    /// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape
    /// and is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.shape.ends_with(&tb.shape) || tb.numel() == 0 {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape, tb.shape)));
        }
        let w = tb.numel();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data[i % w])
            .collect();
        self.push(
            Tensor {
                shape: ta.shape.clone(),
                data,
            },
            Op::Add { a, b },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", format!("{:?} * {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        self.push(
            Tensor {
                shape: ta.shape.clone(),
                data,
            },
            Op::Mul { a, b },
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * c).collect();
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data,
            },
            Op::Scale { a, c },
        )
    }

    /// Multiplies by fixed per-element factors (no gradient to the factors).
    pub fn const_mul(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.numel() {
            return Err(shape_err(
                "const_mul",
                format!("{} factors for {:?}", factors.len(), t.shape),
            ));
        }
        let data = t.data.iter().zip(&factors).map(|(x, f)| x * f).collect();
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data,
            },
            Op::ConstMul { a, factors },
        )
    }

    /// Inverted dropout: survivors are scaled by 1/(1-rate); identity when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !train || rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let factors = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        self.const_mul(a, factors)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| x.max(0.0)).collect();
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data,
            },
            Op::Relu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data,
            },
            Op::Sigmoid(a),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax along the last axis restricted to entries where `mask != 0`
    /// (`mask` has the same layout as `a`).
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(shape_err(
                "masked_softmax_rows",
                format!("mask of {} for {:?}", mask.len(), self.shape(a)),
            ));
        }
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<&[f64]>) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; t.numel()];
        for r in 0..t.rows() {
            let m = mask.map(|m| &m[r * c..(r + 1) * c]);
            masked_softmax_row(&t.data[r * c..(r + 1) * c], m, &mut out[r * c..(r + 1) * c]);
        }
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data: out,
            },
            Op::Softmax(a),
        )
    }

    /// Normalizes each row over the last axis, then applies gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = t.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(shape_err(
                "layer_norm_rows",
                format!("{:?} with gain {:?}", t.shape, tg.shape),
            ));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data: out,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-feature normalization of a [R, N] input. Batch statistics are taken
    /// over rows with `rows[r] == true` only and applied to every row. Returns
    /// the batch mean and biased variance when computed.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        rows: &[bool],
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (t, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = (t.rows(), t.cols());
        if rows.len() != r || tg.numel() != c || tb.numel() != c {
            return Err(shape_err(
                "batch_norm",
                format!("{:?} with {} row flags", t.shape, rows.len()),
            ));
        }
        let (mean, var, train) = match stats {
            NormStats::Frozen { mean, var } => (mean.to_vec(), var.to_vec(), false),
            NormStats::Batch => {
                let m = rows.iter().filter(|&&f| f).count().max(1) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in (0..r).filter(|&i| rows[i]) {
                    for (m, v) in mean.iter_mut().zip(&t.data[i * c..(i + 1) * c]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for i in (0..r).filter(|&i| rows[i]) {
                    for j in 0..c {
                        var[j] += (t.data[i * c + j] - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let mut xhat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for i in 0..r {
            for j in 0..c {
                let h = (t.data[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let shape = t.shape.clone();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            rows: rows.to_vec(),
            train,
        };
        let v = self.push(Tensor { shape, data: out }, op)?;
        Ok((v, train.then_some((mean, var))))
    }

    /// Rows of a [V, N] table → [ids.len(), N].
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(shape_err(
                "embedding_gather",
                format!("table {:?}", t.shape),
            ));
        }
        let (v, n) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::IdOutOfRange {
                    kind: "embedding",
                    id,
                    size: v,
                });
            }
            data.extend_from_slice(&t.data[id * n..(id + 1) * n]);
        }
        self.push(
            Tensor {
                shape: vec![ids.len(), n],
                data,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selected rows of a [.., N] tensor viewed as [R, N] → [rows.len(), N].
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::IdOutOfRange {
                    kind: "row",
                    id: i,
                    size: r,
                });
            }
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor {
                shape: vec![rows.len(), c],
                data,
            },
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(
            *parts
                .first()
                .ok_or_else(|| shape_err("concat_last_axis", "no inputs".into()))?,
        );
        let lead = first.shape[..first.shape.len() - 1].to_vec();
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape[..t.shape.len() - 1] != lead[..] {
                return Err(shape_err(
                    "concat_last_axis",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape)));
        }
        let data = t.data.clone();
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(a),
        )
    }

    /// Mean over listed (row, target) pairs of −log softmax(logits[row])[target].
    /// Rows not listed do not influence the value. No pairs gives 0.
    pub fn cross_entropy(&mut self, logits: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = (t.rows(), t.cols());
        let mut probs: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut lses: HashMap<usize, f64> = HashMap::new();
        let mut total = 0.0;
        for &(row, target) in pairs {
            if row >= r || target >= c {
                return Err(Error::IdOutOfRange {
                    kind: "cross_entropy target",
                    id: row.max(target),
                    size: r.max(c),
                });
            }
            if let std::collections::hash_map::Entry::Vacant(e) = probs.entry(row) {
                let (p, lse) = log_softmax_row(t.row(row));
                e.insert(p);
                lses.insert(row, lse);
            }
            total += lses[&row] - t.data[row * c + target];
        }
        let value = if pairs.is_empty() {
            0.0
        } else {
            total / pairs.len() as f64
        };
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                pairs: pairs.to_vec(),
                probs,
            },
        )
    }

    /// Mean over listed (index, label) of the logistic loss on logits[index].
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &[(usize, f64)]) -> Result<Var> {
        let t = self.value(logits);
        let mut total = 0.0;
        for &(i, y) in targets {
            let z = *t.data.get(i).ok_or(Error::IdOutOfRange {
                kind: "bce index",
                id: i,
                size: t.numel(),
            })?;
            total += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
        }
        let value = if targets.is_empty() {
            0.0
        } else {
            total / targets.len() as f64
        };
        self.push(
            Tensor::scalar(value),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean of the listed rows of a [.., N] tensor for each group → [G, N].
    pub fn mean_pool_rows(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(shape_err("mean_pool_rows", format!("group {g} is empty")));
            }
            for &i in rows {
                if i >= r {
                    return Err(Error::IdOutOfRange {
                        kind: "row",
                        id: i,
                        size: r,
                    });
                }
                for j in 0..c {
                    data[g * c + j] += t.data[i * c + j];
                }
            }
            let inv = 1.0 / rows.len() as f64;
            data[g * c..(g + 1) * c].iter_mut().for_each(|v| *v *= inv);
        }
        self.push(
            Tensor {
                shape: vec![groups.len(), c],
                data,
            },
            Op::MeanPool {
                a,
                groups: groups.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    fn accumulate(
        grads: &mut [Option<Vec<f64>>],
        nodes: &[Node],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
        f(buf);
    }

    /// Reverse sweep from a scalar `loss`, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.shape[1]);
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        matmul_nt_into(&g, &tb.data, ga, m, n, k)
                    });
                    Self::accumulate(&mut grads, nodes, *b, |gb| {
                        matmul_tn_into(&ta.data, &g, gb, m, k, n)
                    });
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (bs, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                    let n = out.shape[2];
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for s in 0..bs {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let bd = &tb.data[s * k * n..(s + 1) * k * n];
                            let gad = &mut ga[s * m * k..(s + 1) * m * k];
                            if *trans_b {
                                // b is [n,k]: dA = G · B
                                matmul_into(gs, bd, gad, m, n, k);
                            } else {
                                // b is [k,n]: dA = G · Bᵀ
                                matmul_nt_into(gs, bd, gad, m, n, k);
                            }
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *b, |gb| {
                        for s in 0..bs {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let ad = &ta.data[s * m * k..(s + 1) * m * k];
                            let gbd = &mut gb[s * k * n..(s + 1) * k * n];
                            if *trans_b {
                                // dB[n,k] = Gᵀ · A
                                matmul_tn_into(gs, ad, gbd, m, n, k);
                            } else {
                                // dB[k,n] = Aᵀ · G
                                matmul_tn_into(ad, gs, gbd, m, k, n);
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                    let w = nodes[b.0].value.numel();
                    Self::accumulate(&mut grads, nodes, *b, |gb| {
                        for (i, y) in g.iter().enumerate() {
                            gb[i % w] += y;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for ((x, gy), bv) in ga.iter_mut().zip(&g).zip(&tb.data) {
                            *x += gy * bv;
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *b, |gb| {
                        for ((x, gy), av) in gb.iter_mut().zip(&g).zip(&ta.data) {
                            *x += gy * av;
                        }
                    });
                }
                Op::Scale { a, c } => {
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y * c)
                    });
                }
                Op::ConstMul { a, factors } => {
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for ((x, y), f) in ga.iter_mut().zip(&g).zip(factors) {
                            *x += y * f;
                        }
                    });
                }
                Op::Relu(a) => {
                    let ta = &nodes[a.0].value;
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for ((x, y), v) in ga.iter_mut().zip(&g).zip(&ta.data) {
                            if *v > 0.0 {
                                *x += y;
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for ((x, y), s) in ga.iter_mut().zip(&g).zip(&out.data) {
                            *x += y * s * (1.0 - s);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for r in 0..out.rows() {
                            let (ys, gs) = (&out.data[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                            let dot: f64 = ys.iter().zip(gs).map(|(y, gy)| y * gy).sum();
                            for j in 0..c {
                                ga[r * c + j] += ys[j] * (gs[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = out.cols();
                    let rows = out.rows();
                    let tg = &nodes[gain.0].value;
                    Self::accumulate(&mut grads, nodes, *x, |gx| {
                        for r in 0..rows {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for j in 0..c {
                                let gh = g[r * c + j] * tg.data[j];
                                mean_g += gh;
                                mean_gx += gh * xhat[r * c + j];
                            }
                            mean_g /= c as f64;
                            mean_gx /= c as f64;
                            for j in 0..c {
                                let gh = g[r * c + j] * tg.data[j];
                                gx[r * c + j] +=
                                    inv_std[r] * (gh - mean_g - xhat[r * c + j] * mean_gx);
                            }
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *gain, |gg| {
                        for (i, gy) in g.iter().enumerate() {
                            gg[i % c] += gy * xhat[i];
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *bias, |gb| {
                        for (i, gy) in g.iter().enumerate() {
                            gb[i % c] += gy;
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    rows,
                    train,
                } => {
                    let c = out.cols();
                    let r = out.rows();
                    let tg = &nodes[gamma.0].value;
                    Self::accumulate(&mut grads, nodes, *x, |gx| {
                        if !*train {
                            for i in 0..r * c {
                                gx[i] += g[i] * tg.data[i % c] * inv_std[i % c];
                            }
                            return;
                        }
                        let m = rows.iter().filter(|&&f| f).count().max(1) as f64;
                        // gradients through the batch mean and variance (selected rows only)
                        let mut sum_g = vec![0.0; c];
                        let mut sum_gx = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                let gh = g[i * c + j] * tg.data[j];
                                sum_g[j] += gh;
                                sum_gx[j] += gh * xhat[i * c + j];
                            }
                        }
                        for i in 0..r {
                            for j in 0..c {
                                let gh = g[i * c + j] * tg.data[j];
                                let mut d = gh;
                                if rows[i] {
                                    d -= (sum_g[j] + xhat[i * c + j] * sum_gx[j]) / m;
                                }
                                gx[i * c + j] += d * inv_std[j];
                            }
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *gamma, |gg| {
                        for (i, gy) in g.iter().enumerate() {
                            gg[i % c] += gy * xhat[i];
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *beta, |gb| {
                        for (i, gy) in g.iter().enumerate() {
                            gb[i % c] += gy;
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let n = out.cols();
                    Self::accumulate(&mut grads, nodes, *table, |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..n {
                                gt[id * n + j] += g[r * n + j];
                            }
                        }
                    });
                }
                Op::SelectRows { a, rows } => {
                    let n = out.cols();
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for (r, &src) in rows.iter().enumerate() {
                            for j in 0..n {
                                ga[src * n + j] += g[r * n + j];
                            }
                        }
                    });
                }
                Op::Concat { parts } => {
                    let total = out.cols();
                    let rows = out.rows();
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        Self::accumulate(&mut grads, nodes, *p, |gp| {
                            for r in 0..rows {
                                for j in 0..w {
                                    gp[r * w + j] += g[r * total + off + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::Reshape(a) => {
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                }
                Op::CrossEntropy {
                    logits,
                    pairs,
                    probs,
                } => {
                    let c = nodes[logits.0].value.cols();
                    let scale = g[0] / pairs.len().max(1) as f64;
                    Self::accumulate(&mut grads, nodes, *logits, |gl| {
                        for &(row, target) in pairs {
                            for (j, p) in probs[&row].iter().enumerate() {
                                gl[row * c + j] += scale * p;
                            }
                            gl[row * c + target] -= scale;
                        }
                    });
                }
                Op::BceLogits { logits, targets } => {
                    let tl = &nodes[logits.0].value;
                    let scale = g[0] / targets.len().max(1) as f64;
                    Self::accumulate(&mut grads, nodes, *logits, |gl| {
                        for &(i, y) in targets {
                            gl[i] += scale * (sigmoid(tl.data[i]) - y);
                        }
                    });
                }
                Op::MeanPool { a, groups } => {
                    let c = out.cols();
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        for (gi, rows) in groups.iter().enumerate() {
                            let inv = 1.0 / rows.len() as f64;
                            for &r in rows {
                                for j in 0..c {
                                    ga[r * c + j] += g[gi * c + j] * inv;
                                }
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    Self::accumulate(&mut grads, nodes, *a, |ga| {
                        ga.iter_mut().for_each(|x| *x += g[0])
                    });
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered parameter collection with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; panics on a duplicate name (a construction bug).
    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index
            .get(name)
            .copied()
            .map(move |i| &mut self.params[i])
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Binds every parameter as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        }
    }

    /// Adds graph gradients of the bound leaves into the parameter grads.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(gr) = g.grad(v) {
                p.grad.data.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Rounds every value to the nearest f32 (the checkpoint precision).
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value
                .data
                .iter_mut()
                .for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

/// Graph variables of a bound [`ParamSet`], indexed like the set.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// |a − n| / max(|a|, |n|, 1e-8)
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central-difference derivative of `f` at every coordinate of `x`.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe)?;
        probe.data[i] = orig - h;
        let down = f(&probe)?;
        probe.data[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn compare_gradients(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GradCheckReport {
        max_rel_err,
        worst_index,
        passed: max_rel_err < tol,
        analytic,
        numeric,
    }
}

/// Compares the analytic gradient of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec);
    let numeric = numeric_gradient(
        |p| {
            let mut g = Graph::new();
            let v = g.constant(p.clone());
            let y = f(&mut g, v)?;
            Ok(g.value(y).item())
        },
        x,
        h,
    )?;
    Ok(compare_gradients(analytic, numeric, tol))
}
