//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] is an arena of nodes created in evaluation order, so the tape
//! is a DAG by construction and backward is a single reverse sweep. Every op
//! stores just enough to recompute its local derivative; intermediate
//! gradients are freed as soon as they have been propagated.
//!
//! Gradients are written into parameters by [`Graph::backward_into`], which
//! *adds* to whatever is already stored. Callers zero gradients before each
//! backward pass (`ParamStore::zero_grad`).

use std::collections::HashMap;
use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::tensor::{numel, strides};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, f64),
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Mask { x: Var, mask: Arc<[bool]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Silu(..) => "silu",
            Op::Embedding { .. } => "embedding",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Mask { .. } => "mask",
        }
    }
}

/// Names of every recorded primitive, as reported by gradient checks.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "matmul",
    "reshape",
    "permute",
    "softmax",
    "layer_norm",
    "silu",
    "embedding",
    "sum",
    "mean",
    "sum_axis",
    "cross_entropy",
    "concat",
    "narrow",
    "gather_rows",
    "scatter_rows",
    "mask",
];

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_cache: HashMap<ParamId, Var>,
    fault: Option<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of the named primitive (scales its
    /// incoming gradient by 1.5). Used to prove gradient checks catch bugs.
    pub fn inject_fault(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        t.check_finite("graph input")?;
        let mut t = t;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let src = store.get(id);
        let value = Tensor::new(src.shape().to_vec(), src.data().to_vec())
            .expect("stored parameter is well formed");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: src.requires_grad,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, [Var; 2])> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(numel(&out_shape));
        if sa == sb {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else {
            let (ta, tb) = (
                broadcast_strides(&sa, &out_shape),
                broadcast_strides(&sb, &out_shape),
            );
            for_each_broadcast(&out_shape, &ta, &tb, |_, ia, ib| {
                out.push(f(da[ia], db[ib]))
            });
        }
        Ok((Tensor::new(out_shape, out)?, [a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, p) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &p))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, p) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &p))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, p) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &p))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, p) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &p))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let k = T::lit(s);
        let data = self.data(x).iter().map(|&v| v * k).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Scale(x, s), &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let k = T::lit(s);
        let data = self.data(x).iter().map(|&v| v + k).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddScalar(x), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Silu(x), &[x]))
    }

    // ---------------------------------------------------------------- matmul

    /// Batched matrix product `op(a) @ op(b)` where `op` optionally transposes
    /// the last two axes. `b` is either rank 2 (shared across the batch) or
    /// has the same leading batch axes as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b), ta, tb)?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        plan.forward(self.data(a), self.data(b), &mut out);
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x @ w^T` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!(
                    "axes {axes:?} are not a permutation of rank {}",
                    shape.len()
                ),
            ));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len());
        for_each_strided(&out_shape, &perm_strides, |_, i| out.push(src[i]));
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::invalid(
                "transpose",
                format!("axes ({a}, {b}) out of range for rank {}", axes.len()),
            ));
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for rank {}", base.len()),
            ));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} invalid for shape {shape:?}",
                    start + len
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Splits `x` into `parts` equal chunks along `axis`.
    pub fn chunk(&mut self, x: Var, parts: usize, axis: usize) -> Result<Vec<Var>> {
        let d = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("chunk", "axis out of range"))?;
        if parts == 0 || d % parts != 0 {
            return Err(Error::invalid(
                "chunk",
                format!("cannot split extent {d} into {parts} parts"),
            ));
        }
        let step = d / parts;
        (0..parts)
            .map(|i| self.narrow(x, axis, i * step, step))
            .collect()
    }

    /// Rows `idx` of `x` viewed as `[rows, ...]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row: usize = shape[1..].iter().product();
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {} rows", shape[0]),
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Inverse of [`Graph::gather_rows`]: row `j` of `x` is added into row
    /// `idx[j]` of a zero tensor with `n_rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if idx.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::invalid(
                "scatter_rows",
                format!("row {bad} out of range for {n_rows} rows"),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); n_rows * row];
        for (j, &i) in idx.iter().enumerate() {
            for (o, s) in out[i * row..(i + 1) * row]
                .iter_mut()
                .zip(&src[j * row..(j + 1) * row])
            {
                *o = *o + *s;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = n_rows;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    // ---------------------------------------------------------------- nn

    /// Softmax over the last axis. `-inf` entries get probability exactly 0.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if !max.is_finite() {
                return Err(Error::NonFinite {
                    context: "softmax: row is fully masked or non-finite".into(),
                });
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let (mean, rstd) = moments(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::LayerNorm(x, eps), &[x]))
    }

    /// Rows of `table` selected by `ids`; output shape is `ids_shape + [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid(
                "embedding",
                format!("table must be rank 2, got {ts:?}"),
            ));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::invalid(
                "embedding",
                format!("{} ids do not fill shape {ids_shape:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::invalid(
                "embedding",
                format!("token id {bad} out of range for vocabulary of {}", ts[0]),
            ));
        }
        let d = ts[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sets entries where the broadcast `mask` is true to `-inf`.
    /// `mask` covers the trailing axes of `x` and repeats over leading ones.
    pub fn mask_fill_neg_inf(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        let n = self.value(x).numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(Error::invalid(
                "mask",
                format!("mask of {} does not tile {n} values", mask.len()),
            ));
        }
        let m = mask.len();
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % m] { T::neg_infinity() } else { v })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::Mask { x, mask }, &[x]))
    }

    /// Mean next-token cross-entropy; `logits` is `[..., vocab]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap();
        let rows = numel(&shape) / v;
        if rows != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {bad} out of range for {v} classes"),
            ));
        }
        let src = self.data(logits);
        let mut total = 0.0f64;
        for (row, &t) in src.chunks(v).zip(targets) {
            total += log_sum_exp(row).as_f64() - row[t].as_f64();
        }
        let loss = total / rows as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "cross_entropy".into(),
            });
        }
        let t = Tensor::scalar(T::lit(loss));
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Sum over one axis; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let base = (o * d + k) * inner;
                for (acc, &v) in out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&src[base..base + inner])
                {
                    *acc = *acc + v;
                }
            }
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let d = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, 1.0 / d as f64)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let m = self.mean(sq)?;
        if !self.data(m)[0].is_finite() {
            return Err(Error::NonFinite {
                context: "mse".into(),
            });
        }
        Ok(m)
    }

    /// Scaled dot-product attention on `[batch, seq, dim]` tensors.
    /// `mask` (true = blocked) has shape `[q_len, k_len]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let d = *self.shape(q).last().unwrap();
        let scores = self.matmul_t(q, k, false, true)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let scores = match mask {
            Some(m) => self.mask_fill_neg_inf(scores, m)?,
            None => scores,
        };
        let p = self.softmax(scores)?;
        self.matmul(p, v)
    }

    // ---------------------------------------------------------------- backward

    /// Gradients of scalar `loss` with respect to all leaves.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault.as_deref() == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v = *v * T::lit(1.5));
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    /// Runs backward and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, store);
        Ok(())
    }

    pub fn accumulate_into(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads.get(i).and_then(|g| g.as_ref())) {
                let p = store.get_mut(id);
                if p.requires_grad {
                    p.accumulate_grad(g);
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = self.nodes[i].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.reduce_broadcast(a, out_shape, g, grads, |_, _| T::one());
                self.reduce_broadcast(b, out_shape, g, grads, |_, _| T::one());
            }
            &Op::Sub(a, b) => {
                self.reduce_broadcast(a, out_shape, g, grads, |_, _| T::one());
                self.reduce_broadcast(b, out_shape, g, grads, |_, _| -T::one());
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                self.binary_grad(a, b, out_shape, g, grads, |_, yb| yb, |xa, _| xa, da, db);
            }
            &Op::Div(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                self.binary_grad(
                    a,
                    b,
                    out_shape,
                    g,
                    grads,
                    |_, yb| T::one() / yb,
                    |xa, yb| -xa / (yb * yb),
                    da,
                    db,
                );
            }
            &Op::Scale(x, s) => {
                let k = T::lit(s);
                accumulate(grads, x, g.len(), |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * k)
                });
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                accumulate(grads, x, g.len(), |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv)
                });
            }
            &Op::MatMul { a, b, ta, tb } => {
                let plan = MatMulPlan::new(self.shape(a), self.shape(b), ta, tb)
                    .expect("validated in forward");
                if self.wants(a) {
                    let bd = self.data(b);
                    accumulate(grads, a, self.value(a).numel(), |da| plan.grad_a(g, bd, da));
                }
                if self.wants(b) {
                    let ad = self.data(a);
                    accumulate(grads, b, self.value(b).numel(), |db| plan.grad_b(g, ad, db));
                }
            }
            Op::Permute(x, axes) => {
                let x = *x;
                let in_shape = self.shape(x);
                let in_strides = strides(in_shape);
                let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                accumulate(grads, x, g.len(), |dx| {
                    for_each_strided(out_shape, &perm_strides, |o, idx| dx[idx] = dx[idx] + g[o]);
                });
            }
            &Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let n = *out_shape.last().unwrap();
                accumulate(grads, x, g.len(), |dx| {
                    for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                });
            }
            &Op::LayerNorm(x, eps) => {
                let xd = self.data(x);
                let y = self.nodes[i].value.data();
                let n = *out_shape.last().unwrap();
                let nf = T::lit(n as f64);
                accumulate(grads, x, g.len(), |dx| {
                    for (((dxr, xr), yr), gr) in dx
                        .chunks_mut(n)
                        .zip(xd.chunks(n))
                        .zip(y.chunks(n))
                        .zip(g.chunks(n))
                    {
                        let (_, rstd) = moments(xr, eps);
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((d, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + rstd * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            &Op::Silu(x) => {
                let xd = self.data(x);
                accumulate(grads, x, g.len(), |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(g) {
                        let s = sigmoid(xv);
                        *d = *d + gv * s * (T::one() + xv * (T::one() - s));
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let dim = self.shape(table)[1];
                accumulate(grads, table, self.value(table).numel(), |dt| {
                    for (j, &id) in ids.iter().enumerate() {
                        for (d, &gv) in dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[j * dim..(j + 1) * dim])
                        {
                            *d = *d + gv;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                accumulate(grads, x, n, |dx| dx.iter_mut().for_each(|d| *d = *d + g[0]));
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                let gv = g[0] / T::lit(n as f64);
                accumulate(grads, x, n, |dx| dx.iter_mut().for_each(|d| *d = *d + gv));
            }
            &Op::SumAxis { x, axis } => {
                let shape = self.shape(x);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let d = shape[axis];
                accumulate(grads, x, numel(shape), |dx| {
                    for o in 0..outer {
                        for k in 0..d {
                            let base = (o * d + k) * inner;
                            for (dv, &gv) in dx[base..base + inner]
                                .iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                            {
                                *dv = *dv + gv;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let src = self.data(logits);
                let v = *self.shape(logits).last().unwrap();
                let scale = g[0] / T::lit(targets.len() as f64);
                accumulate(grads, logits, src.len(), |dl| {
                    for ((dr, row), &t) in dl.chunks_mut(v).zip(src.chunks(v)).zip(targets) {
                        let lse = log_sum_exp(row);
                        for (j, (d, &z)) in dr.iter_mut().zip(row).enumerate() {
                            let p = (z - lse).exp();
                            let y = if j == t { T::one() } else { T::zero() };
                            *d = *d + scale * (p - y);
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[axis] * inner;
                    if self.wants(x) {
                        accumulate(grads, x, outer * len, |dx| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + len];
                                for (d, &gv) in dx[o * len..(o + 1) * len].iter_mut().zip(src) {
                                    *d = *d + gv;
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let shape = self.shape(x);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out_shape[axis] * inner;
                let full = shape[axis] * inner;
                accumulate(grads, x, numel(shape), |dx| {
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        for (d, &gv) in dx[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                        {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let shape = self.shape(x);
                let row: usize = shape[1..].iter().product();
                accumulate(grads, x, numel(shape), |dx| {
                    for (j, &r) in idx.iter().enumerate() {
                        for (d, &gv) in dx[r * row..(r + 1) * row]
                            .iter_mut()
                            .zip(&g[j * row..(j + 1) * row])
                        {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let x = *x;
                let shape = self.shape(x);
                let row: usize = shape[1..].iter().product();
                accumulate(grads, x, numel(shape), |dx| {
                    for (j, &r) in idx.iter().enumerate() {
                        for (d, &gv) in dx[j * row..(j + 1) * row]
                            .iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                        {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Mask { x, mask } => {
                let m = mask.len();
                accumulate(grads, *x, g.len(), |dx| {
                    for (j, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        if !mask[j % m] {
                            *d = *d + gv;
                        }
                    }
                });
            }
        }
    }

    fn reduce_broadcast(
        &self,
        x: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        f: impl Fn(usize, usize) -> T,
    ) {
        if !self.wants(x) {
            return;
        }
        let xs = self.shape(x);
        accumulate(grads, x, numel(xs), |dx| {
            if xs == out_shape {
                for (o, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                    *d = *d + gv * f(o, o);
                }
            } else {
                let st = broadcast_strides(xs, out_shape);
                for_each_strided(out_shape, &st, |o, ix| dx[ix] = dx[ix] + g[o] * f(o, ix));
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_grad(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        dfa: impl Fn(T, T) -> T,
        dfb: impl Fn(T, T) -> T,
        da: &[T],
        db: &[T],
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (ta, tb) = (
            broadcast_strides(sa, out_shape),
            broadcast_strides(sb, out_shape),
        );
        let same = sa == sb;
        if self.wants(a) {
            accumulate(grads, a, da.len(), |dx| {
                if same {
                    for o in 0..g.len() {
                        dx[o] = dx[o] + g[o] * dfa(da[o], db[o]);
                    }
                } else {
                    for_each_broadcast(out_shape, &ta, &tb, |o, ia, ib| {
                        dx[ia] = dx[ia] + g[o] * dfa(da[ia], db[ib])
                    });
                }
            });
        }
        if self.wants(b) {
            accumulate(grads, b, db.len(), |dx| {
                if same {
                    for o in 0..g.len() {
                        dx[o] = dx[o] + g[o] * dfb(da[o], db[o]);
                    }
                } else {
                    for_each_broadcast(out_shape, &ta, &tb, |o, ia, ib| {
                        dx[ib] = dx[ib] + g[o] * dfb(da[ia], db[ib])
                    });
                }
            });
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize, f: impl FnOnce(&mut [T])) {
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![T::zero(); n]);
    f(buf);
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Returns `(mean, 1/sqrt(variance + eps))` of a row.
fn moments<T: Real>(row: &[T], eps: f64) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::lit(eps)).sqrt())
}

// -------------------------------------------------------------------- broadcasting

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` expressed over `out` axes; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Merges adjacent axes that are contiguous under every stride set and drops
/// unit axes, so iteration runs over as few and as long rows as possible.
fn coalesce(shape: &[usize], sts: &[&[usize]]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut out_shape: Vec<usize> = Vec::with_capacity(shape.len());
    let mut out_st: Vec<Vec<usize>> = vec![Vec::with_capacity(shape.len()); sts.len()];
    for d in 0..shape.len() {
        if shape[d] == 1 {
            continue;
        }
        let mergeable = !out_shape.is_empty()
            && sts
                .iter()
                .enumerate()
                .all(|(k, st)| *out_st[k].last().unwrap() == st[d] * shape[d]);
        if mergeable {
            *out_shape.last_mut().unwrap() *= shape[d];
            for (k, st) in sts.iter().enumerate() {
                *out_st[k].last_mut().unwrap() = st[d];
            }
        } else {
            out_shape.push(shape[d]);
            for (k, st) in sts.iter().enumerate() {
                out_st[k].push(st[d]);
            }
        }
    }
    if out_shape.is_empty() {
        out_shape.push(1);
        out_st.iter_mut().for_each(|s| s.push(0));
    }
    (out_shape, out_st)
}

/// Visits every index of `shape` in row-major order together with the
/// corresponding offset under `st`.
fn for_each_strided(shape: &[usize], st: &[usize], mut f: impl FnMut(usize, usize)) {
    if numel(shape) == 0 {
        return;
    }
    let (shape, st) = coalesce(shape, &[st]);
    let st = &st[0];
    let rank = shape.len();
    let (inner, si) = (shape[rank - 1], st[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    let mut o = 0usize;
    loop {
        let mut p = off;
        for _ in 0..inner {
            f(o, p);
            o += 1;
            p += si;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += st[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= st[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn for_each_broadcast(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if numel(shape) == 0 {
        return;
    }
    let (shape, st) = coalesce(shape, &[sa, sb]);
    let (sa, sb) = (&st[0], &st[1]);
    let rank = shape.len();
    let (inner, ai, bi) = (shape[rank - 1], sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0usize;
    loop {
        let (mut pa, mut pb) = (ia, ib);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ai;
            pb += bi;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

// -------------------------------------------------------------------- matmul

/// A strided matrix inside a flat buffer.
#[derive(Debug, Clone, Copy)]
struct View {
    off: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn dense(off: usize, rows: usize, cols: usize) -> Self {
        View {
            off,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        View {
            off: self.off,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn t_if(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }

    /// Largest flat index touched, for bounds checks.
    fn last(&self) -> usize {
        self.off + (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// Below this many multiply-adds, packing for the blocked kernel costs more
/// than the product itself.
const SMALL_GEMM: usize = 4096;

fn small_gemm<T: Real>(a: &[T], va: View, b: &[T], vb: View, beta: T, c: &mut [T], vc: View) {
    let (rsa, csa, rsb, csb) = (
        va.rs as usize,
        va.cs as usize,
        vb.rs as usize,
        vb.cs as usize,
    );
    for i in 0..vc.rows {
        for j in 0..vc.cols {
            let mut acc = T::zero();
            for p in 0..va.cols {
                acc = acc + a[va.off + i * rsa + p * csa] * b[vb.off + p * rsb + j * csb];
            }
            let ci = vc.off + i * vc.rs as usize + j * vc.cs as usize;
            c[ci] = if beta == T::zero() {
                acc
            } else {
                acc + beta * c[ci]
            };
        }
    }
}

/// `c[vc] = a[va] @ b[vb] + beta * c[vc]`.
fn gemm<T: Real>(a: &[T], va: View, b: &[T], vb: View, beta: T, c: &mut [T], vc: View) {
    assert!(
        va.rows == vc.rows && va.cols == vb.rows && vb.cols == vc.cols,
        "gemm view extents"
    );
    assert!(
        va.last() < a.len() && vb.last() < b.len() && vc.last() < c.len(),
        "gemm view bounds"
    );
    if va.rows * va.cols * vb.cols <= SMALL_GEMM {
        return small_gemm(a, va, b, vb, beta, c, vc);
    }
    // SAFETY: extents and bounds checked above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            va.rows,
            va.cols,
            vb.cols,
            T::one(),
            a.as_ptr().add(va.off),
            va.rs,
            va.cs,
            b.as_ptr().add(vb.off),
            vb.rs,
            vb.cs,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs,
            vc.cs,
        );
    }
}

struct MatMulPlan {
    batch: usize,
    /// Stored (rows, cols) of one `a` / `b` matrix.
    a_dims: (usize, usize),
    b_dims: (usize, usize),
    m: usize,
    n: usize,
    shared_b: bool,
    ta: bool,
    tb: bool,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::invalid(
                "matmul",
                format!("operands must be at least rank 2, got {a:?} and {b:?}"),
            ));
        }
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        let a_batch = &a[..a.len() - 2];
        let shared_b = b.len() == 2;
        if ka != kb || (!shared_b && &b[..b.len() - 2] != a_batch) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        let mut plan = MatMulPlan {
            batch: a_batch.iter().product(),
            a_dims: (ar, ac),
            b_dims: (br, bc),
            m,
            n,
            shared_b,
            ta,
            tb,
            out_shape,
        };
        // Fold the batch into rows when the weight is shared.
        if shared_b && !ta && plan.batch > 1 {
            plan.m *= plan.batch;
            plan.a_dims.0 *= plan.batch;
            plan.batch = 1;
        }
        Ok(plan)
    }

    fn views(&self, i: usize) -> (View, View, View) {
        let (ar, ac) = self.a_dims;
        let (br, bc) = self.b_dims;
        let va = View::dense(i * ar * ac, ar, ac);
        let vb = View::dense(if self.shared_b { 0 } else { i * br * bc }, br, bc);
        let vc = View::dense(i * self.m * self.n, self.m, self.n);
        (va, vb, vc)
    }

    fn forward<T: Real>(&self, a: &[T], b: &[T], c: &mut [T]) {
        for i in 0..self.batch {
            let (va, vb, vc) = self.views(i);
            gemm(a, va.t_if(self.ta), b, vb.t_if(self.tb), T::zero(), c, vc);
        }
    }

    /// d op(A) = dC @ op(B)^T, written through the (possibly transposed) view of dA.
    fn grad_a<T: Real>(&self, dc: &[T], b: &[T], da: &mut [T]) {
        for i in 0..self.batch {
            let (va, vb, vc) = self.views(i);
            gemm(
                dc,
                vc,
                b,
                vb.t_if(self.tb).t(),
                T::one(),
                da,
                va.t_if(self.ta),
            );
        }
    }

    /// d op(B) = op(A)^T @ dC.
    fn grad_b<T: Real>(&self, dc: &[T], a: &[T], db: &mut [T]) {
        for i in 0..self.batch {
            let (va, vb, vc) = self.views(i);
            gemm(
                a,
                va.t_if(self.ta).t(),
                dc,
                vc,
                T::one(),
                db,
                vb.t_if(self.tb),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_ln3() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[3f64.ln(), 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert!((g.data(y)[0] - 0.75).abs() < 1e-15);
        assert!((g.data(y)[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4], &[3.0; 4])).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0; 4]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[3], &[1.0, -2.0, 5.0]), true);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let s = g.sum(x).unwrap();
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[2], &[1.0, 2.0]), true);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_deref(), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn backward_on_non_scalar_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.input(Tensor::zeros(vec![4, 5])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"),
            "{err}"
        );
    }

    #[test]
    fn matmul_transposes_agree() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.input(t(&[3, 2], &[1., 0., 0., 1., 1., 1.])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[4., 5., 10., 11.]);
        let bt = g.transpose(b, 0, 1).unwrap();
        let c2 = g.matmul_t(a, bt, false, true).unwrap();
        assert_eq!(g.data(c2), g.data(c));
        let at = g.transpose(a, 0, 1).unwrap();
        let c3 = g.matmul_t(at, b, true, false).unwrap();
        assert_eq!(g.data(c3), g.data(c));
    }

    #[test]
    fn small_and_blocked_gemm_agree() {
        let n = 20;
        assert!(n * n * n > SMALL_GEMM);
        let a: Vec<f64> = (0..n * n).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..n * n).map(|i| ((i * 5) % 11) as f64 * 0.5).collect();
        let (va, vb) = (View::dense(0, n, n).t(), View::dense(0, n, n));
        let mut blocked = vec![1.0; n * n];
        let mut small = blocked.clone();
        gemm(&a, va, &b, vb, 1.0, &mut blocked, View::dense(0, n, n));
        small_gemm(&a, va, &b, vb, 1.0, &mut small, View::dense(0, n, n));
        assert_eq!(small, blocked);

        // beta = 0 ignores whatever was in `c`.
        let mut c = vec![f64::NAN; 4];
        gemm(
            &[1., 2., 3., 4.],
            View::dense(0, 2, 2),
            &[1., 0., 0., 1.],
            View::dense(0, 2, 2),
            0.0,
            &mut c,
            View::dense(0, 2, 2),
        );
        assert_eq!(c, [1., 2., 3., 4.]);
    }

    #[test]
    fn broadcast_add_over_middle_axis() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3, 2])).unwrap();
        let b = g.input(t(&[2, 1, 2], &[1., 2., 3., 4.])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::<f64>::new();
        let tab = g.input(Tensor::zeros(vec![4, 2])).unwrap();
        assert!(g.embedding(tab, &[0, 4], &[2]).is_err());
    }

    #[test]
    fn masked_softmax_gives_exact_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let mask: Arc<[bool]> = Arc::from(vec![false, true, false, false]);
        let m = g.mask_fill_neg_inf(x, mask).unwrap();
        let p = g.softmax(m).unwrap();
        assert_eq!(g.data(p)[0], 1.0);
        assert_eq!(g.data(p)[1], 0.0);
    }

    #[test]
    fn unused_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", t(&[1], &[2.0]), true);
        let unused = store.add("unused", t(&[1], &[3.0]), true);
        store.zero_grad();
        let mut g = Graph::new();
        let x = g.param(&store, used);
        let _ = g.param(&store, unused);
        let s = g.sum(x).unwrap();
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(unused).grad.as_deref(), Some(&[0.0][..]));
    }
}
