//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape, so the tape order is already a topological
//! order; `backward` walks it once in reverse and accumulates gradients additively.

use crate::error::{Error, Result};
use crate::numcore::rng::counter_uniform;
use crate::numcore::tensor::{
    broadcast_shape, broadcast_strides, for_each_offset, log_softmax_row, reduce_broadcast_into,
    softmax_row, strides,
};
use crate::numcore::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    AddConst { a: Var },
    MulConst { a: Var, c: Tensor<T> },
    Relu { a: Var },
    Gelu { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    ScatterRows { base: Var, src: Var, rows: Vec<usize> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, dlogits: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Keys the counter-based dropout stream. Dropout is active only when a key is installed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    dropout: Option<DropoutKey>,
    dropout_site: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            dropout: None,
            dropout_site: 0,
        }
    }

    pub fn training(key: DropoutKey) -> Self {
        Graph {
            dropout: Some(key),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
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

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            !value.data().iter().any(|v| v.is_nan()),
            "NaN produced by node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient in `backward`.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `a[..., k] x b[k, n]` (or `b[n, k]` transposed when `transpose_b`), flattening leading axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})")));
        }
        let m = self.value(a).numel() / k.max(1);
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, tb: transpose_b }, rg))
    }

    /// Batched `a[..., m, k] x b[..., k, n]` (or `b[..., n, k]` when `transpose_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::BatchMatMul { a, b, tb: transpose_b }, rg))
    }

    fn broadcast_binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let ta = self.value(a);
        let tb = self.value(b);
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))?;
        Ok(broadcast_apply(ta, tb, &shape, f))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product with numpy broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.requires(a);
        self.push(out, Op::Scale { a, s }, rg)
    }

    /// Adds a constant that broadcasts onto `a` (bias tables, additive attention masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let ta = self.value(a);
        if broadcast_shape(ta.shape(), c.shape()).as_deref() != Some(ta.shape()) {
            return Err(Error::shape("add_const", format!("{:?} onto {:?}", c.shape(), ta.shape())));
        }
        let out = broadcast_apply(ta, c, ta.shape(), |x, y| x + y);
        let rg = self.requires(a);
        Ok(self.push(out, Op::AddConst { a }, rg))
    }

    /// Multiplies by a constant that broadcasts onto `a`.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let ta = self.value(a);
        if broadcast_shape(ta.shape(), c.shape()).as_deref() != Some(ta.shape()) {
            return Err(Error::shape("mul_const", format!("{:?} onto {:?}", c.shape(), ta.shape())));
        }
        let out = broadcast_apply(ta, &c, ta.shape(), |x, y| x * y);
        let rg = self.requires(a);
        Ok(self.push(out, Op::MulConst { a, c }, rg))
    }

    /// Inverted dropout with a counter-based mask; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        let Some(key) = self.dropout else {
            return Ok(a);
        };
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout probability {p} must be < 1")));
        }
        let site = self.dropout_site;
        self.dropout_site += 1;
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = self.shape(a).to_vec();
        let mask = Tensor::from_fn(&shape, |i| {
            if counter_uniform(key.seed, site, key.step, i as u64) < p {
                T::zero()
            } else {
                keep
            }
        });
        self.mul_const(a, mask)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.requires(a);
        self.push(out, Op::Relu { a }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_K);
        let half = T::lit(0.5);
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.requires(a);
        self.push(out, Op::Gelu { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.requires(*p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Narrow { a, axis, start }, rg))
    }

    /// Row lookup into a `[rows, d]` table; output shape is `index_shape ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather", format!("table {ts:?}, index shape {index_shape:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", format!("row {bad} out of {rows}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.requires(table);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Copy of `base` (viewed as rows of its last axis) with row `rows[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let bs = self.shape(base).to_vec();
        let ss = self.shape(src).to_vec();
        let d = *bs.last().ok_or_else(|| Error::shape("scatter_rows", "scalar base"))?;
        let nrows = self.value(base).numel() / d.max(1);
        if ss.len() != 2 || ss[1] != d || ss[0] != rows.len() {
            return Err(Error::shape("scatter_rows", format!("src {ss:?} for base {bs:?} with {} rows", rows.len())));
        }
        let mut seen = vec![false; nrows];
        for &r in rows {
            if r >= nrows || std::mem::replace(&mut seen[r], true) {
                return Err(Error::shape("scatter_rows", format!("row {r} invalid or repeated")));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (i, &r) in rows.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&s[i * d..(i + 1) * d]);
        }
        let rg = self.requires(base) || self.requires(src);
        Ok(self.push(Tensor::new(&bs, out)?, Op::ScatterRows { base, src, rows: rows.to_vec() }, rg))
    }

    fn last_axis_rows(&self, a: Var, op: &'static str) -> Result<usize> {
        let s = self.shape(a);
        match s.last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(Error::InvalidArgument(format!("{op} over an empty axis (shape {s:?})"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let w = self.last_axis_rows(a, "softmax")?;
        let src = self.value(a);
        let mut out = vec![T::zero(); src.numel()];
        for (o, x) in out.chunks_mut(w).zip(src.data().chunks(w)) {
            softmax_row(x, o);
        }
        let out = Tensor::new(src.shape(), out)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let w = self.last_axis_rows(a, "log_softmax")?;
        let src = self.value(a);
        let mut out = vec![T::zero(); src.numel()];
        for (o, x) in out.chunks_mut(w).zip(src.data().chunks(w)) {
            log_softmax_row(x, o);
        }
        let out = Tensor::new(src.shape(), out)?;
        let rg = self.requires(a);
        Ok(self.push(out, Op::LogSoftmax { a }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.last_axis_rows(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("gain {:?} for width {d}", self.shape(gamma))));
        }
        let src = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.numel() / d;
        let mut xhat = vec![T::zero(); src.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.numel()];
        let inv_d = T::one() / T::lit(d as f64);
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(src.shape(), out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Mean label-smoothed negative log-likelihood over positions whose label is not `ignore_id`.
    ///
    /// `logits` is `[..., V]`; `labels` has one entry per row. The smoothed target puts
    /// `1 - smoothing` on the label and spreads `smoothing` uniformly over all `V` classes.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64, ignore_id: usize) -> Result<Var> {
        let v = self.last_axis_rows(logits, "cross_entropy")?;
        let src = self.value(logits);
        let rows = src.numel() / v;
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        let count = labels.iter().filter(|&&l| l != ignore_id).count();
        if count == 0 {
            return Err(Error::InvalidArgument("no target positions".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != ignore_id && l >= v) {
            return Err(Error::shape("cross_entropy", format!("label {bad} >= {v}")));
        }
        let eps = T::lit(smoothing);
        let on = T::one() - eps;
        let uniform = eps / T::lit(v as f64);
        let inv_count = T::one() / T::lit(count as f64);
        let mut dlogits = vec![T::zero(); src.numel()];
        let mut logp = vec![T::zero(); v];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label == ignore_id {
                continue;
            }
            let row = &src.data()[r * v..(r + 1) * v];
            log_softmax_row(row, &mut logp);
            let mut nll = -on * logp[label];
            if smoothing != 0.0 {
                nll -= uniform * logp.iter().copied().sum::<T>();
            }
            total += nll;
            let grow = &mut dlogits[r * v..(r + 1) * v];
            for j in 0..v {
                grow[j] = (logp[j].exp() - uniform) * inv_count;
            }
            grow[label] -= on * inv_count;
        }
        let loss = Tensor::scalar(total * inv_count);
        let rg = self.requires(logits);
        Ok(self.push(loss, Op::CrossEntropy { logits, dlogits }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.requires(a);
        Ok(self.push(Tensor::scalar(s / T::lit(n as f64)), Op::Mean { a }, rg))
    }

    /// Gradient of the last `backward` target with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient shape"))
    }

    /// Reverse pass from a scalar node. Gradients of earlier passes are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss of shape {:?} is not scalar", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf<'a>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        let n = nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&mut self, i: usize, gout: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (ta_, tb_) = (val(*a), val(*b));
                let k = *ta_.shape().last().unwrap();
                let n = *node.value.shape().last().unwrap();
                let m = ta_.numel() / k.max(1);
                if let Some(ga) = Self::grad_buf(grads, nodes, *a) {
                    // dA = dC * B'^T
                    let (rs, cs) = if *tb { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, T::one(), gout, n as isize, 1, tb_.data(), rs, cs, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = Self::grad_buf(grads, nodes, *b) {
                    // dB' = A^T * dC
                    let (rsc, csc) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    T::gemm(k, m, n, T::one(), ta_.data(), 1, k as isize, gout, n as isize, 1, T::one(), gb, rsc, csc);
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let (ta_, tb_) = (val(*a), val(*b));
                let r = ta_.rank();
                let (m, k) = (ta_.shape()[r - 2], ta_.shape()[r - 1]);
                let n = node.value.shape()[r - 1];
                let batch = ta_.numel() / (m * k).max(1);
                if let Some(ga) = Self::grad_buf(grads, nodes, *a) {
                    let (rs, cs) = if *tb { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gout[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &tb_.data()[bi * k * n..(bi + 1) * k * n],
                            rs,
                            cs,
                            T::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = Self::grad_buf(grads, nodes, *b) {
                    let (rsc, csc) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    for bi in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &ta_.data()[bi * m * k..(bi + 1) * m * k],
                            1,
                            k as isize,
                            &gout[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            T::one(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            rsc,
                            csc,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                let out_shape = node.value.shape();
                for v in [*a, *b] {
                    let s = val(v).shape().to_vec();
                    if let Some(g) = Self::grad_buf(grads, nodes, v) {
                        reduce_broadcast_into(gout, out_shape, &s, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let out_shape = node.value.shape().to_vec();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !nodes[v.0].requires_grad {
                        continue;
                    }
                    let full = broadcast_apply(val(other), &Tensor::new(&out_shape, gout.to_vec()).unwrap(), &out_shape, |o, g| o * g);
                    let s = val(v).shape().to_vec();
                    let g = Self::grad_buf(grads, nodes, v).unwrap();
                    reduce_broadcast_into(full.data(), &out_shape, &s, g);
                }
            }
            Op::Scale { a, s } => {
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x += *y * *s;
                    }
                }
            }
            Op::AddConst { a } | Op::Reshape { a } => {
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x += *y;
                    }
                }
            }
            Op::MulConst { a, c } => {
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    let shape = node.value.shape().to_vec();
                    let scaled = broadcast_apply(&Tensor::new(&shape, gout.to_vec()).unwrap(), c, &shape, |x, y| x * y);
                    for (x, y) in g.iter_mut().zip(scaled.data()) {
                        *x += *y;
                    }
                }
            }
            Op::Relu { a } => {
                let src = val(*a).data();
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for ((x, y), s) in g.iter_mut().zip(gout).zip(src) {
                        if *s > T::zero() {
                            *x += *y;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let src = val(*a).data();
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_K);
                let half = T::lit(0.5);
                let three_k = T::lit(3.0 * GELU_K);
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for ((gx, gy), &x) in g.iter_mut().zip(gout).zip(src) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three_k * x * x);
                        *gx += *gy * d;
                    }
                }
            }
            Op::Permute { a, perm } => {
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    let in_strides = strides(val(*a).shape());
                    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let mut i = 0;
                    for_each_offset(node.value.shape(), &src_strides, |off| {
                        g[off] += gout[i];
                        i += 1;
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape()[*axis] * inner;
                    if let Some(g) = Self::grad_buf(grads, nodes, *p) {
                        for o in 0..outer {
                            let src = &gout[o * total + offset..o * total + offset + w];
                            for (x, y) in g[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *x += *y;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = val(*a).shape().to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        for (x, y) in g[base..base + len * inner].iter_mut().zip(src) {
                            *x += *y;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = val(*table).shape()[1];
                if let Some(g) = Self::grad_buf(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, y) in g[id * d..(id + 1) * d].iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                            *x += *y;
                        }
                    }
                }
            }
            Op::ScatterRows { base, src, rows } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(g) = Self::grad_buf(grads, nodes, *base) {
                    let mut replaced = vec![false; g.len() / d.max(1)];
                    for &r in rows {
                        replaced[r] = true;
                    }
                    for (r, skip) in replaced.iter().enumerate() {
                        if !skip {
                            for (x, y) in g[r * d..(r + 1) * d].iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                                *x += *y;
                            }
                        }
                    }
                }
                if let Some(g) = Self::grad_buf(grads, nodes, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, y) in g[i * d..(i + 1) * d].iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                            *x += *y;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let w = *node.value.shape().last().unwrap();
                let y = node.value.data();
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for ((gr, yr), dr) in g.chunks_mut(w).zip(y.chunks(w)).zip(gout.chunks(w)) {
                        let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for j in 0..w {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let w = *node.value.shape().last().unwrap();
                let y = node.value.data();
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for ((gr, yr), dr) in g.chunks_mut(w).zip(y.chunks(w)).zip(gout.chunks(w)) {
                        let total: T = dr.iter().copied().sum();
                        for j in 0..w {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                if let Some(gg) = Self::grad_buf(grads, nodes, *gamma) {
                    for (hr, dr) in xhat.chunks(d).zip(gout.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = Self::grad_buf(grads, nodes, *beta) {
                    for dr in gout.chunks(d) {
                        for j in 0..d {
                            gb[j] += dr[j];
                        }
                    }
                }
                if let Some(gx) = Self::grad_buf(grads, nodes, *x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((gr, hr), dr)) in gx.chunks_mut(d).zip(xhat.chunks(d)).zip(gout.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = dr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        for j in 0..d {
                            gr[j] += rstd[r] * (dxhat[j] - inv_d * s1 - hr[j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, dlogits } => {
                let up = gout[0];
                if let Some(g) = Self::grad_buf(grads, nodes, *logits) {
                    for (x, y) in g.iter_mut().zip(dlogits) {
                        *x += *y * up;
                    }
                }
            }
            Op::Sum { a } => {
                let up = gout[0];
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for x in g.iter_mut() {
                        *x += up;
                    }
                }
            }
            Op::Mean { a } => {
                let n = val(*a).numel();
                let up = gout[0] / T::lit(n as f64);
                if let Some(g) = Self::grad_buf(grads, nodes, *a) {
                    for x in g.iter_mut() {
                        *x += up;
                    }
                }
            }
        }
    }
}

/// Elementwise `f(a, b)` over the broadcast `shape`.
fn broadcast_apply<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, shape: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    let out: Vec<T> = if a.shape() == shape && b.shape() == shape {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if a.shape() == shape && shape.ends_with(b.shape()) {
        let m = bd.len().max(1);
        ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % m])).collect()
    } else if b.shape() == shape && shape.ends_with(a.shape()) {
        let m = ad.len().max(1);
        bd.iter().enumerate().map(|(i, &y)| f(ad[i % m], y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), shape);
        let sb = broadcast_strides(b.shape(), shape);
        let mut offs_a = Vec::with_capacity(n);
        for_each_offset(shape, &sa, |o| offs_a.push(o));
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        for_each_offset(shape, &sb, |o| {
            out.push(f(ad[offs_a[i]], bd[o]));
            i += 1;
        });
        out
    };
    Tensor::new(shape, out).expect("broadcast shape")
}
