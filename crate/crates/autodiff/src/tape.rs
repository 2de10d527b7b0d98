//! Linear Wengert tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value. Nodes only refer to
//! earlier nodes, so the tape is topologically ordered by construction and
//! `backward` is a single reverse sweep. Leaf nodes created with
//! `requires_grad` keep an accumulating gradient buffer; it is summed into
//! across repeated `backward` calls until `zero_grad`.

use crate::error::{Result, TensorError};
use crate::tensor::{strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied to probabilities inside [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Epsilon added to the variance inside [`Tape::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `src[i]` is the input offset feeding output offset `i`.
    Gather {
        x: Var,
        src: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    RepeatLeading(Var),
    L2NormLast(Var),
    Bce {
        p: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dim_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        msg: msg.into(),
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / last.max(1);
    (rows, last)
}

fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn matmul_bt_acc(out: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_at_acc(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked and accumulated.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.detached();
        value.set_requires_grad(true);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = if t.requires_grad() { t.detached() } else { t };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of a node's value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detached();
        self.constant(t)
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same_shape("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` where the bias shape is a trailing suffix of the x shape.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (xs, bs) = (tx.shape(), tb.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err("add_bias", xs, bs));
        }
        let bn = tb.numel();
        let data = tx
            .data()
            .chunks(bn)
            .flat_map(|c| c.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * c).collect(),
        )?;
        Ok(self.push(t, Op::Scale(x, c), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v + c).collect(),
        )?;
        Ok(self.push(t, Op::AddScalar(x), &[x]))
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched matrix product of `[g,m,k]` and `[g,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            matmul_into(
                &mut out[i * m * n..(i + 1) * m * n],
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, g, m, k, n }, &[a, b]))
    }

    /// Axis permutation; `axes[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(dim_err(
                "permute",
                format!("{axes:?} is not a permutation of shape {shape:?}"),
            ));
        }
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut src = Vec::with_capacity(tx.numel());
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..tx.numel() {
            src.push(
                idx.iter()
                    .zip(axes)
                    .map(|(&i, &a)| i * in_strides[a])
                    .sum::<usize>(),
            );
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let data = src.iter().map(|&s| tx.data()[s]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Gather { x, src }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.detached().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Contiguous range `[start, start+len)` of one axis.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err(
                "slice",
                format!(
                    "[{start}, {}) on axis {axis} of shape {shape:?}",
                    start + len
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in start..start + len {
                let base = (o * shape[axis] + i) * inner;
                src.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let data = src.iter().map(|&s| tx.data()[s]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Gather { x, src }, &[x]))
    }

    /// Rows of axis 0 selected (with repetition allowed) by index.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if shape.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(dim_err(
                "select_rows",
                format!("rows {rows:?} from shape {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&tx.data()[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", format!("axis {axis} of shape {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn repeat_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(dim_err("repeat", "zero copies"));
        }
        let tx = &self.nodes[x.0].value;
        let mut shape = vec![n];
        shape.extend_from_slice(tx.shape());
        let data = tx.data().repeat(n);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::RepeatLeading(x), &[x]))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() == 0 {
            return Err(dim_err("softmax", "scalar input"));
        }
        if !tx.all_finite() {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let (_, last) = split_last(tx.shape());
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut sum = 0.0;
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e /= sum);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shaped like the last axis).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (tg, tb) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if tx.rank() == 0 {
            return Err(dim_err("layernorm", "zero-length normalization axis"));
        }
        let (_, d) = split_last(tx.shape());
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(shape_err("layernorm", tx.shape(), tg.shape()));
        }
        let mut data = Vec::with_capacity(tx.numel());
        let mut rstds = Vec::with_capacity(tx.numel() / d);
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstds.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * rstd * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| f(*v)).collect(),
        )?;
        Ok(self.push(t, op, &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Mean over axis 0.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if shape.is_empty() {
            return Err(dim_err("mean_axis0", "scalar input"));
        }
        let n = shape[0];
        let inner = tx.numel() / n;
        let mut out = vec![0.0; inner];
        for row in tx.data().chunks(inner) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let t = Tensor::new(shape[1..].to_vec(), out)?;
        Ok(self.push(t, Op::MeanAxis0(x), &[x]))
    }

    /// Euclidean norm of each last-axis slice; the last axis is removed.
    pub fn l2_norm_last(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() == 0 {
            return Err(dim_err("l2_norm", "scalar input"));
        }
        let (_, last) = split_last(tx.shape());
        let data = tx
            .data()
            .chunks(last)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::new(tx.shape()[..tx.rank() - 1].to_vec(), data)?;
        Ok(self.push(t, Op::L2NormLast(x), &[x]))
    }

    /// Affine map over the last axis: `x[.., in] @ w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (rows, inp) = split_last(&xs);
        let flat = self.reshape(x, &[rows, inp])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Mean binary cross-entropy of probabilities against {0,1} targets.
    /// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let tp = &self.nodes[p.0].value;
        if tp.numel() != target.len() {
            return Err(shape_err("bce", tp.shape(), &[target.len()]));
        }
        if let Some(&bad) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::Label { value: bad });
        }
        if !tp.all_finite() {
            return Err(TensorError::Numeric { op: "bce" });
        }
        let n = target.len() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            &[p],
        ))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    acc(*a, &mut |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, d)| *x += d)
                    });
                    acc(*b, &mut |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, d)| *x += d)
                    });
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, d)| *x += d)
                    });
                    acc(*b, &mut |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, d)| *x -= d)
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |ga| {
                        for ((x, d), y) in ga.iter_mut().zip(&g).zip(vb) {
                            *x += d * y;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((x, d), y) in gb.iter_mut().zip(&g).zip(va) {
                            *x += d * y;
                        }
                    });
                }
                Op::AddBias(x, b) => {
                    acc(*x, &mut |gx| {
                        gx.iter_mut().zip(&g).for_each(|(x, d)| *x += d)
                    });
                    acc(*b, &mut |gb| {
                        let n = gb.len();
                        for chunk in g.chunks(n) {
                            gb.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                        }
                    });
                }
                Op::Scale(x, c) => {
                    acc(*x, &mut |gx| {
                        gx.iter_mut().zip(&g).for_each(|(x, d)| *x += c * d)
                    });
                }
                Op::AddScalar(x) | Op::Reshape(x) | Op::Sum(x) | Op::Mean(x) => {
                    let scale = match &node.op {
                        Op::Mean(x) => 1.0 / nodes[x.0].value.numel() as f64,
                        _ => 1.0,
                    };
                    let broadcast = matches!(node.op, Op::Sum(_) | Op::Mean(_));
                    acc(*x, &mut |gx| {
                        if broadcast {
                            gx.iter_mut().for_each(|x| *x += g[0] * scale);
                        } else {
                            gx.iter_mut().zip(&g).for_each(|(x, d)| *x += d);
                        }
                    });
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |ga| matmul_bt_acc(ga, &g, vb, *m, *k, *n));
                    acc(*b, &mut |gb| matmul_at_acc(gb, va, &g, *m, *k, *n));
                }
                Op::BatchMatMul {
                    a,
                    b,
                    g: groups,
                    m,
                    k,
                    n,
                } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (mk, kn, mn) = (m * k, k * n, m * n);
                    acc(*a, &mut |ga| {
                        for i in 0..*groups {
                            matmul_bt_acc(
                                &mut ga[i * mk..(i + 1) * mk],
                                &g[i * mn..(i + 1) * mn],
                                &vb[i * kn..(i + 1) * kn],
                                *m,
                                *k,
                                *n,
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..*groups {
                            matmul_at_acc(
                                &mut gb[i * kn..(i + 1) * kn],
                                &va[i * mk..(i + 1) * mk],
                                &g[i * mn..(i + 1) * mn],
                                *m,
                                *k,
                                *n,
                            );
                        }
                    });
                }
                Op::Gather { x, src } => {
                    acc(*x, &mut |gx| {
                        for (&s, d) in src.iter().zip(&g) {
                            gx[s] += d;
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let (_, last) = split_last(node.value.shape());
                    acc(*x, &mut |gx| {
                        for ((gxr, yr), gr) in
                            gx.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last))
                        {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, yv), gv) in gxr.iter_mut().zip(yr).zip(gr) {
                                *o += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    rstd,
                } => {
                    let vx = val(*x);
                    let vg = val(*gain);
                    let d = vg.len();
                    let xhat: Vec<f64> = vx
                        .chunks(d)
                        .zip(rstd)
                        .flat_map(|(row, r)| {
                            let mean = row.iter().sum::<f64>() / d as f64;
                            row.iter().map(move |v| (v - mean) * r)
                        })
                        .collect();
                    acc(*gain, &mut |gg| {
                        for (xh, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * xh[j];
                            }
                        }
                    });
                    acc(*bias, &mut |gb| {
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
                        }
                    });
                    acc(*x, &mut |gx| {
                        for (((gxr, xh), gr), r) in gx
                            .chunks_mut(d)
                            .zip(xhat.chunks(d))
                            .zip(g.chunks(d))
                            .zip(rstd)
                        {
                            let gxh: Vec<f64> = gr.iter().zip(vg).map(|(a, b)| a * b).collect();
                            let m1 = gxh.iter().sum::<f64>() / d as f64;
                            let m2 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gxr[j] += r * (gxh[j] - m1 - xh[j] * m2);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let vx = val(*x);
                    acc(*x, &mut |gx| {
                        for ((o, d), v) in gx.iter_mut().zip(&g).zip(vx) {
                            *o += d * gelu_grad(*v);
                        }
                    });
                }
                Op::Relu(x) => {
                    let vx = val(*x);
                    acc(*x, &mut |gx| {
                        for ((o, d), v) in gx.iter_mut().zip(&g).zip(vx) {
                            if *v > 0.0 {
                                *o += d;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |gx| {
                        for ((o, d), s) in gx.iter_mut().zip(&g).zip(y) {
                            *o += d * s * (1.0 - s);
                        }
                    });
                }
                Op::Abs(x) => {
                    let vx = val(*x);
                    acc(*x, &mut |gx| {
                        for ((o, d), v) in gx.iter_mut().zip(&g).zip(vx) {
                            if *v > 0.0 {
                                *o += d;
                            } else if *v < 0.0 {
                                *o -= d;
                            }
                        }
                    });
                }
                Op::MeanAxis0(x) => {
                    let n = nodes[x.0].value.shape()[0] as f64;
                    let inner = g.len();
                    acc(*x, &mut |gx| {
                        for row in gx.chunks_mut(inner) {
                            row.iter_mut().zip(&g).for_each(|(o, d)| *o += d / n);
                        }
                    });
                }
                Op::SelectRows { x, rows } => {
                    let inner = g.len() / rows.len();
                    acc(*x, &mut |gx| {
                        for (j, &r) in rows.iter().enumerate() {
                            let dst = &mut gx[r * inner..(r + 1) * inner];
                            dst.iter_mut()
                                .zip(&g[j * inner..(j + 1) * inner])
                                .for_each(|(o, d)| *o += d);
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for v in inputs {
                        let chunk = nodes[v.0].value.shape()[*axis] * inner;
                        acc(*v, &mut |gv| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                gv[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, d)| *a += d);
                            }
                        });
                        offset += chunk;
                    }
                }
                Op::RepeatLeading(x) => {
                    let inner = nodes[x.0].value.numel();
                    acc(*x, &mut |gx| {
                        for chunk in g.chunks(inner) {
                            gx.iter_mut().zip(chunk).for_each(|(o, d)| *o += d);
                        }
                    });
                }
                Op::L2NormLast(x) => {
                    let vx = val(*x);
                    let norms = node.value.data();
                    let last = vx.len() / norms.len();
                    acc(*x, &mut |gx| {
                        for (((gxr, xr), &nrm), d) in
                            gx.chunks_mut(last).zip(vx.chunks(last)).zip(norms).zip(&g)
                        {
                            // subgradient 0 at the origin
                            if nrm > 0.0 {
                                gxr.iter_mut().zip(xr).for_each(|(o, v)| *o += d * v / nrm);
                            }
                        }
                    });
                }
                Op::Bce { p, target } => {
                    let vp = val(*p);
                    let n = target.len() as f64;
                    acc(*p, &mut |gp| {
                        for ((o, &pv), &t) in gp.iter_mut().zip(vp).zip(target) {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                                continue;
                            }
                            *o += g[0] * (-t / pv + (1.0 - t) / (1.0 - pv)) / n;
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }
}
