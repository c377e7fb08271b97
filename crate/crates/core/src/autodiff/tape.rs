//! Define-by-run tape. Every primitive appends one entry holding its
//! operands and whatever forward intermediates its backward rule needs;
//! `backward` walks the entries once in reverse.

use crate::autodiff::gemm::{gemm, Mat};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a recorded node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBcast(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    SwapMiddle(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { src: Var, axis: usize, start: usize },
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    DivRows(Var, Var),
}

/// Recorded computation graph. Values, gradients and ops live in parallel
/// arenas indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: Var, n: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; n])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = Var(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        id
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    /// Leaf that accumulates a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ---- elementwise binary -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip(a, b, |p, q| p / q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let out = self.zip(a, b, |p, q| if p <= q { p } else { q });
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Minimum(a, b), rg))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let out = self.zip(a, b, |p, q| if p >= q { p } else { q });
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Maximum(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, position table).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        if !is_suffix(self.shape(b), self.shape(a)) {
            return Err(Error::shape("add_bcast", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let x = self.value(a);
        let data = x.data().chunks(nb).flat_map(|c| c.iter().zip(bv).map(|(p, q)| p + q)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBcast(a, b), rg))
    }

    /// `a * b` with suffix broadcasting of `b`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        if !is_suffix(self.shape(b), self.shape(a)) {
            return Err(Error::shape("mul_bcast", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let x = self.value(a);
        let data = x.data().chunks(nb).flat_map(|c| c.iter().zip(bv).map(|(p, q)| p * q)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MulBcast(a, b), rg))
    }

    /// Divides every last-axis row of `x` by the matching entry of `s`.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || self.shape(s) != &xs[..xs.len() - 1] {
            return Err(Error::shape("div_rows", xs, self.shape(s)));
        }
        let d = self.value(x).last_dim();
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .zip(sv)
            .flat_map(|(row, &q)| row.iter().map(move |p| p / q))
            .collect();
        let out = Tensor::from_parts(xs.to_vec(), data);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::DivRows(x, s), rg))
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |p| p * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |p| p + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    // ---- row-wise normalizers -----------------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Layer normalization over the last axis followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    // ---- linear algebra -----------------------------------------------------

    /// `a [.., k] @ b [k, n] -> [.., n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            Mat::row_major(self.value(a).data(), k),
            Mat::row_major(self.value(b).data(), n),
            0.0,
            &mut c,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, c), Op::MatMul(a, b), rg))
    }

    /// Batched matrix product over all leading axes:
    /// `a [.., m, k] @ b [.., k, n]`, or `a @ bᵀ` with `b [.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut c = vec![0.0; batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { Mat::transposed(bb, k) } else { Mat::row_major(bb, n) };
            gemm(m, k, n, 1.0, Mat::row_major(ab, k), bm, 0.0, &mut c[i * m * n..(i + 1) * m * n]);
        }
        let mut out_shape = sa.clone();
        out_shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, c), Op::Bmm { a, b, trans_b }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid_shape("transpose", &s, "needs at least 2 axes"));
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let data = transpose_blocks(self.value(a).data(), m, n);
        let mut out_shape = s;
        out_shape.swap(r - 2, r - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Transpose(a), rg))
    }

    /// `[p, q, r, s] -> [p, r, q, s]`; splits/merges attention heads.
    pub fn swap_middle(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid_shape("swap_middle", &s, "needs exactly 4 axes"));
        }
        let data = swap_middle_data(self.value(a).data(), s[0], s[1], s[2], s[3]);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![s[0], s[2], s[1], s[3]], data), Op::SwapMiddle(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid_shape("concat", &first, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let chunk = ext * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid_shape(
                "narrow",
                &s,
                format!("axis {axis}, range {start}..{}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let ext = s[axis];
        let v = self.value(src).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[src]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { src, axis, start }, rg))
    }

    /// Rows of `table [V, d]` selected by `ids`, shaped `out_lead ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], out_lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || out_lead.iter().product::<usize>() != ids.len() {
            return Err(Error::invalid_shape("gather", &ts, format!("{} ids into lead {out_lead:?}", ids.len())));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!("gather id {bad} out of range for table of {v} rows")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = out_lead.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let data = v.data().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::SumLast(a), rg)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Leaf gradients accumulate across calls;
    /// interior gradients are recomputed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.values[root.0].is_scalar() {
            return Err(Error::NonScalarRoot(self.values[root.0].shape().to_vec()));
        }
        for (g, op) in self.grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.requires_grad[root.0] {
            return Ok(());
        }
        grad_buf(&mut self.grads, root, 1)[0] += 1.0;
        for i in (0..=root.0).rev() {
            if matches!(self.ops[i], Op::Leaf) || !self.requires_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let rg = &self.requires_grad;
        let out = &values[i];
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {
                if rg[$v.0] {
                    let n = values[$v.0].numel();
                    let $buf = grad_buf(grads, Var($v.0), n);
                    $body
                }
            };
        }
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                acc!(b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
            }
            Op::Sub(a, b) => {
                acc!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                acc!(b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y) });
            }
            Op::AddBcast(a, b) => {
                acc!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                acc!(b, |gb| {
                    let nb = gb.len();
                    for c in g.chunks(nb) {
                        gb.iter_mut().zip(c).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                acc!(a, |ga| {
                    for ((x, y), q) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * q;
                    }
                });
                acc!(b, |gb| {
                    for ((x, y), p) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * p;
                    }
                });
            }
            Op::MulBcast(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                let nb = bv.len();
                acc!(a, |ga| {
                    for (gc, yc) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((x, y), q) in gc.iter_mut().zip(yc).zip(bv) {
                            *x += y * q;
                        }
                    }
                });
                acc!(b, |gb| {
                    for (ac, yc) in av.chunks(nb).zip(g.chunks(nb)) {
                        for ((x, y), p) in gb.iter_mut().zip(yc).zip(ac) {
                            *x += y * p;
                        }
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                acc!(a, |ga| {
                    for ((x, y), q) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y / q;
                    }
                });
                acc!(b, |gb| {
                    for (((x, y), p), q) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *x -= y * p / (q * q);
                    }
                });
            }
            Op::DivRows(x, s) => {
                let (xv, sv) = (values[x.0].data(), values[s.0].data());
                let d = values[x.0].last_dim();
                acc!(x, |gx| {
                    for ((gc, yc), q) in gx.chunks_mut(d).zip(g.chunks(d)).zip(sv) {
                        gc.iter_mut().zip(yc).for_each(|(p, y)| *p += y / q);
                    }
                });
                acc!(s, |gs| {
                    for (((p, yc), xc), q) in gs.iter_mut().zip(g.chunks(d)).zip(xv.chunks(d)).zip(sv) {
                        let dot: f64 = yc.iter().zip(xc).map(|(y, x)| y * x).sum();
                        *p -= dot / (q * q);
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(self.ops[i], Op::Minimum(..));
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                let pick_a = |p: f64, q: f64| if is_min { p <= q } else { p >= q };
                acc!(a, |ga| {
                    for (((x, y), p), q) in ga.iter_mut().zip(g).zip(av).zip(bv) {
                        if pick_a(*p, *q) {
                            *x += y;
                        }
                    }
                });
                acc!(b, |gb| {
                    for (((x, y), p), q) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        if !pick_a(*p, *q) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                acc!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y) });
            }
            Op::AddScalar(a) => {
                acc!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
            }
            Op::Exp(a) => {
                let yv = out.data();
                acc!(a, |ga| {
                    for ((x, y), e) in ga.iter_mut().zip(g).zip(yv) {
                        *x += y * e;
                    }
                });
            }
            Op::Log(a) => {
                let av = values[a.0].data();
                acc!(a, |ga| {
                    for ((x, y), p) in ga.iter_mut().zip(g).zip(av) {
                        *x += y / p;
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = out.data();
                acc!(a, |ga| {
                    for ((x, y), r) in ga.iter_mut().zip(g).zip(yv) {
                        *x += 0.5 * y / r;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = out.data();
                acc!(a, |ga| {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(yv) {
                        *x += y * s * (1.0 - s);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = values[a.0].data();
                acc!(a, |ga| {
                    for ((x, y), &p) in ga.iter_mut().zip(g).zip(av) {
                        let t = (GELU_C * (p + GELU_K * p * p * p)).tanh();
                        let dt = GELU_C * (1.0 + 3.0 * GELU_K * p * p);
                        *x += y * (0.5 * (1.0 + t) + 0.5 * p * (1.0 - t * t) * dt);
                    }
                });
            }
            Op::Relu(a) => {
                let av = values[a.0].data();
                acc!(a, |ga| {
                    for ((x, y), p) in ga.iter_mut().zip(g).zip(av) {
                        if *p > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = values[a.0].data();
                acc!(a, |ga| {
                    for ((x, y), p) in ga.iter_mut().zip(g).zip(av) {
                        if *p > 0.0 {
                            *x += y;
                        } else if *p < 0.0 {
                            *x -= y;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let av = values[a.0].data();
                acc!(a, |ga| {
                    for ((x, y), p) in ga.iter_mut().zip(g).zip(av) {
                        *x += y * sigmoid(*p);
                    }
                });
            }
            Op::Softmax(a) => {
                let yv = out.data();
                let d = out.last_dim();
                acc!(a, |ga| {
                    for ((gc, yc), sc) in ga.chunks_mut(d).zip(g.chunks(d)).zip(yv.chunks(d)) {
                        let dot: f64 = yc.iter().zip(sc).map(|(y, s)| y * s).sum();
                        for ((x, y), s) in gc.iter_mut().zip(yc).zip(sc) {
                            *x += s * (y - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let yv = out.data();
                let d = out.last_dim();
                acc!(a, |ga| {
                    for ((gc, yc), lc) in ga.chunks_mut(d).zip(g.chunks(d)).zip(yv.chunks(d)) {
                        let total: f64 = yc.iter().sum();
                        for ((x, y), l) in gc.iter_mut().zip(yc).zip(lc) {
                            *x += y - l.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.last_dim();
                let gv = values[gamma.0].data();
                acc!(beta, |gb| {
                    for c in g.chunks(d) {
                        gb.iter_mut().zip(c).for_each(|(p, y)| *p += y);
                    }
                });
                acc!(gamma, |gg| {
                    for (c, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((p, y), hh) in gg.iter_mut().zip(c).zip(h) {
                            *p += y * hh;
                        }
                    }
                });
                acc!(x, |gx| {
                    let mut dh = vec![0.0; d];
                    for (((gc, yc), hc), r) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(rstd) {
                        for ((t, y), gm) in dh.iter_mut().zip(yc).zip(gv) {
                            *t = y * gm;
                        }
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hc).map(|(t, h)| t * h).sum::<f64>() / d as f64;
                        for ((p, t), h) in gc.iter_mut().zip(&dh).zip(hc) {
                            *p += r * (t - m1 - h * m2);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sb = values[b.0].shape();
                let (k, n) = (sb[0], sb[1]);
                let m = values[a.0].numel() / k;
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                acc!(a, |ga| {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, 1.0, Mat::row_major(g, n), Mat::transposed(bv, n), 1.0, ga);
                });
                acc!(b, |gb| {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, 1.0, Mat::transposed(av, k), Mat::row_major(g, n), 1.0, gb);
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = values[a.0].shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = out.shape()[r - 1];
                let batch: usize = sa[..r - 2].iter().product();
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                let trans_b = *trans_b;
                acc!(a, |ga| {
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        // C = A·B -> dA = dC·Bᵀ ; C = A·Bᵀ -> dA = dC·B
                        let bm = if trans_b { Mat::row_major(bb, k) } else { Mat::transposed(bb, n) };
                        gemm(m, n, k, 1.0, Mat::row_major(gc, n), bm, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                });
                acc!(b, |gb| {
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB [n,k] = dCᵀ · A
                            gemm(n, m, k, 1.0, Mat::transposed(gc, n), Mat::row_major(ab, k), 1.0, dst);
                        } else {
                            // dB [k,n] = Aᵀ · dC
                            gemm(k, m, n, 1.0, Mat::transposed(ab, k), Mat::row_major(gc, n), 1.0, dst);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = out.shape();
                let r = s.len();
                let back = transpose_blocks(g, s[r - 2], s[r - 1]);
                acc!(a, |ga| { ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y) });
            }
            Op::SwapMiddle(a) => {
                let s = out.shape();
                let back = swap_middle_data(g, s[0], s[1], s[2], s[3]);
                acc!(a, |ga| { ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y) });
            }
            Op::Reshape(a) => {
                acc!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let ext = values[p.0].shape()[*axis];
                    acc!(p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            gp[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += ext;
                }
            }
            Op::Narrow { src, axis, start } => {
                let ss = values[src.0].shape();
                let (outer, inner) = outer_inner(ss, *axis);
                let ext = ss[*axis];
                let len = out.shape()[*axis];
                acc!(src, |gs| {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        gs[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = values[table.0].shape()[1];
                acc!(table, |gt| {
                    for (j, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[j * d..(j + 1) * d])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sum(a) => {
                acc!(a, |ga| { ga.iter_mut().for_each(|x| *x += g[0]) });
            }
            Op::Mean(a) => {
                let n = values[a.0].numel() as f64;
                acc!(a, |ga| { ga.iter_mut().for_each(|x| *x += g[0] / n) });
            }
            Op::SumLast(a) => {
                let d = values[a.0].last_dim();
                acc!(a, |ga| {
                    for (c, y) in ga.chunks_mut(d).zip(g) {
                        c.iter_mut().for_each(|x| *x += y);
                    }
                });
            }
        }
    }
}

fn transpose_blocks(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (sb, ob) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                ob[j * m + i] = sb[i * n + j];
            }
        }
    }
    out
}

fn swap_middle_data(src: &[f64], p: usize, q: usize, r: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..p {
        for b in 0..q {
            for c in 0..r {
                let from = ((a * q + b) * r + c) * s;
                let to = ((a * r + c) * q + b) * s;
                out[to..to + s].copy_from_slice(&src[from..from + s]);
            }
        }
    }
    out
}
