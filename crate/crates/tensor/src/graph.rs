// SPDX-License-Identifier: Apache-2.0

//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Inputs always
//! precede their outputs on the tape, so a single reverse sweep from the loss
//! node visits nodes in a valid topological order.

use crate::error::TensorError;
use crate::param::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    /// Input and the derivative at each element.
    Gelu(Var, Vec<T>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    WeightedSum { x: Var, w: Vec<T> },
    L1Rows { pred: Var, target: Vec<T> },
    GiouLossRows { pred: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, if it took part in the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients, summed over every use of each parameter.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

fn shape_err(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

fn mat<T: Scalar>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::new(vec![rows, cols], data).expect("internal shape bookkeeping")
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = tanh(inner);
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn tanh<T: Scalar>(x: T) -> T {
    let e = (x + x).exp();
    T::one() - T::of(2.0) / (e + T::one())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Strided sub-matrix product used by the attention kernel.
#[allow(clippy::too_many_arguments)]
fn gemm_view<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], usize, isize, isize),
    b: (&[T], usize, isize, isize),
    c: (&mut [T], usize, isize, isize),
    accumulate: bool,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |off: usize, rs: isize, cs: isize, r: usize, cc: usize| {
        off as isize + (r as isize - 1) * rs + (cc as isize - 1) * cs
    };
    assert!((last(a.1, a.2, a.3, m, k) as usize) < a.0.len());
    assert!((last(b.1, b.2, b.3, k, n) as usize) < b.0.len());
    assert!((last(c.1, c.2, c.3, m, n) as usize) < c.0.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the furthest element touched by each view was bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}

struct BoxGeom<T> {
    p: [T; 4],
    t: [T; 4],
}

impl<T: Scalar> BoxGeom<T> {
    fn corners(b: &[T; 4]) -> [T; 4] {
        let half = T::of(0.5);
        [b[0] - half * b[2], b[1] - half * b[3], b[0] + half * b[2], b[1] + half * b[3]]
    }

    /// Returns `(loss, d loss / d pred)` for `1 - giou(pred, target)`.
    fn giou_loss(&self) -> Result<(T, [T; 4]), TensorError> {
        let zero = T::zero();
        let [px1, py1, px2, py2] = Self::corners(&self.p);
        let [tx1, ty1, tx2, ty2] = Self::corners(&self.t);
        let ix1 = px1.max(tx1);
        let ix2 = px2.min(tx2);
        let iy1 = py1.max(ty1);
        let iy2 = py2.min(ty2);
        let iw = (ix2 - ix1).max(zero);
        let ih = (iy2 - iy1).max(zero);
        let inter = iw * ih;
        let ap = self.p[2] * self.p[3];
        let at = self.t[2] * self.t[3];
        let union = ap + at - inter;
        let ex1 = px1.min(tx1);
        let ex2 = px2.max(tx2);
        let ey1 = py1.min(ty1);
        let ey2 = py2.max(ty2);
        let ew = ex2 - ex1;
        let eh = ey2 - ey1;
        let enc = ew * eh;
        if !(union > zero) || !(enc > zero) {
            return Err(TensorError::Invalid("giou loss on zero-area boxes".into()));
        }
        let loss = T::of(2.0) - inter / union - union / enc;

        let d_inter = -(T::one() / union + inter / (union * union)) + T::one() / enc;
        let d_ap = inter / (union * union) - T::one() / enc;
        let d_enc = union / (enc * enc);

        // intersection extents
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        let (mut d_px1, mut d_px2, mut d_py1, mut d_py2) = (zero, zero, zero, zero);
        if ix2 - ix1 > zero {
            if px2 < tx2 {
                d_px2 = d_px2 + d_iw;
            }
            if px1 > tx1 {
                d_px1 = d_px1 - d_iw;
            }
        }
        if iy2 - iy1 > zero {
            if py2 < ty2 {
                d_py2 = d_py2 + d_ih;
            }
            if py1 > ty1 {
                d_py1 = d_py1 - d_ih;
            }
        }
        // enclosing extents
        let d_ew = d_enc * eh;
        let d_eh = d_enc * ew;
        if px2 > tx2 {
            d_px2 = d_px2 + d_ew;
        }
        if px1 < tx1 {
            d_px1 = d_px1 - d_ew;
        }
        if py2 > ty2 {
            d_py2 = d_py2 + d_eh;
        }
        if py1 < ty1 {
            d_py1 = d_py1 - d_eh;
        }
        let half = T::of(0.5);
        let d_cx = d_px1 + d_px2;
        let d_cy = d_py1 + d_py2;
        let d_w = half * (d_px2 - d_px1) + d_ap * self.p[3];
        let d_h = half * (d_py2 - d_py1) + d_ap * self.p[2];
        Ok((loss, [d_cx, d_cy, d_w, d_h]))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient can be read back with [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; its gradient is reported by id.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = p.trainable;
        self.push(p.tensor.clone(), Op::Param(id), trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (kb, n) = self.dims(b);
        if k != kb {
            return Err(shape_err(format!("matmul [{m},{k}] x [{kb},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), kb, n),
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.cols() != tb.cols() {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(mat(ta.rows(), ta.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Adds a `[1, n]` (or `[n]`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        let r = self.value(row);
        if r.len() != n {
            return Err(shape_err(format!("add_row: row of {} onto [{m},{n}]", r.len())));
        }
        let rd = r.data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            for (o, &b) in chunk.iter_mut().zip(rd) {
                *o = *o + b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(mat(m, n, out), Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(a);
        let v = mat(t.rows(), t.cols(), t.data().iter().map(|&x| x * c).collect());
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        mat(t.rows(), t.cols(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let (y, dy): (Vec<T>, Vec<T>) = t.data().iter().map(|&x| gelu_parts(x)).unzip();
        let ng = self.ng(a);
        self.push(mat(rows, cols, y), Op::Gelu(a, dy), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Natural log. Non-positive inputs produce non-finite values, which
    /// callers surface as errors at loss time.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.ln());
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng)
    }

    fn softmax_rows(t: &Tensor<T>, log: bool) -> Result<Tensor<T>, TensorError> {
        if !t.all_finite() {
            return Err(TensorError::Invalid("softmax input is not finite".into()));
        }
        let n = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&x| (x - mx).exp()).sum();
            if log {
                let lse = mx + s.ln();
                out.extend(row.iter().map(|&x| x - lse));
            } else {
                out.extend(row.iter().map(|&x| (x - mx).exp() / s));
            }
        }
        Ok(mat(t.rows(), n, out))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = Self::softmax_rows(self.value(a), false)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Softmax(a), ng))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = Self::softmax_rows(self.value(a), true)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::LogSoftmax(a), ng))
    }

    /// Row-wise layer normalization with learned gain and bias of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err(format!("layer_norm gain/bias vs width {n}")));
        }
        let eps = T::of(eps);
        let t = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::of(n as f64);
        let mut out = Vec::with_capacity(m * n);
        let mut stats = Vec::with_capacity(m);
        for r in 0..m {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
            stats.push((mean, rstd));
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(mat(m, n, out), Op::LayerNorm { x, gain, bias, stats }, ng))
    }

    /// Scaled dot-product attention over `heads` equal column slices of
    /// already-projected queries `[nq, d]`, keys and values `[nk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if nk == 0 {
            return Err(TensorError::Invalid("attention over an empty key set".into()));
        }
        if dk != d || dv != d || nv != nk {
            return Err(shape_err(format!("attention q[{nq},{d}] k[{nk},{dk}] v[{nv},{dv}]")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("{d} not divisible into {heads} heads")));
        }
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        let di = d as isize;
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            // scores = Q_h K_h^T
            gemm_view(nq, hd, nk, (qd, h * hd, di, 1), (kd, h * hd, 1, di), (p, 0, nk as isize, 1), false);
            for row in p.chunks_mut(nk) {
                let mut mx = T::neg_infinity();
                for x in row.iter_mut() {
                    *x = *x * scale;
                    mx = mx.max(*x);
                }
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s = s + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / s;
                }
            }
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            gemm_view(nq, nk, hd, (p, 0, nk as isize, 1), (vd, h * hd, di, 1), (&mut out, h * hd, di, 1), false);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(mat(nq, d, out), Op::Attention { q, k, v, heads, probs }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let n = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(shape_err(format!("concat_rows width {c} vs {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
            ng |= self.ng(p);
        }
        Ok(self.push(mat(rows, n, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(TensorError::OutOfRange(format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(mat(len, n, data), Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let m = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(shape_err(format!("concat_cols rows {r} vs {m}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(m, total, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(TensorError::OutOfRange(format!("cols {start}..{} of {n}", start + len)));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(mat(m, len, data), Op::SliceCols { x, start }, ng))
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::OutOfRange(format!("row {bad} of {m}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(mat(idx.len(), n, data), Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Selects `x[i, idx[i]]` into an `[m, 1]` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if idx.len() != m {
            return Err(shape_err(format!("pick: {} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::OutOfRange(format!("class {bad} of {n}")));
        }
        let t = self.value(x);
        let data = idx.iter().enumerate().map(|(r, &c)| t.get2(r, c)).collect();
        let ng = self.ng(x);
        Ok(self.push(mat(m, 1, data), Op::Pick { x, idx: idx.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(mat(1, 1, vec![s]), Op::Sum(x), ng)
    }

    /// `sum_i w[i] * x[i]` over the flattened values of `x`.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.len() != w.len() {
            return Err(shape_err(format!("weighted_sum: {} weights for {} values", w.len(), t.len())));
        }
        let s = t.data().iter().zip(w).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(mat(1, 1, vec![s]), Op::WeightedSum { x, w: w.to_vec() }, ng))
    }

    fn box_target(&self, pred: Var, target: &[T], what: &str) -> Result<usize, TensorError> {
        let (m, n) = self.dims(pred);
        if n != 4 || target.len() != m * 4 {
            return Err(shape_err(format!("{what}: pred [{m},{n}] vs {} target values", target.len())));
        }
        Ok(m)
    }

    /// Per-row L1 distance between `[m, 4]` predictions and constant targets.
    pub fn l1_rows(&mut self, pred: Var, target: &[T]) -> Result<Var, TensorError> {
        let m = self.box_target(pred, target, "l1")?;
        let p = self.value(pred).data();
        let data = (0..m)
            .map(|r| (0..4).map(|j| (p[r * 4 + j] - target[r * 4 + j]).abs()).sum())
            .collect();
        let ng = self.ng(pred);
        Ok(self.push(mat(m, 1, data), Op::L1Rows { pred, target: target.to_vec() }, ng))
    }

    /// Per-row `1 - GIoU` between `[m, 4]` `(cx, cy, w, h)` predictions and constant targets.
    pub fn giou_loss_rows(&mut self, pred: Var, target: &[T]) -> Result<Var, TensorError> {
        let m = self.box_target(pred, target, "giou")?;
        let p = self.value(pred).data();
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            let geom = BoxGeom {
                p: [p[r * 4], p[r * 4 + 1], p[r * 4 + 2], p[r * 4 + 3]],
                t: [target[r * 4], target[r * 4 + 1], target[r * 4 + 2], target[r * 4 + 3]],
            };
            data.push(geom.giou_loss()?.0);
        }
        let ng = self.ng(pred);
        Ok(self.push(mat(m, 1, data), Op::GiouLossRows { pred, target: target.to_vec() }, ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop(node, &gout, &mut grads);
            match node.op {
                Op::Param(id) => {
                    params.push((id, i));
                    grads[i] = Some(gout);
                }
                Op::Leaf => grads[i] = Some(gout),
                _ => {}
            }
        }
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                self.acc(grads, a, |ga| {
                    gemm(MatRef::new(g, m, n), MatRef::new(bd, k, n).t(), ga, true);
                });
                self.acc(grads, b, |gb| {
                    gemm(MatRef::new(ad, m, k).t(), MatRef::new(g, m, n), gb, true);
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            &Op::Mul(a, b) => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                });
                self.acc(grads, b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                });
            }
            &Op::AddRow(a, row) => {
                let n = out.cols().max(1);
                self.acc(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(grads, row, |gr| {
                    for chunk in g.chunks(n) {
                        for (x, &y) in gr.iter_mut().zip(chunk) {
                            *x = *x + y;
                        }
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.acc(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * c));
            }
            Op::Gelu(a, dy) => {
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * dy[i];
                    }
                });
            }
            &Op::Relu(a) => {
                let ad = self.value(a).data();
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = out.data();
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            &Op::Log(a) => {
                let ad = self.value(a).data();
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] / ad[i];
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = out.cols();
                let y = out.data();
                self.acc(grads, a, |ga| {
                    for r in 0..out.rows() {
                        let s = r * n;
                        let dot: T = (s..s + n).map(|i| g[i] * y[i]).sum();
                        for i in s..s + n {
                            ga[i] = ga[i] + y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let n = out.cols();
                let y = out.data();
                self.acc(grads, a, |ga| {
                    for r in 0..out.rows() {
                        let s = r * n;
                        let gs: T = g[s..s + n].iter().copied().sum();
                        for i in s..s + n {
                            ga[i] = ga[i] + g[i] - y[i].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (m, n) = self.dims(*x);
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let nf = T::of(n as f64);
                let xhat = |r: usize, j: usize| (xd[r * n + j] - stats[r].0) * stats[r].1;
                self.acc(grads, *gain, |gg| {
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + g[r * n + j] * xhat(r, j);
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] = gb[j] + g[r * n + j];
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    for r in 0..m {
                        let rstd = stats[r].1;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = g[r * n + j] * gd[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat(r, j);
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..n {
                            let d = g[r * n + j] * gd[j];
                            gx[r * n + j] = gx[r * n + j] + rstd * (d - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (nq, d) = self.dims(q);
                let nk = self.dims(k).0;
                let hd = d / heads;
                let di = d as isize;
                let nki = nk as isize;
                let scale = T::of(1.0 / (hd as f64).sqrt());
                let qd = self.value(q).data();
                let kd = self.value(k).data();
                let vd = self.value(v).data();
                let mut gq = vec![T::zero(); nq * d];
                let mut gk = vec![T::zero(); nk * d];
                let mut gv = vec![T::zero(); nk * d];
                let mut dp = vec![T::zero(); nq * nk];
                for h in 0..heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    // dP = dO_h V_h^T
                    gemm_view(nq, hd, nk, (g, h * hd, di, 1), (vd, h * hd, 1, di), (&mut dp, 0, nki, 1), false);
                    // dV_h += P^T dO_h
                    gemm_view(nk, nq, hd, (p, 0, 1, nki), (g, h * hd, di, 1), (&mut gv, h * hd, di, 1), true);
                    for r in 0..nq {
                        let row = &mut dp[r * nk..(r + 1) * nk];
                        let pr = &p[r * nk..(r + 1) * nk];
                        let dot: T = row.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (x, &pp) in row.iter_mut().zip(pr) {
                            *x = pp * (*x - dot) * scale;
                        }
                    }
                    // dQ_h += dS K_h ; dK_h += dS^T Q_h
                    gemm_view(nq, nk, hd, (&dp, 0, nki, 1), (kd, h * hd, di, 1), (&mut gq, h * hd, di, 1), true);
                    gemm_view(nk, nq, hd, (&dp, 0, 1, nki), (qd, h * hd, di, 1), (&mut gk, h * hd, di, 1), true);
                }
                for (var, src) in [(q, gq), (k, gk), (v, gv)] {
                    self.acc(grads, var, |ga| ga.iter_mut().zip(&src).for_each(|(x, &y)| *x = *x + y));
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |gp| {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, &y)| *x = *x + y)
                    });
                    off += len;
                }
            }
            &Op::SliceRows { x, start } => {
                let n = out.cols();
                self.acc(grads, x, |gx| {
                    gx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x = *x + y)
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    self.acc(grads, p, |gp| {
                        for r in 0..out.rows() {
                            for j in 0..c {
                                gp[r * c + j] = gp[r * c + j] + g[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let n = self.dims(x).1;
                let len = out.cols();
                self.acc(grads, x, |gx| {
                    for r in 0..out.rows() {
                        for j in 0..len {
                            gx[r * n + start + j] = gx[r * n + start + j] + g[r * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[r * n + j];
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let n = self.dims(*x).1;
                self.acc(grads, *x, |gx| {
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * n + c] = gx[r * n + c] + g[r];
                    }
                });
            }
            &Op::Sum(x) => {
                self.acc(grads, x, |gx| gx.iter_mut().for_each(|v| *v = *v + g[0]));
            }
            Op::WeightedSum { x, w } => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(w).for_each(|(v, &wi)| *v = *v + g[0] * wi));
            }
            Op::L1Rows { pred, target } => {
                let p = self.value(*pred).data();
                self.acc(grads, *pred, |gp| {
                    for i in 0..gp.len() {
                        let diff = p[i] - target[i];
                        let s = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gp[i] = gp[i] + g[i / 4] * s;
                    }
                });
            }
            Op::GiouLossRows { pred, target } => {
                let p = self.value(*pred).data();
                self.acc(grads, *pred, |gp| {
                    for r in 0..g.len() {
                        let geom = BoxGeom {
                            p: [p[r * 4], p[r * 4 + 1], p[r * 4 + 2], p[r * 4 + 3]],
                            t: [target[r * 4], target[r * 4 + 1], target[r * 4 + 2], target[r * 4 + 3]],
                        };
                        // forward already validated the areas
                        if let Ok((_, d)) = geom.giou_loss() {
                            for j in 0..4 {
                                gp[r * 4 + j] = gp[r * 4 + j] + g[r] * d[j];
                            }
                        }
                    }
                });
            }
        }
    }
}
