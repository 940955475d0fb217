//! Reverse-mode automatic differentiation over 2-D row-major tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and
//! whatever it needs for the backward pass. Graphs are cheap and are rebuilt
//! for each training step. Image feature maps are stored channels-last as
//! `[n·h·w, c]` matrices, with the spatial layout carried by [`Spatial`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::real::{gemm, View};
use crate::numerics::{ParameterStore, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Layout of a channels-last feature map stored as `[n·h·w, c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spatial {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Spatial {
    pub fn new(n: usize, h: usize, w: usize) -> Self {
        Spatial { n, h, w }
    }

    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn halved(&self) -> Self {
        Spatial::new(self.n, self.h / 2, self.w / 2)
    }

    pub fn doubled(&self) -> Self {
        Spatial::new(self.n, self.h * 2, self.w * 2)
    }
}

/// Blocked multi-head attention: queries come in `batch` blocks of `q_len`
/// rows and attend only to the matching block of `kv_len` key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    AddRepeated(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Spatial,
        kernel: usize,
        cols: Vec<T>,
    },
    AvgPool2(Var, Spatial),
    Upsample2(Var, Spatial),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    GroupMean(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let x2 = x * x;
    let inner = c * (x + k * x2 * x);
    let t = fast_tanh(inner);
    let value = half * x * (one + t);
    let deriv = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x2);
    (value, deriv)
}

/// `tanh` through a single `exp`, several times faster than libm's `tanh`.
fn fast_tanh<T: Real>(u: T) -> T {
    let limit = T::lit(20.0);
    if u > limit {
        return T::one();
    }
    if u < -limit {
        return -T::one();
    }
    let e = (u + u).exp();
    (e - T::one()) / (e + T::one())
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Unnamed leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf bound to a named parameter; it requires a gradient exactly when the
    /// parameter is trainable. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.leaf(value, store.is_trainable(name));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_raw(self.shape(a).to_vec(), data);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let value = Tensor::from_raw(self.shape(a).to_vec(), data);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(bias).numel() != cols {
            return Err(mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(xd[r * cols..(r + 1) * cols].iter().zip(b).map(|(&u, &v)| u + v));
        }
        let value = Tensor::from_raw(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x[g·r, c] + b[g, c]` where row `i` of `b` is added to the `i`-th block
    /// of `r` consecutive rows of `x`.
    pub fn add_repeated(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xr, xc) = self.dims(x);
        let (br, bc) = self.dims(b);
        if xc != bc || br == 0 || xr % br != 0 {
            return Err(mismatch("add_repeated", self.shape(x), self.shape(b)));
        }
        let rep = xr / br;
        let (xd, bd) = (self.data(x), self.data(b));
        let mut data = Vec::with_capacity(xr * xc);
        for r in 0..xr {
            let brow = &bd[(r / rep) * bc..(r / rep + 1) * bc];
            data.extend(xd[r * xc..(r + 1) * xc].iter().zip(brow).map(|(&u, &v)| u + v));
        }
        let value = Tensor::from_raw(vec![xr, xc], data);
        Ok(self.push(value, Op::AddRepeated(x, b), &[x, b]))
    }

    /// Matrix product of 2-D operands, each optionally read transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            View::dense(0, ac, ta),
            self.data(b),
            View::dense(0, bc, tb),
            T::zero(),
            &mut out,
            View::dense(0, n, false),
        );
        let value = Tensor::from_raw(vec![m, n], out);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x·w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu_parts(v).0).collect();
        let value = Tensor::from_raw(self.shape(x).to_vec(), data);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims(x);
        let mut data = self.data(x).to_vec();
        for r in 0..rows {
            softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_raw(self.shape(x).to_vec(), data);
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::lit(cols as f64);
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::from_raw(self.shape(x).to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scaled dot-product attention, blocked per batch element and split
    /// into `heads` equal column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (qr, qc) = self.dims(q);
        let (kr, kc) = self.dims(k);
        let (vr, vc) = self.dims(v);
        let AttnShape {
            heads,
            q_len: n,
            kv_len: m,
            causal,
        } = shape;
        let bad = heads == 0
            || n == 0
            || m == 0
            || qr % n != 0
            || kr != (qr / n) * m
            || vr != kr
            || qc != kc
            || qc % heads != 0
            || vc % heads != 0
            || (causal && n != m);
        if bad {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        let batch = qr / n;
        let (dq, dv) = (qc / heads, vc / heads);
        let scale = T::one() / T::lit(dq as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * n * m];
        let mut out = vec![T::zero(); qr * vc];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * n * m;
                gemm(
                    n,
                    dq,
                    m,
                    scale,
                    qd,
                    View::dense(b * n * qc + h * dq, qc, false),
                    kd,
                    View {
                        offset: b * m * kc + h * dq,
                        row_stride: 1,
                        col_stride: kc,
                    },
                    T::zero(),
                    &mut probs,
                    View::dense(p_off, m, false),
                );
                for i in 0..n {
                    let row = &mut probs[p_off + i * m..p_off + (i + 1) * m];
                    if causal {
                        softmax_row(&mut row[..=i]);
                        row[i + 1..].iter_mut().for_each(|p| *p = T::zero());
                    } else {
                        softmax_row(row);
                    }
                }
                gemm(
                    n,
                    m,
                    dv,
                    T::one(),
                    &probs,
                    View::dense(p_off, m, false),
                    vd,
                    View::dense(b * m * vc + h * dv, vc, false),
                    T::zero(),
                    &mut out,
                    View::dense(b * n * vc + h * dv, vc, false),
                );
            }
        }
        let value = Tensor::from_raw(vec![qr, vc], out);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Same-padded, stride-1 convolution on a channels-last map.
    /// `w` is `[kernel·kernel·c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Spatial, kernel: usize) -> Result<Var> {
        let (xr, cin) = self.dims(x);
        let (wr, cout) = self.dims(w);
        if kernel.is_multiple_of(2) || xr != geom.rows() || wr != kernel * kernel * cin {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        if self.value(b).numel() != cout {
            return Err(mismatch("conv2d bias", self.shape(w), self.shape(b)));
        }
        let cols = im2col(self.data(x), geom, cin, kernel);
        let width = kernel * kernel * cin;
        let mut out = vec![T::zero(); xr * cout];
        let bd = self.data(b);
        for r in 0..xr {
            out[r * cout..(r + 1) * cout].copy_from_slice(bd);
        }
        gemm(
            xr,
            width,
            cout,
            T::one(),
            &cols,
            View::dense(0, width, false),
            self.data(w),
            View::dense(0, cout, false),
            T::one(),
            &mut out,
            View::dense(0, cout, false),
        );
        let value = Tensor::from_raw(vec![xr, cout], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                kernel,
                cols,
            },
            &[x, w, b],
        ))
    }

    /// 2×2 average pooling; `h` and `w` must be even.
    pub fn avg_pool2(&mut self, x: Var, geom: Spatial) -> Result<Var> {
        let (xr, c) = self.dims(x);
        if xr != geom.rows() || !geom.h.is_multiple_of(2) || !geom.w.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("avg_pool2 needs even spatial dims, got {geom:?}"),
            });
        }
        let out_geom = geom.halved();
        let quarter = T::lit(0.25);
        let xd = self.data(x);
        let mut out = vec![T::zero(); out_geom.rows() * c];
        for (o, src) in pool_sources(geom) {
            for (dst, &v) in out[o * c..(o + 1) * c].iter_mut().zip(&xd[src * c..(src + 1) * c]) {
                *dst += v * quarter;
            }
        }
        let value = Tensor::from_raw(vec![out_geom.rows(), c], out);
        Ok(self.push(value, Op::AvgPool2(x, geom), &[x]))
    }

    /// Nearest-neighbour 2× upsampling; `geom` is the input layout.
    pub fn upsample2(&mut self, x: Var, geom: Spatial) -> Result<Var> {
        let (xr, c) = self.dims(x);
        if xr != geom.rows() {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("does not match layout {geom:?}"),
            });
        }
        let big = geom.doubled();
        let xd = self.data(x);
        let mut out = vec![T::zero(); big.rows() * c];
        for (src, dst) in pool_sources(big) {
            out[dst * c..(dst + 1) * c].copy_from_slice(&xd[src * c..(src + 1) * c]);
        }
        let value = Tensor::from_raw(vec![big.rows(), c], out);
        Ok(self.push(value, Op::Upsample2(x, geom), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(parts[parts.len() - 1])));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_raw(vec![rows, total], out);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(parts[parts.len() - 1])));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rows = out.len() / cols;
        let value = Tensor::from_raw(vec![rows, cols], out);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > rows {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("row slice {start}..{} out of range", start + len),
            });
        }
        let data = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_raw(vec![len, cols], data);
        Ok(self.push(value, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > cols {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("column slice {start}..{} out of range", start + len),
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_raw(vec![rows, len], data);
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("gather index {bad} out of range"),
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::from_raw(vec![idx.len(), cols], data);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Copy of `base` with row `idx[i]` replaced by row `i` of `src`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(base);
        let (sr, sc) = self.dims(src);
        if sc != cols || sr != idx.len() {
            return Err(mismatch("scatter_rows", self.shape(base), self.shape(src)));
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidShape {
                    shape: self.shape(base).to_vec(),
                    reason: format!("scatter index {i} out of range or repeated"),
                });
            }
        }
        let mut data = self.data(base).to_vec();
        let sd = self.data(src);
        for (s, &i) in idx.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(&sd[s * cols..(s + 1) * cols]);
        }
        let value = Tensor::from_raw(self.shape(base).to_vec(), data);
        Ok(self.push(
            value,
            Op::ScatterRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            &[base, src],
        ))
    }

    /// Mean over consecutive blocks of `group` rows: `[g·r, c] → [g, c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if group == 0 || rows % group != 0 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("rows not divisible into groups of {group}"),
            });
        }
        let inv = T::one() / T::lit(group as f64);
        let xd = self.data(x);
        let mut out = vec![T::zero(); (rows / group) * cols];
        for r in 0..rows {
            let dst = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (d, &v) in dst.iter_mut().zip(&xd[r * cols..(r + 1) * cols]) {
                *d += v * inv;
            }
        }
        let value = Tensor::from_raw(vec![rows / group, cols], out);
        Ok(self.push(value, Op::GroupMean(x, group), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean negative log-likelihood of integer targets under row softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(Error::invalid(format!(
                "cross_entropy: {} targets for {rows}×{cols} logits",
                targets.len()
            )));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            softmax_row(row);
            loss -= row[targets[r]].max(T::min_positive_value()).ln();
        }
        let value = Tensor::scalar(loss / T::lit(rows as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Sum of squared differences divided by the number of rows, i.e. the
    /// batch mean of per-sample squared norms when each row is one sample.
    pub fn sum_sq_error_per_row(&mut self, pred: Var, target: Var) -> Result<Var> {
        let rows = self.shape(pred)[0];
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, T::one() / T::lit(rows as f64)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let mut by_var = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                by_var.insert(Var(i), Tensor::from_raw(node.value.shape().to_vec(), data));
            }
        }
        let mut by_param = BTreeMap::new();
        for (name, &v) in &self.params {
            if let Some(t) = by_var.get(&v) {
                by_param.insert(name.clone(), t.clone());
            }
        }
        Ok(Gradients { by_param, by_var })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |buf| {
                    for ((d, &s), &o) in buf.iter_mut().zip(g).zip(bd) {
                        *d += s * o;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((d, &s), &o) in buf.iter_mut().zip(g).zip(ad) {
                        *d += s * o;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s));
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
                let cols = self.value(*b).numel();
                self.acc(grads, *b, |buf| {
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                });
            }
            Op::AddRepeated(x, b) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
                let (br, bc) = self.dims(*b);
                let rep = g.len() / bc / br;
                self.acc(grads, *b, |buf| {
                    for (r, row) in g.chunks(bc).enumerate() {
                        add_into(&mut buf[(r / rep) * bc..(r / rep + 1) * bc], row);
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (ar, ac) = self.dims(*a);
                let (br, bc) = self.dims(*b);
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                let (ad, bd) = (self.data(*a), self.data(*b));
                let one = T::one();
                self.acc(grads, *a, |buf| {
                    if !ta {
                        // dA = G·Bᵀ
                        gemm(m, n, k, one, g, View::dense(0, n, false), bd, View::dense(0, bc, !tb), one, buf, View::dense(0, ac, false));
                    } else {
                        // stored Aᵀ: dAᵀ = B·Gᵀ
                        gemm(k, n, m, one, bd, View::dense(0, bc, tb), g, View::dense(0, n, true), one, buf, View::dense(0, ac, false));
                    }
                });
                self.acc(grads, *b, |buf| {
                    if !tb {
                        // dB = Aᵀ·G
                        gemm(k, m, n, one, ad, View::dense(0, ac, !ta), g, View::dense(0, n, false), one, buf, View::dense(0, bc, false));
                    } else {
                        // stored Bᵀ: dBᵀ = Gᵀ·A
                        gemm(n, m, k, one, g, View::dense(0, n, true), ad, View::dense(0, ac, ta), one, buf, View::dense(0, bc, false));
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |buf| {
                    for ((d, &s), &v) in buf.iter_mut().zip(g).zip(xd) {
                        *d += s * gelu_parts(v).1;
                    }
                });
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let cols = node.value.dims2().1;
                self.acc(grads, *x, |buf| {
                    for ((drow, grow), prow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(p.chunks(cols)) {
                        let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &pv) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += pv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                let n = T::lit(cols as f64);
                self.acc(grads, *x, |buf| {
                    for (r, (drow, grow)) in buf.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..cols {
                            let dh = grow[c] * gd[c];
                            mean_dh += dh;
                            mean_dh_h += dh * h[c];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for c in 0..cols {
                            let dh = grow[c] * gd[c];
                            drow[c] += rstd[r] * (dh - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                });
                self.acc(grads, *gamma, |buf| {
                    for (grow, h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            buf[c] += grow[c] * h[c];
                        }
                    }
                });
                self.acc(grads, *beta, |buf| {
                    for grow in g.chunks(cols) {
                        add_into(buf, grow);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, g, grads),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                kernel,
                cols,
            } => {
                let (xr, cin) = self.dims(*x);
                let cout = self.dims(*w).1;
                let width = kernel * kernel * cin;
                let one = T::one();
                self.acc(grads, *w, |buf| {
                    gemm(width, xr, cout, one, cols, View::dense(0, width, true), g, View::dense(0, cout, false), one, buf, View::dense(0, cout, false));
                });
                self.acc(grads, *b, |buf| {
                    for row in g.chunks(cout) {
                        add_into(buf, row);
                    }
                });
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); xr * width];
                    gemm(xr, cout, width, one, g, View::dense(0, cout, false), self.data(*w), View::dense(0, cout, true), T::zero(), &mut dcols, View::dense(0, width, false));
                    self.acc(grads, *x, |buf| col2im_add(&dcols, buf, *geom, cin, *kernel));
                }
            }
            Op::AvgPool2(x, geom) => {
                let c = self.dims(*x).1;
                let quarter = T::lit(0.25);
                self.acc(grads, *x, |buf| {
                    for (o, src) in pool_sources(*geom) {
                        for (d, &s) in buf[src * c..(src + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                            *d += s * quarter;
                        }
                    }
                });
            }
            Op::Upsample2(x, geom) => {
                let c = self.dims(*x).1;
                self.acc(grads, *x, |buf| {
                    for (src, dst) in pool_sources(geom.doubled()) {
                        add_into(&mut buf[src * c..(src + 1) * c], &g[dst * c..(dst + 1) * c]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let mut start = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    self.acc(grads, p, |buf| {
                        for (drow, grow) in buf.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[start..start + w]);
                        }
                    });
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, |buf| add_into(buf, &g[start..start + len]));
                    start += len;
                }
            }
            Op::SliceRows(x, start) => {
                let cols = self.dims(*x).1;
                self.acc(grads, *x, |buf| add_into(&mut buf[start * cols..start * cols + g.len()], g));
            }
            Op::SliceCols(x, start) => {
                let cols = self.dims(*x).1;
                let len = node.value.dims2().1;
                self.acc(grads, *x, |buf| {
                    for (drow, grow) in buf.chunks_mut(cols).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let cols = self.dims(*x).1;
                self.acc(grads, *x, |buf| {
                    for (s, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * cols..(i + 1) * cols], &g[s * cols..(s + 1) * cols]);
                    }
                });
            }
            Op::ScatterRows { base, src, idx } => {
                let cols = self.dims(*base).1;
                self.acc(grads, *base, |buf| {
                    add_into(buf, g);
                    for &i in idx {
                        for (d, &s) in buf[i * cols..(i + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *d -= s;
                        }
                    }
                });
                self.acc(grads, *src, |buf| {
                    for (s, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[s * cols..(s + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::GroupMean(x, group) => {
                let cols = self.dims(*x).1;
                let inv = T::one() / T::lit(*group as f64);
                self.acc(grads, *x, |buf| {
                    for (r, drow) in buf.chunks_mut(cols).enumerate() {
                        let grow = &g[(r / group) * cols..(r / group + 1) * cols];
                        for (d, &s) in drow.iter_mut().zip(grow) {
                            *d += s * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|d| *d += s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.dims(*logits).1;
                let scale = g[0] / T::lit(targets.len() as f64);
                self.acc(grads, *logits, |buf| {
                    for (r, (drow, prow)) in buf.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                        for (c, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if c == targets[r] { T::one() } else { T::zero() };
                            *d += scale * (p - target);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |buf| add_into(buf, g)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qr, qc) = self.dims(q);
        let vc = self.dims(v).1;
        let AttnShape {
            heads,
            q_len: n,
            kv_len: m,
            ..
        } = shape;
        let batch = qr / n;
        let (dq, dv) = (qc / heads, vc / heads);
        let scale = T::one() / T::lit(dq as f64).sqrt();
        let one = T::one();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let need_q = self.requires_grad(q);
        let need_k = self.requires_grad(k);
        let mut ds_all = vec![T::zero(); if need_q || need_k { probs.len() } else { 0 }];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * n * m;
                let g_view = View::dense(b * n * vc + h * dv, vc, false);
                self.acc(grads, v, |buf| {
                    gemm(m, n, dv, one, probs, View { offset: p_off, row_stride: 1, col_stride: m }, g, g_view, one, buf, View::dense(b * m * vc + h * dv, vc, false));
                });
                if ds_all.is_empty() {
                    continue;
                }
                let ds = &mut ds_all[p_off..p_off + n * m];
                gemm(n, dv, m, one, g, g_view, vd, View { offset: b * m * vc + h * dv, row_stride: 1, col_stride: vc }, T::zero(), ds, View::dense(0, m, false));
                for i in 0..n {
                    let prow = &probs[p_off + i * m..p_off + (i + 1) * m];
                    let drow = &mut ds[i * m..(i + 1) * m];
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - dot) * scale;
                    }
                }
            }
        }
        if ds_all.is_empty() {
            return;
        }
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * n * m;
                self.acc(grads, q, |buf| {
                    gemm(n, m, dq, one, &ds_all, View::dense(p_off, m, false), kd, View::dense(b * m * qc + h * dq, qc, false), one, buf, View::dense(b * n * qc + h * dq, qc, false));
                });
                self.acc(grads, k, |buf| {
                    gemm(m, n, dq, one, &ds_all, View { offset: p_off, row_stride: 1, col_stride: m }, qd, View::dense(b * n * qc + h * dq, qc, false), one, buf, View::dense(b * m * qc + h * dq, qc, false));
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad(v) {
            return;
        }
        let numel = self.value(v).numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
        f(buf);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(pooled index, source index)` pairs: each source pixel of `geom` with its
/// 2×2 pooling cell in the halved layout.
fn pool_sources(geom: Spatial) -> impl Iterator<Item = (usize, usize)> {
    let (h, w) = (geom.h, geom.w);
    (0..geom.n).flat_map(move |img| {
        (0..h).flat_map(move |y| {
            (0..w).map(move |x| {
                let pooled = (img * (h / 2) + y / 2) * (w / 2) + x / 2;
                (pooled, (img * h + y) * w + x)
            })
        })
    })
}

fn im2col<T: Real>(x: &[T], geom: Spatial, cin: usize, kernel: usize) -> Vec<T> {
    let pad = (kernel / 2) as isize;
    let width = kernel * kernel * cin;
    let mut cols = vec![T::zero(); geom.rows() * width];
    let (h, w) = (geom.h as isize, geom.w as isize);
    for img in 0..geom.n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((img as isize * h + y) * w + xx) as usize;
                for ky in 0..kernel as isize {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..kernel as isize {
                        let sx = xx + kx - pad;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let src = ((img as isize * h + sy) * w + sx) as usize;
                        let dst = row * width + ((ky as usize) * kernel + kx as usize) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src * cin..(src + 1) * cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], dx: &mut [T], geom: Spatial, cin: usize, kernel: usize) {
    let pad = (kernel / 2) as isize;
    let width = kernel * kernel * cin;
    let (h, w) = (geom.h as isize, geom.w as isize);
    for img in 0..geom.n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((img as isize * h + y) * w + xx) as usize;
                for ky in 0..kernel as isize {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..kernel as isize {
                        let sx = xx + kx - pad;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let src = ((img as isize * h + sy) * w + sx) as usize;
                        let off = row * width + ((ky as usize) * kernel + kx as usize) * cin;
                        add_into(&mut dx[src * cin..(src + 1) * cin], &dcols[off..off + cin]);
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients for every leaf that required one.
/// Trainable parameters the loss does not depend on get zero gradients.
#[derive(Debug)]
pub struct Gradients<T> {
    by_param: BTreeMap<String, Tensor<T>>,
    by_var: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&v)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_param
    }
}
