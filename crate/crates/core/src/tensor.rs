//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live on a [`Tape`]; every operation appends a node holding its
//! forward result and enough saved state to run its vector-Jacobian product.
//! Trainable values live in a [`ParamStore`] and enter a tape through
//! [`Tape::param`]. [`Tape::backward`] accumulates into the store's gradient
//! slots, so callers zero them explicitly between optimizer steps.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor trainable and allocates a zeroed gradient slot.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Element at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut offset = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            offset = offset * dim + ix;
        }
        self.data[offset]
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        if !self.requires_grad {
            return;
        }
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor, e.g. `region.block0.qkv.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateParameter(name));
        }
        let tensor = if tensor.requires_grad {
            tensor
        } else {
            tensor.with_grad()
        };
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_shared: bool,
    b_shared: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, geom: MatMulGeom },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    MaskKeys { a: usize, keep: Vec<bool>, keys: usize, per_batch: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Reshape { a: usize },
    Narrow { a: usize, axis: usize, start: usize },
    PrependToken { x: usize, token: usize },
    SumAll { a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn matmul_geom(a: &[usize], b: &[usize]) -> Result<(MatMulGeom, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let (batch_dims, a_shared, b_shared) = if a_batch == b_batch {
        (a_batch, false, false)
    } else if b_batch.is_empty() {
        (a_batch, false, true)
    } else if a_batch.is_empty() {
        (b_batch, true, false)
    } else {
        return Err(mismatch());
    };
    let batch = batch_dims.iter().product();
    let mut out = batch_dims.to_vec();
    out.push(m);
    out.push(n);
    Ok((
        MatMulGeom {
            batch,
            m,
            k,
            n,
            a_shared,
            b_shared,
        },
        out,
    ))
}

fn matmul_data(a: &[f64], b: &[f64], g: MatMulGeom) -> Vec<f64> {
    let MatMulGeom { batch, m, k, n, .. } = g;
    let mut out = vec![0.0; batch * m * n];
    if g.b_shared {
        gemm_nn(a, b, &mut out, batch * m, k, n);
        return out;
    }
    for t in 0..batch {
        let aoff = if g.a_shared { 0 } else { t * m * k };
        gemm_nn(
            &a[aoff..aoff + m * k],
            &b[t * k * n..(t + 1) * k * n],
            &mut out[t * m * n..(t + 1) * m * n],
            m,
            k,
            n,
        );
    }
    out
}

fn softmax_rows(x: &[f64], width: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, (row, dst)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMaskedRow { row: r });
        }
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = libm::exp(v - max);
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn erf_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn erf_gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// First element of a node, used for scalar losses and logits.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Self::raw(t.shape, t.data);
        self.push(t, Op::Leaf, &[])
    }

    /// Enters a stored parameter; backward accumulates into its grad slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = &store.get(id).tensor;
        let t = Self::raw(src.shape.clone(), src.data.clone());
        self.push(t, Op::Param(id), &[])
    }

    /// Batched matrix product over the last two axes. Leading batch axes must
    /// match, or one operand must be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (geom, shape) = matmul_geom(self.shape(a), self.shape(b))?;
        let data = matmul_data(&self.value(a).data, &self.value(b).data, geom);
        Ok(self.push(
            Self::raw(shape, data),
            Op::MatMul {
                a: a.0,
                b: b.0,
                geom,
            },
            &[a.0, b.0],
        ))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias and positional
    /// broadcasting over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = &self.value(b).data;
        let data = self
            .value(a)
            .data
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(Self::raw(shape, data), Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::raw(shape, data), Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::raw(shape, data), Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Self::raw(shape, data), Op::Scale { a: a.0, factor }, &[a.0])
    }

    /// Sets key columns to negative infinity. `a` has shape `[B, .., K]` and
    /// `keep` holds `B * K` flags; a `false` flag masks that key column for
    /// every query row of that batch entry.
    pub fn mask_keys(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let keys = *shape.last().unwrap_or(&0);
        let batch = shape.first().copied().unwrap_or(0);
        if shape.len() < 2 || keep.len() != batch * keys {
            return Err(Error::ShapeMismatch {
                op: "mask_keys",
                lhs: shape,
                rhs: vec![keep.len()],
            });
        }
        let per_batch = shape.iter().skip(1).product::<usize>();
        let data = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(e, &v)| {
                let flag = keep[(e / per_batch) * keys + e % keys];
                if flag {
                    v
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Ok(self.push(
            Self::raw(shape, data),
            Op::MaskKeys {
                a: a.0,
                keep: keep.to_vec(),
                keys,
                per_batch,
            },
            &[a.0],
        ))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let data = softmax_rows(&self.value(a).data, width)?;
        Ok(self.push(Self::raw(shape, data), Op::Softmax { a: a.0 }, &[a.0]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [width] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let xs = &self.value(x).data;
        let rows = xs.len() / width;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Self::raw(shape, out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Exact (erf) Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|&x| erf_gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Self::raw(shape, data), Op::Gelu { a: a.0 }, &[a.0])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&ax| ax < shape.len() && !core::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (data, out_shape) = permute_data(&self.value(a).data, &shape, axes);
        Ok(self.push(
            Self::raw(out_shape, data),
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
            &[a.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data.clone();
        Ok(self.push(Self::raw(shape.to_vec(), data), Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Self::raw(out_shape, data),
            Op::Narrow {
                a: a.0,
                axis,
                start,
            },
            &[a.0],
        ))
    }

    /// Prepends `token` (shape `[D]`) to every sequence of `x` (`[B, T, D]`).
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ts = self.shape(token);
        if shape.len() != 3 || ts != [shape[2]] {
            return Err(Error::ShapeMismatch {
                op: "prepend_token",
                lhs: shape,
                rhs: ts.to_vec(),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let tok = &self.value(token).data;
        let xs = &self.value(x).data;
        let mut data = Vec::with_capacity(b * (t + 1) * d);
        for s in 0..b {
            data.extend_from_slice(tok);
            data.extend_from_slice(&xs[s * t * d..(s + 1) * t * d]);
        }
        Ok(self.push(
            Self::raw(vec![b, t + 1, d], data),
            Op::PrependToken {
                x: x.0,
                token: token.0,
            },
            &[x.0, token.0],
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Self::raw(vec![1], vec![s]), Op::SumAll { a: a.0 }, &[a.0])
    }

    /// Reverse pass from a scalar `loss`, adding gradients into every
    /// reachable parameter of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[target].needs_grad {
                    return;
                }
                let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.get_mut(*id).tensor.accumulate_grad(&g),
                Op::MatMul { a, b, geom } => {
                    let MatMulGeom { batch, m, k, n, .. } = *geom;
                    let av = &nodes[*a].value.data;
                    let bv = &nodes[*b].value.data;
                    acc(*a, &mut |da| {
                        if geom.b_shared {
                            gemm_nt(&g, bv, da, batch * m, n, k);
                        } else {
                            for t in 0..batch {
                                let aoff = if geom.a_shared { 0 } else { t * m * k };
                                gemm_nt(
                                    &g[t * m * n..(t + 1) * m * n],
                                    &bv[t * k * n..(t + 1) * k * n],
                                    &mut da[aoff..aoff + m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                    });
                    acc(*b, &mut |db| {
                        if geom.b_shared {
                            gemm_tn(av, &g, db, batch * m, k, n);
                        } else {
                            for t in 0..batch {
                                let aoff = if geom.a_shared { 0 } else { t * m * k };
                                gemm_tn(
                                    &av[aoff..aoff + m * k],
                                    &g[t * m * n..(t + 1) * m * n],
                                    &mut db[t * k * n..(t + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc(*a, &mut |da| da.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                    acc(*b, &mut |db| {
                        let w = db.len();
                        for row in g.chunks(w) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
                Op::Sub { a, b } => {
                    acc(*a, &mut |da| da.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                    acc(*b, &mut |db| db.iter_mut().zip(&g).for_each(|(d, v)| *d -= v));
                }
                Op::Mul { a, b } => {
                    let av = &nodes[*a].value.data;
                    let bv = &nodes[*b].value.data;
                    acc(*a, &mut |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * bv[i];
                        }
                    });
                    acc(*b, &mut |db| {
                        for i in 0..db.len() {
                            db[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    acc(*a, &mut |da| da.iter_mut().zip(&g).for_each(|(d, v)| *d += v * factor));
                }
                Op::MaskKeys {
                    a,
                    keep,
                    keys,
                    per_batch,
                } => {
                    acc(*a, &mut |da| {
                        for (e, d) in da.iter_mut().enumerate() {
                            if keep[(e / per_batch) * keys + e % keys] {
                                *d += g[e];
                            }
                        }
                    });
                }
                Op::Softmax { a } => {
                    let y = &node.value.data;
                    let width = *node.value.shape.last().unwrap_or(&1);
                    acc(*a, &mut |da| {
                        for r in 0..y.len() / width {
                            let ys = &y[r * width..(r + 1) * width];
                            let gs = &g[r * width..(r + 1) * width];
                            let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                            for j in 0..width {
                                da[r * width + j] += ys[j] * (gs[j] - dot);
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
                    let width = nodes[*gamma].value.numel();
                    let gv = &nodes[*gamma].value.data;
                    acc(*gamma, &mut |dg| {
                        for (r, gr) in g.chunks(width).enumerate() {
                            for j in 0..width {
                                dg[j] += gr[j] * xhat[r * width + j];
                            }
                        }
                    });
                    acc(*beta, &mut |db| {
                        for gr in g.chunks(width) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                    });
                    acc(*x, &mut |dx| {
                        let w = width as f64;
                        for (r, gr) in g.chunks(width).enumerate() {
                            let xh = &xhat[r * width..(r + 1) * width];
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..width {
                                let d = gr[j] * gv[j];
                                mean_d += d;
                                mean_dx += d * xh[j];
                            }
                            mean_d /= w;
                            mean_dx /= w;
                            for j in 0..width {
                                let d = gr[j] * gv[j];
                                dx[r * width + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                            }
                        }
                    });
                }
                Op::Gelu { a } => {
                    let xv = &nodes[*a].value.data;
                    acc(*a, &mut |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * erf_gelu_grad(xv[i]);
                        }
                    });
                }
                Op::Permute { a, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (back, _) = permute_data(&g, &node.value.shape, &inverse);
                    acc(*a, &mut |da| da.iter_mut().zip(&back).for_each(|(d, v)| *d += v));
                }
                Op::Reshape { a } => {
                    acc(*a, &mut |da| da.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                }
                Op::Narrow { a, axis, start } => {
                    let src_shape = &nodes[*a].value.shape;
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let dim = src_shape[*axis];
                    let len = node.value.shape[*axis];
                    acc(*a, &mut |da| {
                        for o in 0..outer {
                            let dst = (o * dim + start) * inner;
                            let srcoff = o * len * inner;
                            for i in 0..len * inner {
                                da[dst + i] += g[srcoff + i];
                            }
                        }
                    });
                }
                Op::PrependToken { x, token } => {
                    let s = &node.value.shape;
                    let (b, t1, d) = (s[0], s[1], s[2]);
                    acc(*token, &mut |dt| {
                        for seq in 0..b {
                            let row = &g[seq * t1 * d..seq * t1 * d + d];
                            dt.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    });
                    acc(*x, &mut |dx| {
                        let t = t1 - 1;
                        for seq in 0..b {
                            let src = &g[(seq * t1 + 1) * d..(seq + 1) * t1 * d];
                            let dst = &mut dx[seq * t * d..(seq + 1) * t * d];
                            dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    });
                }
                Op::SumAll { a } => {
                    let g0 = g[0];
                    acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g0));
                }
            }
        }
        Ok(())
    }
}

/// Standalone forward ops on plain tensors.
pub mod ops {
    use super::*;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (geom, shape) = matmul_geom(&a.shape, &b.shape)?;
        Tensor::new(shape, matmul_data(&a.data, &b.data, geom))
    }

    /// Softmax over the last axis with max subtraction; negative-infinity
    /// entries map to exactly zero.
    pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
        let width = *x.shape.last().unwrap_or(&1);
        Tensor::new(x.shape.clone(), softmax_rows(&x.data, width)?)
    }

    pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant(x.clone()),
            tape.constant(gamma.clone()),
            tape.constant(beta.clone()),
        );
        let y = tape.layer_norm(xv, gv, bv, eps)?;
        Ok(tape.value(y).clone())
    }

    pub fn gelu(x: &Tensor) -> Tensor {
        let data = x.data.iter().map(|&v| erf_gelu(v)).collect();
        Tape::raw(x.shape.clone(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ops::matmul(&eye, &m).unwrap().data(), m.data());
        let col = t(&[2, 1], &[5.0, 6.0]);
        let out = ops::matmul(&m, &col).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        match ops::matmul(&a, &b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
        let out = ops::matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 1, 2]);
        assert_eq!(out.data(), &[1.0, 4.0, 3.0, 8.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = ops::softmax_lastdim(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = ops::softmax_lastdim(&t(&[3], &[0.0, f64::NEG_INFINITY, 0.0])).unwrap();
        assert_eq!(m.data(), &[0.5, 0.0, 0.5]);
        let s = ops::softmax_lastdim(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (v, e) in s.data().iter().zip(expected) {
            assert!((v - e).abs() < 5e-9, "{v} vs {e}");
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let x = t(&[2, 2], &[0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(
            ops::softmax_lastdim(&x).unwrap_err(),
            Error::AllMaskedRow { row: 1 }
        );
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = t(&[2], &[0.0, 0.0]);
        let c = ops::layer_norm(&t(&[2], &[3.0, 3.0]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let n = ops::layer_norm(&t(&[2], &[1.0, -1.0]), &ones, &zeros, 1e-12).unwrap();
        assert!((n.data()[0] - 1.0).abs() < 1e-9 && (n.data()[1] + 1.0).abs() < 1e-9);
        let a = ops::layer_norm(&t(&[2], &[0.0, 2.0]), &t(&[2], &[2.0, 2.0]), &ones, 1e-12).unwrap();
        assert!((a.data()[0] + 1.0).abs() < 1e-9 && (a.data()[1] - 3.0).abs() < 1e-9);
        assert!(ops::layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        let g = ops::gelu(&t(&[4], &[0.0, 1.0, 40.0, -40.0]));
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 0.8413447).abs() < 1e-7);
        assert!((g.data()[2] - 40.0).abs() < 1e-12);
        assert!(g.data()[3].abs() < 1e-12);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let s = tape.sum_all(wv);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).tensor.grad().unwrap(), &[1.0, 1.0]);

        store.zero_grad();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).tensor.grad().unwrap(), &[2.0, 4.0]);

        // additive accumulation without zeroing
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).tensor.grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        assert!(matches!(
            tape.backward(wv, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[1, 1, 2]), tape.value(x).at(&[1, 2, 1]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1, 3], &[0.3, -0.2, 0.5])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let m = tape.mask_keys(wv, &[true, false, true]).unwrap();
        let s = tape.softmax_lastdim(m).unwrap();
        let c = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let p = tape.mul(s, c).unwrap();
        let l = tape.sum_all(p);
        tape.backward(l, &mut store).unwrap();
        let g = store.get(w).tensor.grad().unwrap();
        assert_eq!(g[1], 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
