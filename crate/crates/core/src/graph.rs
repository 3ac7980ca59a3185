//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every op in execution order, so node indices are a
//! valid topological order. Parameters from a [`ParamStore`] are bound
//! lazily, once per graph: a weight used twice (tied embeddings) is one
//! node and its gradient is the sum over both uses.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask `[q, k]`; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Shape(format!("mask data {} does not match [{rows}, {cols}]", allow.len())));
        }
        Ok(Mask { rows, cols, allow })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        Mask { rows, cols, allow }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, allow: vec![true; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows rendered as `1`/`0` strings.
    pub fn to_grid(&self) -> Vec<String> {
        (0..self.rows).map(|i| self.row(i).iter().map(|&b| if b { '1' } else { '0' }).collect()).collect()
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    GroupNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: T },
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Embedding { table: Var, ids: Vec<u32> },
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Transpose2d(Var),
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    GatherBias { table: Var, index: Arc<Vec<Option<u32>>> },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Sum(Var),
    WeightedSum(Var, Tensor<T>),
    MeanRows(Var),
    Patchify { x: Var, patch: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(_) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Gelu(_) => "gelu",
            Op::Conv2d { .. } => "conv2d",
            Op::Embedding { .. } => "embedding",
            Op::Concat(_) => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose2d(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads(_) => "merge_heads",
            Op::GatherBias { .. } => "gather_bias",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::MeanRows(_) => "mean_rows",
            Op::Patchify { .. } => "patchify",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    /// Empty for `Param` nodes, whose value lives in the store.
    value: Tensor<T>,
    trainable: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<rand_chacha::ChaCha8Rng>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph with no parameter store; inputs only.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: None, bound: Vec::new(), dropout_rng: None }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph { nodes: Vec::new(), params: Some(params), bound: vec![None; params.len()], dropout_rng: None }
    }

    /// Enable dropout for this pass; without it [`Graph::dropout`] is the
    /// identity.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        use rand::SeedableRng;
        self.dropout_rng = Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { op, value, trainable: false });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.expect("param node without store").tensor(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Constant or trainable input leaf.
    pub fn input(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Bind parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let trainable = self.params.expect("graph has no parameter store").get(id).trainable;
        self.nodes.push(Node { op: Op::Param(id), value: Tensor::zeros(&[0]), trainable });
        let v = Var(self.nodes.len() - 1);
        self.bound[id] = Some(v);
        v
    }

    /// The node bound to parameter `id`, if the forward pass used it.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id).copied().flatten()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(Op::Add(a, b), out)
    }

    /// `a[.., n] + b[n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rank() != 1 || va.last_dim() != vb.len() {
            return Err(shape_err(format!("add_bias: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = vb.len();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(Op::AddBias(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.len() != 1 {
            return Err(shape_err(format!("mul_scalar: scalar operand {:?}", vs.shape())));
        }
        let c = vs.data()[0];
        let out = self.value(x).map(|v| v * c);
        self.push(Op::MulScalar(x, s), out)
    }

    /// `a[.., m, k] x b[.., k, n]`. `b` is either rank 2 (shared across the
    /// batch) or carries the same batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., m, k] x b[.., n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let dims = MatDims::resolve(va.shape(), vb.shape(), trans_b)?;
        let mut out = vec![T::ZERO; dims.batch * dims.m * dims.n];
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let shared_bt = if trans_b && dims.shared_b { Some(kernels::transposed(vb.data(), n, k)) } else { None };
        for bi in 0..dims.batch {
            let a_s = &va.data()[bi * m * k..(bi + 1) * m * k];
            let b_off = if dims.shared_b { 0 } else { bi * k * n };
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                match &shared_bt {
                    Some(bt) => kernels::gemm(a_s, bt, o, m, k, n),
                    None => {
                        let bt = kernels::transposed(&vb.data()[b_off..b_off + k * n], n, k);
                        kernels::gemm(a_s, &bt, o, m, k, n);
                    }
                }
            } else {
                kernels::gemm(a_s, &vb.data()[b_off..b_off + k * n], o, m, k, n);
            }
        }
        let mut shape = va.shape()[..va.rank() - 1].to_vec();
        shape.push(n);
        self.push(Op::MatMul { a, b, trans_b }, Tensor::from_parts(shape, out))
    }

    /// Softmax over the last axis of `x[.., q, k]`; entries where `mask`
    /// is false get probability exactly 0 and receive no gradient.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<Arc<Mask>>) -> Result<Var> {
        let vx = self.value(x);
        let k = vx.last_dim();
        let q = if vx.rank() >= 2 { vx.shape()[vx.rank() - 2] } else { 1 };
        if let Some(m) = &mask {
            if m.rows() != q || m.cols() != k {
                return Err(shape_err(format!(
                    "masked_softmax: mask [{}, {}] vs logits {:?}",
                    m.rows(),
                    m.cols(),
                    vx.shape()
                )));
            }
        }
        let mut out = vec![T::ZERO; vx.len()];
        for (r, (src, dst)) in vx.data().chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let allow = mask.as_ref().map(|m| m.row(r % q));
            let visible = |j: usize| allow.is_none_or(|a| a[j]);
            let mut mx: Option<T> = None;
            for (j, &v) in src.iter().enumerate() {
                if visible(j) {
                    mx = Some(match mx {
                        Some(m) if m >= v => m,
                        _ => v,
                    });
                }
            }
            let mx = mx.ok_or(Error::EmptyAttentionRow { row: r % q })?;
            let mut total = T::ZERO;
            for (j, (&v, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if visible(j) {
                    *o = (v - mx).exp();
                    total += *o;
                }
            }
            for o in dst.iter_mut() {
                *o = *o / total;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(Op::Softmax(x), t)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Normalize each row of `x[.., d]` to zero mean and unit variance,
    /// then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.last_dim();
        if d == 0 || vg.shape() != [d] || vb.shape() != [d] {
            return Err(shape_err(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let rows = vx.rows();
        let mut xhat = vec![T::ZERO; vx.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; vx.len()];
        for r in 0..rows {
            let src = vx.row(r);
            let mean = src.iter().copied().sum::<T>() / dn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (src[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, t)
    }

    /// Group normalization with a single group over `x[C, H, W]` and a
    /// per-channel affine.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vx.rank() != 3 || vg.shape() != [vx.shape()[0]] || vb.shape() != [vx.shape()[0]] {
            return Err(shape_err(format!(
                "group_norm: x {:?}, gain {:?}, bias {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let n = T::from_f64(vx.len() as f64);
        let mean = vx.data().iter().copied().sum::<T>() / n;
        let var = vx.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::ONE / (var + T::from_f64(eps)).sqrt();
        let hw = vx.shape()[1] * vx.shape()[2];
        let xhat: Vec<T> = vx.data().iter().map(|&v| (v - mean) * inv).collect();
        let mut out = vec![T::ZERO; vx.len()];
        for c in 0..vx.shape()[0] {
            for i in c * hw..(c + 1) * hw {
                out[i] = xhat[i] * vg.data()[c] + vb.data()[c];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(Op::GroupNorm { x, gain, bias, xhat, inv_std: inv }, t)
    }

    /// Inverted dropout with keep-scaling; identity when `rate` is 0 or the
    /// graph has no dropout seed.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        use rand::Rng;
        if rate <= 0.0 || self.dropout_rng.is_none() {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..numel(&shape)).map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep }).collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push(Op::Gelu(x), out)
    }

    /// Cross-correlation of `x[C_in, H, W]` with `w[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 4 || vw.shape()[1] != vx.shape()[0] || stride == 0 {
            return Err(shape_err(format!("conv2d: input {:?}, kernel {:?}, stride {stride}", vx.shape(), vw.shape())));
        }
        let geom = ConvGeom {
            c_in: vx.shape()[0],
            h: vx.shape()[1],
            w: vx.shape()[2],
            kh: vw.shape()[2],
            kw: vw.shape()[3],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(shape_err(format!(
                "conv2d: kernel {:?} larger than padded input {:?} (pad {pad})",
                vw.shape(),
                vx.shape()
            )));
        }
        let c_out = vw.shape()[0];
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err(format!("conv2d: bias {:?} for {c_out} filters", self.value(b).shape())));
            }
        }
        let (oh, ow) = geom.out_hw();
        let cols = kernels::im2col(vx.data(), &geom);
        let mut out = vec![T::ZERO; c_out * oh * ow];
        kernels::gemm(vw.data(), &cols, &mut out, c_out, geom.col_rows(), oh * ow);
        if let Some(b) = b {
            let vb = self.value(b);
            for (c, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bc = vb.data()[c];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let t = Tensor::from_parts(vec![c_out, oh, ow], out);
        self.push(Op::Conv2d { x, w, b, geom, cols }, t)
    }

    /// Rows of `table[V, D]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(shape_err(format!("embedding: table {:?}", vt.shape())));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(shape_err(format!("embedding: id {id} >= table rows {v}")));
            }
            out.extend_from_slice(vt.row(id as usize));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(Op::Embedding { table, ids: ids.to_vec() }, t)
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.rank() == 0 || vp.shape()[1..] != tail[..] {
                return Err(shape_err(format!("concat: part {:?} vs trailing {:?}", vp.shape(), tail)));
            }
            rows += vp.shape()[0];
            data.extend_from_slice(vp.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(shape, data))
    }

    /// `x[start..end]` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 || start > end || end > vx.shape()[0] {
            return Err(shape_err(format!("slice_rows {start}..{end} of {:?}", vx.shape())));
        }
        let inner: usize = vx.shape()[1..].iter().product();
        let data = vx.data()[start * inner..end * inner].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = end - start;
        self.push(Op::SliceRows { x, start }, Tensor::from_parts(shape, data))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        self.push(Op::Transpose2d(x), t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), t)
    }

    /// `[T, H*dh] -> [H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || heads == 0 || !vx.shape()[1].is_multiple_of(heads) {
            return Err(shape_err(format!("split_heads: {:?} into {heads}", vx.shape())));
        }
        let (t, d) = (vx.shape()[0], vx.shape()[1]);
        let dh = d / heads;
        let mut out = vec![T::ZERO; t * d];
        for i in 0..t {
            for h in 0..heads {
                out[(h * t + i) * dh..(h * t + i + 1) * dh]
                    .copy_from_slice(&vx.data()[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        self.push(Op::SplitHeads { x, heads }, Tensor::from_parts(vec![heads, t, dh], out))
    }

    /// `[H, T, dh] -> [T, H*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(shape_err(format!("merge_heads: {:?}", vx.shape())));
        }
        let (heads, t, dh) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let d = heads * dh;
        let mut out = vec![T::ZERO; t * d];
        for h in 0..heads {
            for i in 0..t {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&vx.data()[(h * t + i) * dh..(h * t + i + 1) * dh]);
            }
        }
        self.push(Op::MergeHeads(x), Tensor::from_parts(vec![t, d], out))
    }

    /// Expand a per-head bias table `[H, B]` into attention logits
    /// `[H, q, k]` using a flat `q*k` bucket index; `None` entries are 0.
    pub fn gather_bias(&mut self, table: Var, index: Arc<Vec<Option<u32>>>, q: usize, k: usize) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || index.len() != q * k {
            return Err(shape_err(format!(
                "gather_bias: table {:?}, index {} for [{q}, {k}]",
                vt.shape(),
                index.len()
            )));
        }
        let (heads, buckets) = (vt.shape()[0], vt.shape()[1]);
        let mut out = vec![T::ZERO; heads * q * k];
        for h in 0..heads {
            for (p, ix) in index.iter().enumerate() {
                if let Some(b) = ix {
                    let b = *b as usize;
                    if b >= buckets {
                        return Err(shape_err(format!("gather_bias: bucket {b} >= {buckets}")));
                    }
                    out[h * q * k + p] = vt.data()[h * buckets + b];
                }
            }
        }
        self.push(Op::GatherBias { table, index }, Tensor::from_parts(vec![heads, q, k], out))
    }

    /// Mean negative log-likelihood of `targets` under `logits[T, V]`,
    /// over positions where `loss_mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], loss_mask: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != targets.len() || targets.len() != loss_mask.len() {
            return Err(shape_err(format!(
                "cross_entropy: logits {:?}, {} targets, {} mask entries",
                vl.shape(),
                targets.len(),
                loss_mask.len()
            )));
        }
        let v = vl.shape()[1];
        let count = loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![T::ZERO; vl.len()];
        let mut total = T::ZERO;
        for (t, (&tgt, &m)) in targets.iter().zip(loss_mask).enumerate() {
            if !m {
                continue;
            }
            if tgt as usize >= v {
                return Err(Error::TargetOutOfRange { id: tgt, vocab: v });
            }
            let row = vl.row(t);
            let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
            let mut z = T::ZERO;
            for &x in row {
                z += (x - mx).exp();
            }
            let lse = mx + z.ln();
            total += lse - row[tgt as usize];
            for (p, &x) in probs[t * v..(t + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / T::from_f64(count as f64);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: loss_mask.to_vec(), probs, count },
            Tensor::scalar(loss),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// `sum(x * w)` for a constant weight tensor; handy for Jacobian probes.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != w.shape() {
            return Err(shape_err(format!("weighted_sum: {:?} vs {:?}", vx.shape(), w.shape())));
        }
        let mut acc = T::ZERO;
        for (&a, &b) in vx.data().iter().zip(w.data()) {
            acc += a * b;
        }
        self.push(Op::WeightedSum(x, w), Tensor::scalar(acc))
    }

    /// Mean over the rows of `x[R, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || vx.shape()[0] == 0 {
            return Err(shape_err(format!("mean_rows: {:?}", vx.shape())));
        }
        let (r, d) = (vx.shape()[0], vx.shape()[1]);
        let mut out = vec![T::ZERO; d];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(vx.row(i)) {
                *o += v;
            }
        }
        let inv = T::ONE / T::from_f64(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanRows(x), Tensor::from_parts(vec![d], out))
    }

    /// Cut `x[C, H, W]` into non-overlapping `P x P` patches in raster
    /// order, each flattened channel-major: `[(H/P)(W/P), C*P*P]`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || patch == 0 || !vx.shape()[1].is_multiple_of(patch) || !vx.shape()[2].is_multiple_of(patch)
        {
            return Err(shape_err(format!("patchify: {:?} with patch {patch}", vx.shape())));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (gh, gw) = (h / patch, w / patch);
        let cols = c * patch * patch;
        let mut out = vec![T::ZERO; gh * gw * cols];
        for gi in 0..gh {
            for gj in 0..gw {
                let r = gi * gw + gj;
                for ch in 0..c {
                    for pi in 0..patch {
                        for pj in 0..patch {
                            out[r * cols + (ch * patch + pi) * patch + pj] =
                                vx.data()[(ch * h + gi * patch + pi) * w + gj * patch + pj];
                        }
                    }
                }
            }
        }
        self.push(Op::Patchify { x, patch }, Tensor::from_parts(vec![gh * gw, cols], out))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() != 0 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddBias(a, b) => {
                accumulate(grads, *a, g.clone());
                let n = self.value(*b).len();
                let mut gb = vec![T::ZERO; n];
                for row in g.data().chunks(n) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *b, Tensor::from_parts(vec![n], gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                let gb = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::MulScalar(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let c = vs.data()[0];
                let mut dot = T::ZERO;
                for (&a, &b) in g.data().iter().zip(vx.data()) {
                    dot += a * b;
                }
                accumulate(grads, *x, g.map(|v| v * c));
                accumulate(grads, *s, Tensor::from_parts(vs.shape().to_vec(), vec![dot]));
            }
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(*a, *b, *trans_b, g, grads),
            Op::Softmax(x) => {
                let p = &node.value;
                let k = p.last_dim();
                let mut gx = vec![T::ZERO; p.len()];
                for ((pr, gr), out) in p.data().chunks(k).zip(g.data().chunks(k)).zip(gx.chunks_mut(k)) {
                    let mut dot = T::ZERO;
                    for (&pv, &gv) in pr.iter().zip(gr) {
                        dot += pv * gv;
                    }
                    for ((o, &pv), &gv) in out.iter_mut().zip(pr).zip(gr) {
                        *o = pv * (gv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(p.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let vg = self.value(*gain);
                let d = vg.len();
                let dn = T::from_f64(d as f64);
                let mut gx = vec![T::ZERO; xhat.len()];
                let mut gg = vec![T::ZERO; d];
                let mut gb = vec![T::ZERO; d];
                let mut dxh = vec![T::ZERO; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_d = T::ZERO;
                    let mut mean_dx = T::ZERO;
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                        dxh[j] = gr[j] * vg.data()[j];
                        mean_d += dxh[j];
                        mean_dx += dxh[j] * xr[j];
                    }
                    mean_d = mean_d / dn;
                    mean_dx = mean_dx / dn;
                    for j in 0..d {
                        gx[r * d + j] = inv * (dxh[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_parts(shape, gx));
                accumulate(grads, *gain, Tensor::from_parts(vec![d], gg));
                accumulate(grads, *bias, Tensor::from_parts(vec![d], gb));
            }
            Op::GroupNorm { x, gain, bias, xhat, inv_std } => {
                let vg = self.value(*gain);
                let shape = self.value(*x).shape().to_vec();
                let c = shape[0];
                let hw = shape[1] * shape[2];
                let n = T::from_f64(xhat.len() as f64);
                let mut gg = vec![T::ZERO; c];
                let mut gb = vec![T::ZERO; c];
                let mut dxh = vec![T::ZERO; xhat.len()];
                let mut mean_d = T::ZERO;
                let mut mean_dx = T::ZERO;
                for ch in 0..c {
                    for p in ch * hw..(ch + 1) * hw {
                        gg[ch] += g.data()[p] * xhat[p];
                        gb[ch] += g.data()[p];
                        dxh[p] = g.data()[p] * vg.data()[ch];
                        mean_d += dxh[p];
                        mean_dx += dxh[p] * xhat[p];
                    }
                }
                mean_d = mean_d / n;
                mean_dx = mean_dx / n;
                let gx = dxh.iter().zip(xhat).map(|(&d, &xh)| *inv_std * (d - mean_d - xh * mean_dx)).collect();
                accumulate(grads, *x, Tensor::from_parts(shape, gx));
                accumulate(grads, *gain, Tensor::from_parts(vec![c], gg));
                accumulate(grads, *bias, Tensor::from_parts(vec![c], gb));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let gx = vx.data().iter().zip(g.data()).map(|(&xv, &gv)| gv * kernels::gelu_grad(xv)).collect();
                accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let vw = self.value(*w);
                let c_out = vw.shape()[0];
                let (oh, ow) = geom.out_hw();
                let n = oh * ow;
                let kr = geom.col_rows();
                // dW = dOut x cols^T
                let cols_t = kernels::transposed(cols, kr, n);
                let mut gw = vec![T::ZERO; c_out * kr];
                kernels::gemm(g.data(), &cols_t, &mut gw, c_out, n, kr);
                accumulate(grads, *w, Tensor::from_parts(vw.shape().to_vec(), gw));
                // dcols = W^T x dOut
                let w_t = kernels::transposed(vw.data(), c_out, kr);
                let mut gcols = vec![T::ZERO; kr * n];
                kernels::gemm(&w_t, g.data(), &mut gcols, kr, c_out, n);
                let mut gx = vec![T::ZERO; geom.c_in * geom.h * geom.w];
                kernels::col2im_acc(&gcols, geom, &mut gx);
                accumulate(grads, *x, Tensor::from_parts(vec![geom.c_in, geom.h, geom.w], gx));
                if let Some(b) = b {
                    let gb = g.data().chunks(n).map(|ch| ch.iter().copied().sum::<T>()).collect();
                    accumulate(grads, *b, Tensor::from_parts(vec![c_out], gb));
                }
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut gt = vec![T::ZERO; vt.len()];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&g.data()[t * d..(t + 1) * d]) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(vt.shape().to_vec(), gt));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.len();
                    let part = g.data()[off..off + len].to_vec();
                    accumulate(grads, p, Tensor::from_parts(vp.shape().to_vec(), part));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let inner: usize = vx.shape()[1..].iter().product();
                let mut gx = vec![T::ZERO; vx.len()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::Transpose2d(x) => {
                accumulate(grads, *x, g.transpose().expect("rank 2 gradient"));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::SplitHeads { x, heads } => {
                let shape = self.value(*x).shape().to_vec();
                let (t, d) = (shape[0], shape[1]);
                let dh = d / heads;
                let mut gx = vec![T::ZERO; t * d];
                for i in 0..t {
                    for h in 0..*heads {
                        gx[i * d + h * dh..i * d + (h + 1) * dh]
                            .copy_from_slice(&g.data()[(h * t + i) * dh..(h * t + i + 1) * dh]);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::MergeHeads(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (heads, t, dh) = (shape[0], shape[1], shape[2]);
                let d = heads * dh;
                let mut gx = vec![T::ZERO; t * d];
                for h in 0..heads {
                    for i in 0..t {
                        gx[(h * t + i) * dh..(h * t + i + 1) * dh]
                            .copy_from_slice(&g.data()[i * d + h * dh..i * d + (h + 1) * dh]);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::GatherBias { table, index } => {
                let vt = self.value(*table);
                let (heads, buckets) = (vt.shape()[0], vt.shape()[1]);
                let qk = index.len();
                let mut gt = vec![T::ZERO; vt.len()];
                for h in 0..heads {
                    for (p, ix) in index.iter().enumerate() {
                        if let Some(b) = ix {
                            gt[h * buckets + *b as usize] += g.data()[h * qk + p];
                        }
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(vt.shape().to_vec(), gt));
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let vl = self.value(*logits);
                let v = vl.shape()[1];
                let scale = g.data()[0] / T::from_f64(*count as f64);
                let mut gl = vec![T::ZERO; vl.len()];
                for (t, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        gl[t * v + j] = probs[t * v + j] * scale;
                    }
                    gl[t * v + tgt as usize] -= scale;
                }
                accumulate(grads, *logits, Tensor::from_parts(vl.shape().to_vec(), gl));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::WeightedSum(x, w) => {
                let s = g.data()[0];
                accumulate(grads, *x, w.map(|v| v * s));
            }
            Op::MeanRows(x) => {
                let shape = self.value(*x).shape().to_vec();
                let inv = T::ONE / T::from_f64(shape[0] as f64);
                let mut gx = Vec::with_capacity(numel(&shape));
                for _ in 0..shape[0] {
                    gx.extend(g.data().iter().map(|&v| v * inv));
                }
                accumulate(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::Patchify { x, patch } => {
                let shape = self.value(*x).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let p = *patch;
                let gw_ = w / p;
                let cols = c * p * p;
                let mut gx = vec![T::ZERO; c * h * w];
                for gi in 0..h / p {
                    for gj in 0..gw_ {
                        let r = gi * gw_ + gj;
                        for ch in 0..c {
                            for pi in 0..p {
                                for pj in 0..p {
                                    gx[(ch * h + gi * p + pi) * w + gj * p + pj] +=
                                        g.data()[r * cols + (ch * p + pi) * p + pj];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(shape, gx));
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, trans_b: bool, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (va, vb) = (self.value(a), self.value(b));
        let dims = MatDims::resolve(va.shape(), vb.shape(), trans_b).expect("validated in forward");
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let mut ga = vec![T::ZERO; va.len()];
        let mut gb = vec![T::ZERO; vb.len()];
        for bi in 0..dims.batch {
            let a_s = &va.data()[bi * m * k..(bi + 1) * m * k];
            let g_s = &g.data()[bi * m * n..(bi + 1) * m * n];
            let b_off = if dims.shared_b { 0 } else { bi * k * n };
            let b_s = &vb.data()[b_off..b_off + k * n];
            let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
            let gb_s = &mut gb[b_off..b_off + k * n];
            if trans_b {
                // b is [n, k]: dA = dC b, dB = dC^T A
                kernels::gemm_acc(g_s, b_s, ga_s, m, n, k);
                let g_t = kernels::transposed(g_s, m, n);
                kernels::gemm_acc(&g_t, a_s, gb_s, n, m, k);
            } else {
                // b is [k, n]: dA = dC b^T, dB = A^T dC
                let b_t = kernels::transposed(b_s, k, n);
                kernels::gemm_acc(g_s, &b_t, ga_s, m, n, k);
                let a_t = kernels::transposed(a_s, m, k);
                kernels::gemm_acc(&a_t, g_s, gb_s, k, m, n);
            }
        }
        accumulate(grads, a, Tensor::from_parts(va.shape().to_vec(), ga));
        accumulate(grads, b, Tensor::from_parts(vb.shape().to_vec(), gb));
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatDims {
    fn resolve(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let err = || shape_err(format!("matmul dimension mismatch: {a:?} x {b:?}{}", if trans_b { "^T" } else { "" }));
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if trans_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
        if ka != kb {
            return Err(err());
        }
        let batch_a = &a[..a.len() - 2];
        let batch_b = &b[..b.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(err());
        }
        Ok(MatDims { batch: batch_a.iter().product(), m, k: ka, n, shared_b })
    }
}

/// Gradients for every node reached from the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like its value when unreachable.
    pub fn get_or_zeros(&self, graph: &Graph<'_, T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Per-parameter gradients in store order; unused or unreachable
    /// parameters get zero tensors.
    pub fn param_grads(&self, graph: &Graph<'_, T>) -> Vec<Tensor<T>> {
        let store = graph.params.expect("graph has no parameter store");
        (0..store.len())
            .map(|id| {
                graph
                    .bound_param(id)
                    .and_then(|v| self.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()))
            })
            .collect()
    }

    /// Gradients of every leaf marked trainable, by node.
    pub fn trainable_leaves(&self, graph: &Graph<'_, T>) -> Vec<(Var, Tensor<T>)> {
        graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable && matches!(n.op, Op::Leaf | Op::Param(_)))
            .map(|(i, _)| (Var(i), self.get_or_zeros(graph, Var(i))))
            .collect()
    }
}
