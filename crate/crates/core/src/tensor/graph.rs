use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Node handle on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride and zero-padding of a 2D convolution, `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample2x(Var),
    AvgPool2x2(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SoftmaxLast(Var),
    GatherRows { table: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
    L1Loss(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape for one forward/backward pass.
///
/// Nodes are appended in evaluation order; `backward` walks them in
/// reverse. A graph is consumed by `backward`, so each pass starts from a
/// clean tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad`, or of a parameter.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the parameter gradients into the parameters' `grad` buffers.
    /// Parameters reached more than once accumulate all contributions.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for &(id, node) in &self.params {
            let t = params.get_mut(id);
            match &self.grads[node] {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.len()]),
            }
        }
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Moves a node's value out of the tape (the node keeps an empty husk,
    /// so this is only for results of a finished forward pass).
    pub fn take(&mut self, v: Var) -> Tensor {
        let t = &mut self.nodes[v.0].value;
        let shape = t.shape().to_vec();
        let data = std::mem::take(t.data_mut_vec());
        Tensor::new(&shape, data).expect("node value has consistent shape")
    }

    /// Registers an input. It participates in differentiation iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let value = t.with_requires_grad(false);
        self.push(value, Op::Leaf, rg)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = t.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter; its gradient is reported by `backward`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let value = params.get(id).clone().with_requires_grad(false);
        self.push(value, Op::Param(id), true)
    }

    /// Registers a parameter as a constant (inference, no gradient).
    pub fn param_frozen(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let value = params.get(id).clone().with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {} with {}", shape_str(&sa), shape_str(&sb)))
        })?;
        let mut data = vec![0.0; out.iter().product()];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            kernels::for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(va[ia], vb[ib]));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out, data)?, mk(a, b), rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} × {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[b,m,k] × [b,k,n] → [b,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(
                "bmm",
                format!("{} × {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank-{} input", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(self.value(a).data(), r, c);
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {} along axis {axis}", shape_str(s), shape_str(&base)),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {}", start + len, shape_str(&s)),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Splits `axis` into `n` equal chunks.
    pub fn chunk(&mut self, x: Var, n: usize, axis: usize) -> Result<Vec<Var>> {
        let d = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("chunk", format!("axis {axis} out of range")))?;
        if n == 0 || d % n != 0 {
            return Err(Error::shape("chunk", format!("cannot split {d} into {n} chunks")));
        }
        (0..n).map(|i| self.narrow(x, axis, i * d / n, d / n)).collect()
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, opts: Conv2dOpts) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {} with kernel {}", shape_str(&sx), shape_str(&sw)),
            ));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let geom = ConvGeom::new(c, h, wd, kh, kw, opts.stride, opts.padding)?;
        let (ho, wo) = (geom.ho, geom.wo);
        let mut out = vec![0.0; n * o * ho * wo];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; geom.col_rows() * geom.col_cols()]
        };
        for i in 0..n {
            let xi = &xs[i * c * h * wd..(i + 1) * c * h * wd];
            let oi = &mut out[i * o * ho * wo..(i + 1) * o * ho * wo];
            if geom.is_pointwise() {
                kernels::gemm(o, c, h * wd, ws, false, xi, false, oi, 0.0);
            } else {
                kernels::im2col(xi, &geom, &mut cols);
                kernels::gemm(o, geom.col_rows(), geom.col_cols(), ws, false, &cols, false, oi, 0.0);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::Conv2d { x, w, geom }, rg))
    }

    /// Cross-correlation of `x: [N,C,L]` with `w: [O,C,K]`:
    /// `y[n,o,l] = Σ_{c,k} w[o,c,k] · x[n,c,l·stride + k − padding]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("input {} with kernel {}", shape_str(&sx), shape_str(&sw)),
            ));
        }
        let x4 = self.reshape(x, &[sx[0], sx[1], 1, sx[2]])?;
        let w4 = self.reshape(w, &[sw[0], sw[1], 1, sw[2]])?;
        let y = self.conv2d(
            x4,
            w4,
            Conv2dOpts {
                stride: (1, stride),
                padding: (0, padding),
            },
        )
        .map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("conv1d", detail),
            other => other,
        })?;
        let sy = self.shape(y).to_vec();
        self.reshape(y, &[sy[0], sy[1], sy[3]])
    }

    /// Nearest-neighbour ×2 upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected NCHW, got {}", shape_str(&s))));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?, Op::Upsample2x(x), rg))
    }

    /// 2×2 average pooling of `[N,C,H,W]` with even `H`, `W`.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2x2", format!("needs NCHW with even H, W; got {}", shape_str(&s))));
        }
        let (nc, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; nc * h * w];
        for p in 0..nc {
            for i in 0..h {
                for j in 0..w {
                    let b = (p * 2 * h + 2 * i) * 2 * w + 2 * j;
                    out[(p * h + i) * w + j] =
                        0.25 * (src[b] + src[b + 1] + src[b + 2 * w] + src[b + 2 * w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], h, w], out)?, Op::AvgPool2x2(x), rg))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sin);
        let rg = self.rg(x);
        self.push(v, Op::Sin(x), rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::cos);
        let rg = self.rg(x);
        self.push(v, Op::Cos(x), rg)
    }

    /// Normalizes each leading-axis sample over all remaining axes to zero
    /// mean and unit variance. Affine terms are applied by the caller.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("layer_norm", format!("needs a leading batch axis, got {}", shape_str(&s))));
        }
        let n = s[0];
        let m: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for (o, v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::LayerNorm { x, rstd }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row, orow) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::SoftmaxLast(x), rg))
    }

    /// Selects rows of a `[M, D]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.is_empty() {
            return Err(Error::shape("gather_rows", format!("table {}", shape_str(&s))));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::shape("gather_rows", format!("row {r} of {} rows", s[0])));
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[rows.len(), d], out)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(v), Op::MseLoss(pred, target), rg))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let v = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(v), Op::L1Loss(pred, target), rg))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", shape_str(self.shape(loss))),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out_grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut params = Vec::new();

        for i in (0..n).rev() {
            let Some(go) = grads[i].take() else {
                if let Op::Param(id) = self.nodes[i].op {
                    params.push((id, i));
                }
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    out_grads[i] = Some(go);
                    continue;
                }
                Op::Param(id) => {
                    params.push((*id, i));
                    out_grads[i] = Some(go);
                    continue;
                }
                _ => {}
            }
            self.backprop_node(i, &go, &mut grads)?;
        }
        Ok(Gradients {
            grads: out_grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let rg = |v: Var| nodes[v.0].requires_grad;

        // Accumulates `f(buffer)` into the gradient slot of `v`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (a, b) = (*a, *b);
                let (na, nb) = (val(a).len(), val(b).len());
                let mut ga = rg(a).then(|| vec![0.0; na]);
                let mut gb = rg(b).then(|| vec![0.0; nb]);
                kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                    if let Some(g) = ga.as_mut() {
                        g[ia] += go[o];
                    }
                    if let Some(g) = gb.as_mut() {
                        g[ib] += sign * go[o];
                    }
                });
                if let Some(g) = ga {
                    acc(grads, a, na, |s| add_into(s, &g));
                }
                if let Some(g) = gb {
                    acc(grads, b, nb, |s| add_into(s, &g));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                let mut ga = rg(a).then(|| vec![0.0; va.len()]);
                let mut gb = rg(b).then(|| vec![0.0; vb.len()]);
                kernels::for_each_broadcast(out_shape, shp(a), shp(b), |o, ia, ib| {
                    if let Some(g) = ga.as_mut() {
                        g[ia] += go[o] * vb[ib];
                    }
                    if let Some(g) = gb.as_mut() {
                        g[ib] += go[o] * va[ia];
                    }
                });
                if let Some(g) = ga {
                    acc(grads, a, va.len(), |s| add_into(s, &g));
                }
                if let Some(g) = gb {
                    acc(grads, b, vb.len(), |s| add_into(s, &g));
                }
            }
            Op::Scale(a, s) => {
                acc(grads, *a, go.len(), |g| {
                    g.iter_mut().zip(go).for_each(|(x, y)| *x += s * y)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(grads, *a, go.len(), |g| add_into(g, go));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                if rg(a) {
                    let vb = val(b);
                    acc(grads, a, m * k, |g| kernels::gemm(m, n, k, go, false, vb, true, g, 1.0));
                }
                if rg(b) {
                    let va = val(a);
                    acc(grads, b, k * n, |g| kernels::gemm(k, m, n, va, true, go, false, g, 1.0));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (bs, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = shp(b)[2];
                if rg(a) {
                    let vb = val(b);
                    acc(grads, a, bs * m * k, |g| {
                        for i in 0..bs {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &go[i * m * n..(i + 1) * m * n],
                                false,
                                &vb[i * k * n..(i + 1) * k * n],
                                true,
                                &mut g[i * m * k..(i + 1) * m * k],
                                1.0,
                            );
                        }
                    });
                }
                if rg(b) {
                    let va = val(a);
                    acc(grads, b, bs * k * n, |g| {
                        for i in 0..bs {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &va[i * m * k..(i + 1) * m * k],
                                true,
                                &go[i * m * n..(i + 1) * m * n],
                                false,
                                &mut g[i * k * n..(i + 1) * k * n],
                                1.0,
                            );
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let s = out_shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let t = transpose_last2(go, r, c);
                acc(grads, *a, go.len(), |g| add_into(g, &t));
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for &v in inputs {
                    let d = shp(v)[axis];
                    if rg(v) {
                        acc(grads, v, outer * d * inner, |g| {
                            for o in 0..outer {
                                let src = &go[(o * total + offset) * inner..][..d * inner];
                                add_into(&mut g[o * d * inner..(o + 1) * d * inner], src);
                            }
                        });
                    }
                    offset += d;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let sx = shp(x);
                let outer: usize = sx[..axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = out_shape[axis];
                acc(grads, x, val(x).len(), |g| {
                    for o in 0..outer {
                        let base = (o * sx[axis] + start) * inner;
                        add_into(&mut g[base..base + len * inner], &go[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (x, w, geom) = (*x, *w, *geom);
                let n = shp(x)[0];
                let o = shp(w)[0];
                let (xs, ws) = (val(x), val(w));
                let chw = geom.c * geom.h * geom.w;
                let ohw = o * geom.ho * geom.wo;
                let pointwise = geom.is_pointwise();
                let mut cols = if pointwise {
                    Vec::new()
                } else {
                    vec![0.0; geom.col_rows() * geom.col_cols()]
                };
                if rg(w) {
                    acc(grads, w, ws.len(), |gw| {
                        for i in 0..n {
                            let goi = &go[i * ohw..(i + 1) * ohw];
                            let xi = &xs[i * chw..(i + 1) * chw];
                            if pointwise {
                                kernels::gemm(o, geom.h * geom.w, geom.c, goi, false, xi, true, gw, 1.0);
                            } else {
                                kernels::im2col(xi, &geom, &mut cols);
                                kernels::gemm(o, geom.col_cols(), geom.col_rows(), goi, false, &cols, true, gw, 1.0);
                            }
                        }
                    });
                }
                if rg(x) {
                    acc(grads, x, xs.len(), |gx| {
                        for i in 0..n {
                            let goi = &go[i * ohw..(i + 1) * ohw];
                            let gxi = &mut gx[i * chw..(i + 1) * chw];
                            if pointwise {
                                kernels::gemm(geom.c, o, geom.h * geom.w, ws, true, goi, false, gxi, 1.0);
                            } else {
                                kernels::gemm(geom.col_rows(), o, geom.col_cols(), ws, true, goi, false, &mut cols, 0.0);
                                kernels::col2im(&cols, &geom, gxi);
                            }
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                let s = shp(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                acc(grads, *x, nc * h * w, |g| {
                    for p in 0..nc {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                g[(p * h + i / 2) * w + j / 2] += go[(p * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                });
            }
            Op::AvgPool2x2(x) => {
                let s = out_shape;
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                acc(grads, *x, nc * 4 * h * w, |g| {
                    for p in 0..nc {
                        for i in 0..h {
                            for j in 0..w {
                                let d = 0.25 * go[(p * h + i) * w + j];
                                let b = (p * 2 * h + 2 * i) * 2 * w + 2 * j;
                                g[b] += d;
                                g[b + 1] += d;
                                g[b + 2 * w] += d;
                                g[b + 2 * w + 1] += d;
                            }
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xs = val(*x);
                acc(grads, *x, xs.len(), |g| {
                    for ((gi, &z), &d) in g.iter_mut().zip(xs).zip(go) {
                        let s = sigmoid(z);
                        *gi += d * s * (1.0 + z * (1.0 - s));
                    }
                });
            }
            Op::Sin(x) => {
                let xs = val(*x);
                acc(grads, *x, xs.len(), |g| {
                    for ((gi, &z), &d) in g.iter_mut().zip(xs).zip(go) {
                        *gi += d * z.cos();
                    }
                });
            }
            Op::Cos(x) => {
                let xs = val(*x);
                acc(grads, *x, xs.len(), |g| {
                    for ((gi, &z), &d) in g.iter_mut().zip(xs).zip(go) {
                        *gi -= d * z.sin();
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = rstd.len();
                let m = y.len() / n;
                acc(grads, *x, y.len(), |g| {
                    for i in 0..n {
                        let (yr, gr) = (&y[i * m..(i + 1) * m], &go[i * m..(i + 1) * m]);
                        let mg = gr.iter().sum::<f64>() / m as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            g[i * m + j] += rstd[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let y = node.value.data();
                let d = *out_shape.last().unwrap();
                acc(grads, *x, y.len(), |g| {
                    for ((yr, gr), gx) in y.chunks(d).zip(go.chunks(d)).zip(g.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let d = shp(*table)[1];
                acc(grads, *table, val(*table).len(), |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * d..(r + 1) * d], &go[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                acc(grads, *x, n, |g| g.iter_mut().for_each(|v| *v += go[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let d = go[0] / n as f64;
                acc(grads, *x, n, |g| g.iter_mut().for_each(|v| *v += d));
            }
            Op::MseLoss(p, t) | Op::L1Loss(p, t) => {
                let l1 = matches!(node.op, Op::L1Loss(..));
                let (p, t) = (*p, *t);
                let (vp, vt) = (val(p), val(t));
                let n = vp.len() as f64;
                let d: Vec<f64> = vp
                    .iter()
                    .zip(vt)
                    .map(|(a, b)| {
                        let r = a - b;
                        let local = if l1 {
                            if r > 0.0 {
                                1.0
                            } else if r < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        } else {
                            2.0 * r
                        };
                        go[0] * local / n
                    })
                    .collect();
                if rg(p) {
                    acc(grads, p, d.len(), |g| add_into(g, &d));
                }
                if rg(t) {
                    acc(grads, t, d.len(), |g| {
                        g.iter_mut().zip(&d).for_each(|(a, b)| *a -= b)
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn transpose_last2(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let plane = r * c;
    for (s, d) in src.chunks(plane).zip(out.chunks_mut(plane)) {
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
    out
}

impl Tensor {
    pub(crate) fn data_mut_vec(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }
}
