//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and enough saved state
//! for its backward rule. Nodes only reference earlier nodes, so the tape is in
//! topological order by construction and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `sqrt(2/pi)` and the cubic coefficient of the tanh-form GeLU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    AddRowBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Var, Var),
    BroadcastMul(Var, Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Bilinear {
        x: Var,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    CrossEntropy2 {
        logits: Var,
        target: Vec<u8>,
        prob_free: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    OuterAdd(Var, Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded recording of one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

fn req<T: Real>(t: &Tape<T>, v: Var) -> bool {
    t.nodes[v.0].requires_grad
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by tape node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_input(value, true)
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_input(value, false)
    }

    fn push_input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        req(self, v)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data());
        let rg = req(self, a) || req(self, b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = req(self, a) || req(self, b);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = req(self, a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_row_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = req(self, x) || req(self, bias);
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::AddRowBias(x, bias),
            rg,
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::lit(c as f64);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = req(self, x) || req(self, gamma) || req(self, beta);
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Numerically stable softmax over each row of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let rg = req(self, x);
        self.push(Tensor::from_parts(vec![r, c], out), Op::Softmax(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let rg = req(self, x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = req(self, x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Concatenation along the leading axis (channels for `C×h×w`, rows for
    /// matrices); all trailing dims must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = req(self, a) || req(self, b);
        self.push(Tensor::from_parts(shape, data), Op::Concat(a, b), rg)
    }

    /// Channel-wise modulation `x[C×h×w] ⊙ map[h×w]`.
    pub fn broadcast_mul(&mut self, x: Var, map: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "broadcast_mul")?;
        if self.shape(map) != [h, w] {
            return Err(Error::shape(
                "broadcast_mul",
                self.shape(x),
                self.shape(map),
            ));
        }
        let m = self.value(map).data();
        let mut out = self.value(x).data().to_vec();
        for plane in out.chunks_mut(h * w) {
            for (o, &g) in plane.iter_mut().zip(m) {
                *o = *o * g;
            }
        }
        let rg = req(self, x) || req(self, map);
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::BroadcastMul(x, map),
            rg,
        )
    }

    /// 2-D convolution of `x[Cin×H×W]` with `weight[Cout×Cin×k×k]` and
    /// `bias[Cout]`; the kernel must be square and odd.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, w) = self.dims3(x, "conv2d")?;
        let (cout, wcin, kh, kw) = match self.shape(weight) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::shape("conv2d", self.shape(x), s)),
        };
        if wcin != cin || kh != kw || self.shape(bias) != [cout] {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(weight)));
        }
        if kh % 2 == 0 {
            return Err(Error::Validation(format!(
                "conv2d kernel must be odd, got {kh}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Validation("conv2d geometry has no output".into()));
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
        };
        let cols = kernels::im2col(&geom, self.value(x).data());
        let n = geom.out_height() * geom.out_width();
        let mut out = vec![T::zero(); cout * n];
        let b = self.value(bias).data();
        for (o, &bv) in out.chunks_mut(n).zip(b) {
            o.fill(bv);
        }
        kernels::gemm_acc(
            cout,
            geom.col_rows(),
            n,
            self.value(weight).data(),
            &cols,
            &mut out,
        );
        let rg = req(self, x) || req(self, weight) || req(self, bias);
        self.push(
            Tensor::from_parts(vec![cout, geom.out_height(), geom.out_width()], out),
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Half-pixel bilinear resampling of `x[C×h×w]` to `C×out_h×out_w`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Validation(
                "bilinear_resize target must be nonempty".into(),
            ));
        }
        let (ty, tx) = (
            kernels::bilinear_taps(h, out_h),
            kernels::bilinear_taps(w, out_w),
        );
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out[(ch * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let rg = req(self, x);
        self.push(
            Tensor::from_parts(vec![c, out_h, out_w], out),
            Op::Bilinear {
                x,
                in_hw: (h, w),
                out_hw: (out_h, out_w),
            },
            rg,
        )
    }

    /// Mean per-pixel cross-entropy of `logits[2×H×W]` (channel 0 = freespace,
    /// channel 1 = obstacle) against a mask with 1 = freespace, 0 = obstacle.
    pub fn cross_entropy_2class(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let (c, h, w) = self.dims3(logits, "cross_entropy_2class")?;
        if c != 2 || target.len() != h * w {
            return Err(Error::shape(
                "cross_entropy_2class",
                self.shape(logits),
                &[target.len()],
            ));
        }
        if let Some(bad) = target.iter().find(|&&t| t > 1) {
            return Err(Error::Validation(format!(
                "cross-entropy target must be binary, found {bad}"
            )));
        }
        let n = h * w;
        let l = self.value(logits).data();
        let mut prob_free = vec![T::zero(); n];
        let mut total = 0.0f64;
        for i in 0..n {
            let (a, b) = (l[i], l[n + i]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            prob_free[i] = (a - lse).exp();
            let picked = if target[i] == 1 { a } else { b };
            total += (lse - picked).as_f64();
        }
        let loss = T::lit(total / n as f64);
        let rg = req(self, logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy2 {
                logits,
                target: target.to_vec(),
                prob_free,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = req(self, x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = req(self, x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `out[c, y, x] = rows[y, c] + cols[x, c]` for `rows[h×d]`, `cols[w×d]`.
    pub fn outer_add(&mut self, rows: Var, cols: Var) -> Result<Var> {
        let (h, d) = self.dims2(rows, "outer_add")?;
        let (w, d2) = self.dims2(cols, "outer_add")?;
        if d != d2 {
            return Err(Error::shape(
                "outer_add",
                self.shape(rows),
                self.shape(cols),
            ));
        }
        let (rv, cv) = (self.value(rows).data(), self.value(cols).data());
        let mut out = vec![T::zero(); d * h * w];
        for c in 0..d {
            for y in 0..h {
                let base = rv[y * d + c];
                for x in 0..w {
                    out[(c * h + y) * w + x] = base + cv[x * d + c];
                }
            }
        }
        let rg = req(self, rows) || req(self, cols);
        self.push(
            Tensor::from_parts(vec![d, h, w], out),
            Op::OuterAdd(rows, cols),
            rg,
        )
    }

    /// Scales each row to unit length as `x / sqrt(|x|² + eps²)`, so zero rows
    /// stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "l2_normalize_rows")?;
        let eps2 = T::lit(eps * eps);
        let mut out = self.value(x).data().to_vec();
        let mut norms = vec![T::zero(); r];
        for (row, n) in out.chunks_mut(c).zip(norms.iter_mut()) {
            *n = (kernels::dot(row, row) + eps2).sqrt();
            for v in row.iter_mut() {
                *v = *v / *n;
            }
        }
        let rg = req(self, x);
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::L2NormRows { x, norms },
            rg,
        )
    }

    /// Maximum over each row of `x[r×c]`, giving `[r]`. Ties resolve to the
    /// first column.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "max_rows")?;
        let v = self.value(x).data();
        let mut out = vec![T::zero(); r];
        let mut argmax = vec![0; r];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            argmax[i] = best;
            out[i] = row[best];
        }
        let rg = req(self, x);
        self.push(
            Tensor::from_parts(vec![r], out),
            Op::MaxRows { x, argmax },
            rg,
        )
    }

    /// Propagates `d loss / d node` for every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {i}, element {pos}"
                    )));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2_of(self.value(*a));
                let n = self.value(*b).shape()[1];
                if req(self, *a) {
                    acc(*a, kernels::gemm_nt(m, n, k, g, self.value(*b).data()));
                }
                if req(self, *b) {
                    acc(*b, kernels::gemm_tn(k, m, n, self.value(*a).data(), g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if req(self, *a) {
                    acc(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                }
                if req(self, *b) {
                    acc(*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| gi * gelu_grad(xi))
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, g.to_vec());
                if req(self, *bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b = *b + v;
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).numel();
                let gm = self.value(*gamma).data();
                if req(self, *gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (row_g, row_h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + row_g[j] * row_h[j];
                        }
                    }
                    acc(*gamma, gg);
                }
                if req(self, *beta) {
                    let mut gb = vec![T::zero(); c];
                    for row_g in g.chunks(c) {
                        for j in 0..c {
                            gb[j] = gb[j] + row_g[j];
                        }
                    }
                    acc(*beta, gb);
                }
                if req(self, *x) {
                    let n = T::lit(c as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, ((row_g, row_h), out)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .enumerate()
                    {
                        let dxh: Vec<T> = (0..c).map(|j| row_g[j] * gm[j]).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(row_h).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            out[j] = inv_std[r] / n * (n * dxh[j] - s1 - row_h[j] * s2);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut gx = vec![T::zero(); g.len()];
                for ((row_g, row_y), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s = kernels::dot(row_g, row_y);
                    for j in 0..c {
                        out[j] = row_y[j] * (row_g[j] - s);
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Transpose(x) => {
                let (r, c) = dims2_of(self.value(*x));
                let mut gx = vec![T::zero(); g.len()];
                kernels::transpose(c, r, g, &mut gx);
                acc(*x, gx);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                acc(*a, g[..na].to_vec());
                acc(*b, g[na..].to_vec());
            }
            Op::BroadcastMul(x, map) => {
                let hw = self.value(*map).numel();
                let (xv, mv) = (self.value(*x).data(), self.value(*map).data());
                if req(self, *x) {
                    let mut gx = g.to_vec();
                    for plane in gx.chunks_mut(hw) {
                        for (o, &m) in plane.iter_mut().zip(mv) {
                            *o = *o * m;
                        }
                    }
                    acc(*x, gx);
                }
                if req(self, *map) {
                    let mut gm = vec![T::zero(); hw];
                    for (pg, px) in g.chunks(hw).zip(xv.chunks(hw)) {
                        for k in 0..hw {
                            gm[k] = gm[k] + pg[k] * px[k];
                        }
                    }
                    acc(*map, gm);
                }
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            } => {
                let cout = self.value(*weight).shape()[0];
                let n = geom.out_height() * geom.out_width();
                let rows = geom.col_rows();
                if req(self, *weight) {
                    acc(*weight, kernels::gemm_nt(cout, n, rows, g, cols));
                }
                if req(self, *bias) {
                    acc(
                        *bias,
                        g.chunks(n).map(|c| c.iter().copied().sum()).collect(),
                    );
                }
                if req(self, *x) {
                    let dcols = kernels::gemm_tn(rows, cout, n, self.value(*weight).data(), g);
                    acc(*x, kernels::col2im(geom, &dcols));
                }
            }
            Op::Bilinear { x, in_hw, out_hw } => {
                let ((h, w), (oh, ow)) = (*in_hw, *out_hw);
                let (ty, tx) = (kernels::bilinear_taps(h, oh), kernels::bilinear_taps(w, ow));
                let c = self.value(*x).shape()[0];
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::lit(fx);
                            let gv = g[(ch * oh + oy) * ow + ox];
                            let (top, bot) = (gv * (T::one() - fy), gv * fy);
                            plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - fx);
                            plane[y0 * w + x1] = plane[y0 * w + x1] + top * fx;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - fx);
                            plane[y1 * w + x1] = plane[y1 * w + x1] + bot * fx;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::CrossEntropy2 {
                logits,
                target,
                prob_free,
            } => {
                let n = target.len();
                let scale = g[0] / T::lit(n as f64);
                let mut gl = vec![T::zero(); 2 * n];
                for i in 0..n {
                    let t = if target[i] == 1 { T::one() } else { T::zero() };
                    let d = (prob_free[i] - t) * scale;
                    gl[i] = d;
                    gl[n + i] = -d;
                }
                acc(*logits, gl);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::OuterAdd(rows, cols) => {
                let (h, d) = dims2_of(self.value(*rows));
                let w = self.value(*cols).shape()[0];
                if req(self, *rows) {
                    let mut gr = vec![T::zero(); h * d];
                    for c in 0..d {
                        for y in 0..h {
                            let s: T = g[(c * h + y) * w..(c * h + y + 1) * w]
                                .iter()
                                .copied()
                                .sum();
                            gr[y * d + c] = s;
                        }
                    }
                    acc(*rows, gr);
                }
                if req(self, *cols) {
                    let mut gc = vec![T::zero(); w * d];
                    for c in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                gc[x * d + c] = gc[x * d + c] + g[(c * h + y) * w + x];
                            }
                        }
                    }
                    acc(*cols, gc);
                }
            }
            Op::L2NormRows { x, norms } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((row_g, row_y), out)) in g
                    .chunks(c)
                    .zip(y.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let s = kernels::dot(row_g, row_y);
                    for j in 0..c {
                        out[j] = (row_g[j] - row_y[j] * s) / norms[r];
                    }
                }
                acc(*x, gx);
            }
            Op::MaxRows { x, argmax } => {
                let c = self.value(*x).shape()[1];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (r, &j) in argmax.iter().enumerate() {
                    gx[r * c + j] = g[r];
                }
                acc(*x, gx);
            }
        }
    }
}

fn dims2_of<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

/// Tanh-form GeLU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * a * x * x)
}
