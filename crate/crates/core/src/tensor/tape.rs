use super::kernels::{self, Window};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::spectral::radix2::{fft_flops, Plan2d};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Powf(Var, T),
    Sqrt(Var),
    Abs(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Cos(Var),
    Sin(Var),
    Atan2(Var, Var),
    Clamp(Var, T, T),
    ScaleChannels(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, dims: [usize; 4] },
    Transpose(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    AvgPool2(Var),
    Conv2d { x: Var, w: Var, geom: Window },
    Depthwise { x: Var, w: Var, geom: Window },
    Conv1d { x: Var, w: Var },
    ConvTranspose { x: Var, w: Var, geom: Window },
    Fft2 { x: Var, inverse: bool },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Wengert list recording a forward computation for reverse-mode differentiation.
///
/// Values are immutable once recorded. Gradients of leaves created with
/// `requires_grad = true` accumulate across calls to [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    flops: u64,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            flops: 0,
        }
    }

    /// Credit work done outside this tape, e.g. a frozen sub-computation.
    pub(crate) fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate ×2 of all convolutions/matmuls plus FFT estimates recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Untracked copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let tracked = self.tracked(&[x]);
        self.push(value, op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same var has same shape")
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| {
            let half = T::from_f64(0.5);
            half * v * (T::one() + (v * T::FRAC_1_SQRT_2()).erf())
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), |v| v.cos())
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), |v| v.sin())
    }

    /// Four-quadrant arctangent of `y/x`, with `atan2(0, 0) = 0` (either zero sign).
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary("atan2", y, x, Op::Atan2(y, x), atan2)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// `x · s` with `s` broadcast along every axis but the first two.
    ///
    /// `x` is `[n, c, ...]`; `s` holds either `c` values (shared across the
    /// batch) or `n·c` values.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("scale_channels", format!("input rank {} < 2", shape.len())));
        }
        let (n, c) = (shape[0], shape[1]);
        let sn = self.value(s).numel();
        if sn != c && sn != n * c {
            return Err(Error::dim(
                "scale_channels",
                format!("scale holds {sn} values; expected channel axis {c} or batch×channel {}", n * c),
            ));
        }
        let inner = numel(&shape[2..]);
        let sv = self.value(s).data();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let f = sv[if sn == c { ch } else { b * c + ch }];
                let off = (b * c + ch) * inner;
                for (o, &v) in out[off..off + inner].iter_mut().zip(&xv[off..off + inner]) {
                    *o = v * f;
                }
            }
        }
        let tracked = self.tracked(&[x, s]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleChannels(x, s), tracked))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &last = shape
            .last()
            .ok_or_else(|| Error::dim("softmax", "axis out of range for a rank-0 tensor"))?;
        let mut out = self.value(x).data().to_vec();
        if last > 0 {
            for row in out.chunks_mut(last) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), tracked))
    }

    /// Normalise over axis 1 (channels) at every other position, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("layer_norm", format!("input rank {} < 2", shape.len())));
        }
        let (n, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * inner];
        let cf = T::from_f64(c as f64);
        for b in 0..n {
            for p in 0..inner {
                let idx = |ch: usize| (b * c + ch) * inner + p;
                let mean = (0..c).map(|ch| xv[idx(ch)]).sum::<T>() / cf;
                let var = (0..c).map(|ch| (xv[idx(ch)] - mean).powi(2)).sum::<T>() / cf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[b * inner + p] = is;
                for ch in 0..c {
                    out[idx(ch)] = (xv[idx(ch)] - mean) * is;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, inv_std }, tracked))
    }

    /// Batched matrix product over the last two axes, `op(a)·op(b)` where
    /// `op` transposes when the corresponding flag is set.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim("matmul", format!("incompatible batch axes {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner axes differ: {ka} (lhs {sa:?}) vs {kb} (rhs {sb:?})"),
            ));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        kernels::bmm(self.value(a).data(), ta, self.value(b).data(), tb, batch, m, ka, n, &mut out, false);
        self.flops += 2 * (batch * m * ka * n) as u64;
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let tracked = self.tracked(&[a, b]);
        let op = Op::MatMul { a, b, ta, tb, dims: [batch, m, ka, n] };
        Ok(self.push(Tensor::new(shape, out)?, op, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::dim("transpose", format!("axis out of range for rank {r}")));
        }
        let out = transpose_last2(self.value(x).data(), &shape);
        let mut oshape = shape.clone();
        oshape.swap(r - 2, r - 1);
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Transpose(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("narrow", format!("axis {axis} out of range for {shape:?}")));
        }
        if start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Narrow { x, axis, start }, tracked))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = self.tracked(parts);
        let op = Op::Concat { parts: parts.to_vec(), axis };
        Ok(self.push(Tensor::new(shape, out)?, op, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_f64(t.numel().max(1) as f64));
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Mean over every axis after the first two: `[n, c, ...] → [n, c, 1, ...]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim("global_avg_pool", format!("needs spatial axes, got {shape:?}")));
        }
        let inner = numel(&shape[2..]);
        let scale = T::one() / T::from_f64(inner as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let mut oshape = shape[..2].to_vec();
        oshape.extend(std::iter::repeat_n(1, shape.len() - 2));
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::GlobalAvgPool(x), tracked))
    }

    /// 2×2 average pooling with stride 2 (trailing odd rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("avg_pool2", x)?;
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let q = T::from_f64(0.25);
        for p in 0..n * c {
            let src = &xv[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[(p * oh + y) * ow + xx] = s * q;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::AvgPool2(x), tracked))
    }

    fn dims4(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::dim(op, format!("expected rank-4 NCHW input, got {s:?}"))),
        }
    }

    /// Bias-free cross-correlation. `w` is `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.dims4("conv2d", x)?;
        let (cout, wcin, k, k2) = self.dims4("conv2d", w)?;
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis (1) is {cin} but weight axis 1 is {wcin}"),
            ));
        }
        if k != k2 {
            return Err(Error::dim("conv2d", format!("weight axes 2 and 3 differ ({k} vs {k2})")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::dim(
                "conv2d",
                format!("spatial axes (2, 3) = {h}x{wd} smaller than kernel {k} with padding {padding}"),
            ));
        }
        let geom = Window::new(cin, h, wd, k, stride, padding);
        let out = kernels::conv2d_forward(self.value(x).data(), n, self.value(w).data(), cout, &geom);
        self.flops += 2 * (n * cout * geom.out_h * geom.out_w * cin * k * k) as u64;
        let shape = vec![n, cout, geom.out_h, geom.out_w];
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, geom }, tracked))
    }

    /// Per-channel convolution, stride 1. `w` is `[c, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4("depthwise_conv2d", x)?;
        let (wc, one, k, k2) = self.dims4("depthwise_conv2d", w)?;
        if wc != c || one != 1 {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!("input has {c} channels (axis 1); weight shape is [{wc}, {one}, {k}, {k2}], expected [{c}, 1, k, k]"),
            ));
        }
        if k != k2 || h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!("kernel {k}x{k2} does not fit {h}x{wd} with padding {padding}"),
            ));
        }
        let geom = Window::new(c, h, wd, k, 1, padding);
        let out = kernels::depthwise_forward(self.value(x).data(), n, self.value(w).data(), &geom);
        self.flops += 2 * (n * c * geom.out_h * geom.out_w * k * k) as u64;
        let shape = vec![n, c, geom.out_h, geom.out_w];
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Depthwise { x, w, geom }, tracked))
    }

    /// Zero-padded, length-preserving 1D convolution along the last axis of
    /// `x: [n, 1, len]` with `w: [1, 1, k]`, `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = match ws[..] {
            [1, 1, k] => k,
            _ => return Err(Error::dim("conv1d", format!("weight must be [1, 1, k], got {ws:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel length {k} must be odd")));
        }
        let (n, len) = match xs[..] {
            [n, 1, len] => (n, len),
            _ => return Err(Error::dim("conv1d", format!("input must be [n, 1, len], got {xs:?}"))),
        };
        let out = kernels::conv1d_forward(self.value(x).data(), n, len, self.value(w).data());
        self.flops += 2 * (n * len * k) as u64;
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(Tensor::new(xs, out)?, Op::Conv1d { x, w }, tracked))
    }

    /// Transposed convolution without padding; output side `(h-1)·stride + k`.
    /// `w` is `[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.dims4("transposed_conv2d", x)?;
        let (wcin, cout, k, k2) = self.dims4("transposed_conv2d", w)?;
        if wcin != cin || k != k2 {
            return Err(Error::dim(
                "transposed_conv2d",
                format!("input channel axis (1) is {cin}; weight shape [{wcin}, {cout}, {k}, {k2}]"),
            ));
        }
        if stride == 0 || k < stride {
            return Err(Error::Config(format!("transposed conv kernel {k} smaller than stride {stride}")));
        }
        let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let geom = Window::new(cout, oh, ow, k, stride, 0);
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let out = kernels::conv_transpose_forward(self.value(x).data(), n, cin, self.value(w).data(), &geom);
        self.flops += 2 * (n * cin * cout * k * k * h * wd) as u64;
        let tracked = self.tracked(&[x, w]);
        let op = Op::ConvTranspose { x, w, geom };
        Ok(self.push(Tensor::new(vec![n, cout, oh, ow], out)?, op, tracked))
    }

    /// 2D DFT over the last two axes of a packed complex tensor `[2, ..., h, w]`
    /// (index 0 = real part, 1 = imaginary part). Forward is unnormalized;
    /// the inverse is scaled by `1/(h·w)`.
    pub fn fft2(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 || shape[0] != 2 {
            return Err(Error::dim("fft2", format!("expected packed [2, ..., h, w], got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = fft_packed(self.value(x).data(), h, w, inverse)?;
        let planes = numel(&shape[1..shape.len() - 2]);
        self.flops += planes as u64 * fft_flops(h, w);
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Fft2 { x, inverse }, tracked))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                if self.leaf_grads.len() < self.nodes.len() {
                    self.leaf_grads.resize(self.nodes.len(), None);
                }
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (parent, contribution) in self.backprop(i, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        let mut push = |v: Var, t: Tensor<T>| {
            if needs(v) {
                res.push((v, t));
            }
        };
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| g.zip_map(a, f);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(*a, g.clone());
                push(*b, g.clone());
            }
            Op::Sub(a, b) => {
                push(*a, g.clone());
                push(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    push(*a, zip(val(*b), &|gv, bv| gv * bv)?);
                }
                if needs(*b) {
                    push(*b, zip(val(*a), &|gv, av| gv * av)?);
                }
            }
            Op::Div(a, b) => {
                if needs(*a) {
                    push(*a, zip(val(*b), &|gv, bv| gv / bv)?);
                }
                if needs(*b) {
                    // d(a/b)/db = -out/b
                    let t = out.zip_map(val(*b), |o, bv| -o / bv)?;
                    push(*b, g.zip_map(&t, |gv, tv| gv * tv)?);
                }
            }
            Op::AddScalar(x) => push(*x, g.clone()),
            Op::MulScalar(x, s) => push(*x, g.scale(*s)),
            Op::Powf(x, p) => {
                let p = *p;
                push(*x, zip(val(*x), &|gv, xv| gv * p * xv.powf(p - T::one()))?);
            }
            Op::Sqrt(x) => {
                let two = T::from_f64(2.0);
                push(*x, zip(out, &|gv, o| if o > T::zero() { gv / (two * o) } else { T::zero() })?);
            }
            Op::Abs(x) => push(*x, zip(val(*x), &|gv, xv| gv * signum0(xv))?),
            Op::Exp(x) => push(*x, zip(out, &|gv, o| gv * o)?),
            Op::Sigmoid(x) => push(*x, zip(out, &|gv, s| gv * s * (T::one() - s))?),
            Op::Gelu(x) => {
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                push(
                    *x,
                    zip(val(*x), &|gv, v| {
                        let cdf = half * (T::one() + (v * T::FRAC_1_SQRT_2()).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        gv * (cdf + v * pdf)
                    })?,
                );
            }
            Op::Relu(x) => push(*x, zip(val(*x), &|gv, v| if v > T::zero() { gv } else { T::zero() })?),
            Op::Cos(x) => push(*x, zip(val(*x), &|gv, v| -gv * v.sin())?),
            Op::Sin(x) => push(*x, zip(val(*x), &|gv, v| gv * v.cos())?),
            Op::Atan2(y, x) => {
                let (yv, xv) = (val(*y).data(), val(*x).data());
                let r2 = |j: usize| xv[j] * xv[j] + yv[j] * yv[j];
                if needs(*y) {
                    let d = Tensor::from_fn(g.shape().to_vec(), |j| {
                        let r = r2(j);
                        if r > T::zero() { g.data()[j] * xv[j] / r } else { T::zero() }
                    });
                    push(*y, d);
                }
                if needs(*x) {
                    let d = Tensor::from_fn(g.shape().to_vec(), |j| {
                        let r = r2(j);
                        if r > T::zero() { -g.data()[j] * yv[j] / r } else { T::zero() }
                    });
                    push(*x, d);
                }
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                push(*x, zip(val(*x), &|gv, v| if v >= lo && v <= hi { gv } else { T::zero() })?);
            }
            Op::ScaleChannels(x, s) => {
                let shape = val(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner = numel(&shape[2..]);
                let sv = val(*s).data();
                let shared = sv.len() == c;
                let idx = |b: usize, ch: usize| if shared { ch } else { b * c + ch };
                if needs(*x) {
                    let mut d = g.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let f = sv[idx(b, ch)];
                            let off = (b * c + ch) * inner;
                            d.data_mut()[off..off + inner].iter_mut().for_each(|v| *v *= f);
                        }
                    }
                    push(*x, d);
                }
                if needs(*s) {
                    let xv = val(*x).data();
                    let mut d = Tensor::zeros(val(*s).shape().to_vec());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let dot: T = g.data()[off..off + inner]
                                .iter()
                                .zip(&xv[off..off + inner])
                                .map(|(&a, &b)| a * b)
                                .sum();
                            d.data_mut()[idx(b, ch)] += dot;
                        }
                    }
                    push(*s, d);
                }
            }
            Op::Softmax(x) => {
                let last = *out.shape().last().unwrap_or(&1);
                let mut d = g.clone();
                if last > 0 {
                    for (drow, srow) in d.data_mut().chunks_mut(last).zip(out.data().chunks(last)) {
                        let dot: T = drow.iter().zip(srow).map(|(&a, &b)| a * b).sum();
                        for (dv, &sv) in drow.iter_mut().zip(srow) {
                            *dv = sv * (*dv - dot);
                        }
                    }
                }
                push(*x, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let shape = out.shape();
                let (n, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
                let cf = T::from_f64(c as f64);
                let (y, gv) = (out.data(), g.data());
                let mut d = vec![T::zero(); y.len()];
                for b in 0..n {
                    for p in 0..inner {
                        let idx = |ch: usize| (b * c + ch) * inner + p;
                        let mg = (0..c).map(|ch| gv[idx(ch)]).sum::<T>() / cf;
                        let mgy = (0..c).map(|ch| gv[idx(ch)] * y[idx(ch)]).sum::<T>() / cf;
                        let is = inv_std[b * inner + p];
                        for ch in 0..c {
                            d[idx(ch)] = is * (gv[idx(ch)] - mg - y[idx(ch)] * mgy);
                        }
                    }
                }
                push(*x, Tensor::new(shape.to_vec(), d)?);
            }
            Op::MatMul { a, b, ta, tb, dims } => {
                let [batch, m, k, n] = *dims;
                let (av, bv, gv) = (val(*a).data(), val(*b).data(), g.data());
                if needs(*a) {
                    // stored a is m×k (or k×m when ta)
                    let mut d = vec![T::zero(); batch * m * k];
                    if !*ta {
                        // dA = G · op(B)^T : (m×n)(n×k)
                        kernels::bmm(gv, false, bv, !*tb, batch, m, n, k, &mut d, false);
                    } else {
                        // dA^T = op(B) · G^T : (k×n)(n×m)
                        kernels::bmm(bv, *tb, gv, true, batch, k, n, m, &mut d, false);
                    }
                    push(*a, Tensor::new(val(*a).shape().to_vec(), d)?);
                }
                if needs(*b) {
                    let mut d = vec![T::zero(); batch * k * n];
                    if !*tb {
                        // dB = op(A)^T · G : (k×m)(m×n)
                        kernels::bmm(av, !*ta, gv, false, batch, k, m, n, &mut d, false);
                    } else {
                        // dB^T = G^T · op(A) : (n×m)(m×k)
                        kernels::bmm(gv, true, av, *ta, batch, n, m, k, &mut d, false);
                    }
                    push(*b, Tensor::new(val(*b).shape().to_vec(), d)?);
                }
            }
            Op::Transpose(x) => {
                let d = transpose_last2(g.data(), g.shape());
                push(*x, Tensor::new(val(*x).shape().to_vec(), d)?);
            }
            Op::Reshape(x) => push(*x, g.clone().reshape(val(*x).shape().to_vec())?),
            Op::Narrow { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                push(*x, Tensor::new(xs.to_vec(), d)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let dlen = ps[*axis];
                    if needs(p) {
                        let mut d = Vec::with_capacity(numel(ps));
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[src..src + dlen * inner]);
                        }
                        push(p, Tensor::new(ps.to_vec(), d)?);
                    }
                    offset += dlen;
                }
            }
            Op::Sum(x) => push(*x, Tensor::full(val(*x).shape().to_vec(), g.item())),
            Op::Mean(x) => {
                let n = T::from_f64(val(*x).numel().max(1) as f64);
                push(*x, Tensor::full(val(*x).shape().to_vec(), g.item() / n));
            }
            Op::GlobalAvgPool(x) => {
                let xs = val(*x).shape();
                let inner = numel(&xs[2..]);
                let scale = T::one() / T::from_f64(inner as f64);
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * scale, inner))
                    .collect();
                push(*x, Tensor::new(xs.to_vec(), d)?);
            }
            Op::AvgPool2(x) => {
                let xs = val(*x).shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::from_f64(0.25);
                let mut d = vec![T::zero(); numel(xs)];
                for p in 0..nc {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = g.data()[(p * oh + y) * ow + xx] * q;
                            let base = p * h * w;
                            d[base + 2 * y * w + 2 * xx] = gv;
                            d[base + 2 * y * w + 2 * xx + 1] = gv;
                            d[base + (2 * y + 1) * w + 2 * xx] = gv;
                            d[base + (2 * y + 1) * w + 2 * xx + 1] = gv;
                        }
                    }
                }
                push(*x, Tensor::new(xs.to_vec(), d)?);
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let n = xv.shape()[0];
                let cout = wv.shape()[0];
                let mut gx = needs(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); wv.numel()]);
                kernels::conv2d_backward(xv.data(), n, wv.data(), cout, geom, g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(d) = gx {
                    push(*x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                if let Some(d) = gw {
                    push(*w, Tensor::new(wv.shape().to_vec(), d)?);
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let n = xv.shape()[0];
                let mut gx = needs(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); wv.numel()]);
                kernels::depthwise_backward(xv.data(), n, wv.data(), geom, g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(d) = gx {
                    push(*x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                if let Some(d) = gw {
                    push(*w, Tensor::new(wv.shape().to_vec(), d)?);
                }
            }
            Op::Conv1d { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, len) = (xv.shape()[0], xv.shape()[2]);
                let mut gx = needs(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); wv.numel()]);
                kernels::conv1d_backward(xv.data(), n, len, wv.data(), g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(d) = gx {
                    push(*x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                if let Some(d) = gw {
                    push(*w, Tensor::new(wv.shape().to_vec(), d)?);
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, cin) = (xv.shape()[0], xv.shape()[1]);
                let mut gx = needs(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); wv.numel()]);
                kernels::conv_transpose_backward(xv.data(), n, cin, wv.data(), geom, g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(d) = gx {
                    push(*x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                if let Some(d) = gw {
                    push(*w, Tensor::new(wv.shape().to_vec(), d)?);
                }
            }
            Op::Fft2 { x, inverse } => {
                // Forward F: adjoint is F^H = hw · F^{-1}. Inverse F^{-1}: adjoint is F / hw.
                let shape = g.shape();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let hw = T::from_f64((h * w) as f64);
                let mut d = fft_packed(g.data(), h, w, !*inverse)?;
                let s = if *inverse { T::one() / hw } else { hw };
                d.iter_mut().for_each(|v| *v *= s);
                push(*x, Tensor::new(shape.to_vec(), d)?);
            }
        }
        Ok(res)
    }
}

fn signum0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn atan2<T: Scalar>(y: T, x: T) -> T {
    if y == T::zero() && x == T::zero() {
        T::zero()
    } else {
        y.atan2(x)
    }
}

fn transpose_last2<T: Scalar>(data: &[T], shape: &[usize]) -> Vec<T> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

fn fft_packed<T: Scalar>(data: &[T], h: usize, w: usize, inverse: bool) -> Result<Vec<T>> {
    let plan = Plan2d::new(h, w)?;
    let half = data.len() / 2;
    let mut out = data.to_vec();
    let (re, im) = out.split_at_mut(half);
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        plan.process(pr, pi, inverse);
    }
    Ok(out)
}
