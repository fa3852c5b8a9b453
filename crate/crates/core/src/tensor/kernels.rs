//! Raw loops behind the tape operations. Everything here works on flat
//! row-major slices; shape validation happens in the tape.

use super::Scalar;

/// Geometry of a 2D convolution window over a single image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Window {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output columns whose input column `ox*stride + kx - pad` is inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.pad, self.width);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // ox*s + kx - p <= w - 1  <=>  ox <= (w - 1 + p - kx) / s
        let hi = if w + p > kx {
            ((w - 1 + p - kx) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Window, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let ncol = g.cols();
    for ci in 0..g.channels {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.out_h {
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = g.input_row(oy, ky) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let srow = &plane[iy * g.width..(iy + 1) * g.width];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kx - p;
                        drow[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let ncol = g.cols();
    for ci in 0..g.channels {
        let plane = &mut x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.out_h {
                    let Some(iy) = g.input_row(oy, ky) else {
                        continue;
                    };
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for ox in lo..hi {
                        drow[ox * s + kx - p] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Dense convolution. `x`: [n, cin, h, w], `w`: [cout, cin, k, k].
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], n: usize, w: &[T], cout: usize, g: &Window) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = cout * g.cols();
    let mut out = vec![T::zero(); n * out_len];
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); g.rows() * g.cols()] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let (kk, pp) = (g.rows(), g.cols());
        T::gemm(cout, kk, pp, w, kk, 1, src, pp, 1, &mut out[b * out_len..(b + 1) * out_len], false);
    }
    out
}

/// Gradients of [`conv2d_forward`]; `gx`/`gw` are accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    cout: usize,
    g: &Window,
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = cout * g.cols();
    let (kk, pp) = (g.rows(), g.cols());
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = vec![T::zero(); kk * pp];
    if let Some(gw) = gw {
        for b in 0..n {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            let gb = &gout[b * out_len..(b + 1) * out_len];
            T::gemm(cout, pp, kk, gb, pp, 1, src, 1, pp, gw, true);
        }
    }
    if let Some(gx) = gx {
        for b in 0..n {
            let gb = &gout[b * out_len..(b + 1) * out_len];
            let gxb = &mut gx[b * in_len..(b + 1) * in_len];
            if pointwise {
                T::gemm(kk, cout, pp, w, 1, kk, gb, pp, 1, gxb, true);
            } else {
                T::gemm(kk, cout, pp, w, 1, kk, gb, pp, 1, &mut cols, false);
                col2im(&cols, g, gxb);
            }
        }
    }
}

/// Per-channel stride-1 convolution. `x`: [n, c, h, w], `w`: [c, 1, k, k].
pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], n: usize, w: &[T], g: &Window) -> Vec<T> {
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let (oh, ow) = (g.out_h, g.out_w);
    let mut out = vec![T::zero(); n * g.channels * oh * ow];
    for b in 0..n {
        for c in 0..g.channels {
            let plane = &x[(b * g.channels + c) * h * wd..][..h * wd];
            let dst = &mut out[(b * g.channels + c) * oh * ow..][..oh * ow];
            let ker = &w[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = ker[ky * k + kx];
                    let (lo, hi) = g.valid_ox(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.input_row(oy, ky) else {
                            continue;
                        };
                        let src = &plane[iy * wd + lo + kx - g.pad..][..hi - lo];
                        let drow = &mut dst[oy * ow + lo..oy * ow + hi];
                        for (d, &s) in drow.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    g: &Window,
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let (oh, ow) = (g.out_h, g.out_w);
    for b in 0..n {
        for c in 0..g.channels {
            let base_in = (b * g.channels + c) * h * wd;
            let base_out = (b * g.channels + c) * oh * ow;
            let gplane = &gout[base_out..base_out + oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = c * k * k + ky * k + kx;
                    let wv = w[widx];
                    let (lo, hi) = g.valid_ox(kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let Some(iy) = g.input_row(oy, ky) else {
                            continue;
                        };
                        let off = base_in + iy * wd + lo + kx - g.pad;
                        let grow = &gplane[oy * ow + lo..oy * ow + hi];
                        if gw.is_some() {
                            let src = &x[off..off + (hi - lo)];
                            acc += grow.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            for (d, &gv) in gx[off..off + (hi - lo)].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Length-preserving zero-padded 1D convolution of each row of `x` ([n, len]).
pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], n: usize, len: usize, w: &[T]) -> Vec<T> {
    let k = w.len();
    let pad = (k - 1) / 2;
    let mut out = vec![T::zero(); n * len];
    for b in 0..n {
        let row = &x[b * len..(b + 1) * len];
        for i in 0..len {
            let mut acc = T::zero();
            for (j, &wv) in w.iter().enumerate() {
                let src = i as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    acc += wv * row[src as usize];
                }
            }
            out[b * len + i] = acc;
        }
    }
    out
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    len: usize,
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let pad = (w.len() - 1) / 2;
    for b in 0..n {
        for i in 0..len {
            let gv = gout[b * len + i];
            for (j, &wv) in w.iter().enumerate() {
                let src = i as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    let s = b * len + src as usize;
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[s] += wv * gv;
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[j] += x[s] * gv;
                    }
                }
            }
        }
    }
}

/// Transposed convolution (no padding). `x`: [n, cin, h, w], `w`: [cin, cout, k, k].
/// `g` describes the equivalent forward convolution over the *output* image.
pub(crate) fn conv_transpose_forward<T: Scalar>(x: &[T], n: usize, cin: usize, w: &[T], g: &Window) -> Vec<T> {
    let (kk, pp) = (g.rows(), g.cols());
    let in_len = cin * pp;
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = vec![T::zero(); kk * pp];
    for b in 0..n {
        T::gemm(kk, cin, pp, w, 1, kk, &x[b * in_len..(b + 1) * in_len], pp, 1, &mut cols, false);
        col2im(&cols, g, &mut out[b * out_len..(b + 1) * out_len]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    g: &Window,
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (kk, pp) = (g.rows(), g.cols());
    let in_len = cin * pp;
    let out_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); kk * pp];
    for b in 0..n {
        im2col(&gout[b * out_len..(b + 1) * out_len], g, &mut cols);
        if let Some(gx) = gx.as_deref_mut() {
            T::gemm(cin, kk, pp, w, kk, 1, &cols, pp, 1, &mut gx[b * in_len..(b + 1) * in_len], true);
        }
        if let Some(gw) = gw.as_deref_mut() {
            T::gemm(cin, pp, kk, &x[b * in_len..(b + 1) * in_len], pp, 1, &cols, 1, pp, gw, true);
        }
    }
}

/// Batched matmul of logical `op(a)` (m×k) by `op(b)` (k×n), where `op`
/// transposes the stored matrix when the flag is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            rsa,
            csa,
            &b[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            &mut out[i * m * n..(i + 1) * m * n],
            accumulate,
        );
    }
}
