use num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Precomputed twiddles and bit-reversal table for one power-of-two length.
#[derive(Clone, Debug)]
pub struct Radix2<T> {
    n: usize,
    twiddles: Vec<Complex<T>>,
    reversed: Vec<usize>,
}

impl<T: Scalar> Radix2<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Config(format!("FFT length {n} is not a power of two")));
        }
        let bits = n.trailing_zeros();
        let twiddles = (0..n / 2)
            .map(|k| {
                let theta = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(T::from_f64(theta.cos()), T::from_f64(theta.sin()))
            })
            .collect();
        let reversed = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Radix2 { n, twiddles, reversed })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized in-place transform; `inverse` flips the twiddle sign only.
    pub fn process(&self, buf: &mut [Complex<T>], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.reversed[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let mut w = self.twiddles[j * step];
                    if inverse {
                        w = w.conj();
                    }
                    let u = buf[start + j];
                    let v = buf[start + j + half] * w;
                    buf[start + j] = u + v;
                    buf[start + j + half] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

/// 2D transform plan for an `h × w` plane.
#[derive(Clone, Debug)]
pub struct Plan2d<T> {
    rows: Radix2<T>,
    cols: Radix2<T>,
}

impl<T: Scalar> Plan2d<T> {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if !(h.is_power_of_two() && w.is_power_of_two()) {
            return Err(Error::Config(format!(
                "spatial dims {h}x{w} must both be powers of two"
            )));
        }
        Ok(Plan2d {
            rows: Radix2::new(w)?,
            cols: Radix2::new(h)?,
        })
    }

    /// Transform one plane held as split real/imaginary slices. The inverse
    /// direction includes the `1/(h·w)` scaling.
    pub fn process(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        let (h, w) = (self.cols.len(), self.rows.len());
        let mut row = vec![Complex::new(T::zero(), T::zero()); w];
        for y in 0..h {
            for x in 0..w {
                row[x] = Complex::new(re[y * w + x], im[y * w + x]);
            }
            self.rows.process(&mut row, inverse);
            for x in 0..w {
                re[y * w + x] = row[x].re;
                im[y * w + x] = row[x].im;
            }
        }
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = Complex::new(re[y * w + x], im[y * w + x]);
            }
            self.cols.process(&mut col, inverse);
            for y in 0..h {
                re[y * w + x] = col[y].re;
                im[y * w + x] = col[y].im;
            }
        }
        if inverse {
            let s = T::one() / T::from_f64((h * w) as f64);
            re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

/// FLOP estimate of one 2D transform over an `h × w` plane.
pub fn fft_flops(h: usize, w: usize) -> u64 {
    let n = (h * w) as u64;
    if n <= 1 {
        return 0;
    }
    2 * 5 * n * n.trailing_zeros() as u64
}
