//! 2D Fourier transforms and the phase extraction module (PEM).
//!
//! The PEM replaces the amplitude of every frequency bin with 1 while keeping
//! its phase, then transforms back. The result depends only on phase, so it
//! is invariant to positive rescaling of the input.

pub mod radix2;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use radix2::Plan2d;

/// Per-channel complex frequency grid of an `[n, c, h, w]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T: Scalar = f32> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
}

impl<T: Scalar> ComplexSpectrum<T> {
    pub fn new(real: Tensor<T>, imag: Tensor<T>) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(Error::dim(
                "spectrum",
                format!("real {:?} and imag {:?} differ", real.shape(), imag.shape()),
            ));
        }
        Ok(ComplexSpectrum { real, imag })
    }

    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }
}

/// Output of [`ifft2`]: the real part and the largest discarded imaginary magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseOutput<T: Scalar = f32> {
    pub real: Tensor<T>,
    pub max_imag_residue: f64,
}

fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(op, format!("need trailing spatial axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if !(h.is_power_of_two() && w.is_power_of_two()) {
        return Err(Error::Config(format!(
            "{op}: spatial dims {h}x{w} are not powers of two"
        )));
    }
    Ok((h, w))
}

/// Unnormalized forward 2D DFT of each `h × w` plane (DC bin = sum of samples).
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (h, w) = spatial_dims("fft2", x.shape())?;
    let plan = Plan2d::new(h, w)?;
    let mut re = x.data().to_vec();
    let mut im = vec![T::zero(); re.len()];
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        plan.process(pr, pi, false);
    }
    ComplexSpectrum::new(
        Tensor::new(x.shape().to_vec(), re)?,
        Tensor::new(x.shape().to_vec(), im)?,
    )
}

/// Inverse 2D DFT scaled by `1/(h·w)`, keeping the real part.
pub fn ifft2<T: Scalar>(s: &ComplexSpectrum<T>) -> Result<InverseOutput<T>> {
    let (h, w) = spatial_dims("ifft2", s.shape())?;
    let plan = Plan2d::new(h, w)?;
    let mut re = s.real.data().to_vec();
    let mut im = s.imag.data().to_vec();
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        plan.process(pr, pi, true);
    }
    let max_imag_residue = im.iter().map(|v| v.abs().as_f64()).fold(0.0, f64::max);
    Ok(InverseOutput {
        real: Tensor::new(s.shape().to_vec(), re)?,
        max_imag_residue,
    })
}

/// Amplitude `sqrt(re² + im²)` and phase `atan2(im, re)`, with `atan2(0, 0) = 0`.
pub fn decompose<T: Scalar>(s: &ComplexSpectrum<T>) -> (Tensor<T>, Tensor<T>) {
    let amplitude = s
        .real
        .zip_map(&s.imag, |r, i| r.hypot(i))
        .expect("spectrum parts share a shape");
    let phase = s
        .imag
        .zip_map(&s.real, crate::tensor::tape_atan2)
        .expect("spectrum parts share a shape");
    (amplitude, phase)
}

/// Packed complex `[2, ...]` tensor holding `re` and a zero imaginary part.
fn pack_real<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut packed_shape = vec![1];
    packed_shape.extend_from_slice(&shape);
    let re = tape.reshape(x, &packed_shape)?;
    let im = tape.constant(Tensor::zeros(packed_shape));
    tape.concat(&[re, im], 0)
}

fn unpack<T: Scalar>(tape: &mut Tape<T>, packed: Var, part: usize) -> Result<Var> {
    let shape = tape.shape(packed)[1..].to_vec();
    let p = tape.narrow(packed, 0, part, 1)?;
    tape.reshape(p, &shape)
}

/// Differentiable forward transform of a real tensor; returns `(re, im)`.
pub fn fft2_var<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    spatial_dims("fft2", tape.shape(x))?;
    let packed = pack_real(tape, x)?;
    let s = tape.fft2(packed, false)?;
    Ok((unpack(tape, s, 0)?, unpack(tape, s, 1)?))
}

/// Differentiable inverse transform; returns `(re, im)` of the scaled inverse.
pub fn ifft2_var<T: Scalar>(tape: &mut Tape<T>, re: Var, im: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(re).to_vec();
    let mut packed_shape = vec![1];
    packed_shape.extend_from_slice(&shape);
    let r = tape.reshape(re, &packed_shape)?;
    let i = tape.reshape(im, &packed_shape)?;
    let packed = tape.concat(&[r, i], 0)?;
    let out = tape.fft2(packed, true)?;
    Ok((unpack(tape, out, 0)?, unpack(tape, out, 1)?))
}

/// Phase-only reconstruction `real(IFFT(exp(i·φ)))`, recorded on the tape.
///
/// With `differentiable = false` the result is recorded as a constant and
/// no gradient flows back into `x`.
pub fn pem_var<T: Scalar>(tape: &mut Tape<T>, x: Var, differentiable: bool) -> Result<Var> {
    if !differentiable {
        let mut inner = Tape::new();
        let v = inner.constant(tape.value(x).clone());
        let (re, _) = pem_parts(&mut inner, v)?;
        tape.add_flops(inner.flops());
        let value = inner.value(re).clone();
        return Ok(tape.constant(value));
    }
    Ok(pem_parts(tape, x)?.0)
}

fn pem_parts<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let (re, im) = fft2_var(tape, x)?;
    let phase = tape.atan2(im, re)?;
    let c = tape.cos(phase);
    let s = tape.sin(phase);
    ifft2_var(tape, c, s)
}

/// Value-level PEM.
pub fn pem<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(pem_with_residue(x)?.real)
}

/// Value-level PEM that also reports the imaginary residue of the inverse.
pub fn pem_with_residue<T: Scalar>(x: &Tensor<T>) -> Result<InverseOutput<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let (re, im) = pem_parts(&mut tape, v)?;
    let max_imag_residue = tape
        .value(im)
        .data()
        .iter()
        .map(|v| v.abs().as_f64())
        .fold(0.0, f64::max);
    Ok(InverseOutput {
        real: tape.value(re).clone(),
        max_imag_residue,
    })
}
