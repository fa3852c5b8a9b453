//! Channel gates applied to encoder features before they reach the decoder.
//!
//! The gate is `σ(ω_k(GAP(·)))` over a length-preserving 1D convolution whose
//! odd kernel length grows with the channel count.

use crate::error::{Error, Result};
use crate::spectral::pem_var;
use crate::tensor::{Init, ParamSpec, Scalar, Tape, Var};

/// How a skip connection treats encoder features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipKind {
    /// Gate computed from the phase-only projection of the features.
    Opab,
    /// Gate computed from the features directly.
    Oa,
    /// Features passed through unchanged.
    Identity,
}

/// Odd 1D kernel length for `c_prime` channels: `t = log2(c')/γ + b/γ`,
/// rounded down and bumped to the next odd integer when even.
pub fn adaptive_kernel_size(c_prime: usize, gamma: usize, b: usize) -> Result<usize> {
    if c_prime < 1 {
        return Err(Error::Domain(format!("channel count must be at least 1, got {c_prime}")));
    }
    if gamma == 0 {
        return Err(Error::Domain("gamma must be positive".into()));
    }
    let t = (c_prime as f64).log2() / gamma as f64 + b as f64 / gamma as f64;
    let f = t.floor().max(0.0) as usize;
    Ok(if f % 2 == 1 { f } else { f + 1 })
}

/// Default-parameter kernel length (`γ = 2`, `b = 1`).
pub fn default_kernel_size(c_prime: usize) -> Result<usize> {
    adaptive_kernel_size(c_prime, 2, 1)
}

pub fn gate_spec(name: impl Into<String>, channels: usize) -> Result<ParamSpec> {
    let k = default_kernel_size(channels)?;
    Ok(ParamSpec::new(name, vec![1, 1, k], Init::KaimingUniform { fan_in: k }))
}

fn gate<T: Scalar>(tape: &mut Tape<T>, u: Var, source: Var, kernel: Var) -> Result<Var> {
    let shape = tape.shape(u).to_vec();
    let (n, c) = match shape[..] {
        [n, c, _, _] => (n, c),
        _ => return Err(Error::dim("opab", format!("expected [n, c, h, w], got {shape:?}"))),
    };
    let k = tape.shape(kernel).last().copied().unwrap_or(0);
    let expected = default_kernel_size(c)?;
    if k != expected {
        return Err(Error::Config(format!(
            "gate kernel length {k} does not match adaptive size {expected} for {c} channels"
        )));
    }
    let pooled = tape.global_avg_pool(source)?;
    let pooled = tape.reshape(pooled, &[n, 1, c])?;
    let conv = tape.conv1d(pooled, kernel)?;
    let g = tape.sigmoid(conv);
    tape.scale_channels(u, g)
}

/// `u ⊗ σ(ω_k(GAP(pem(u))))`.
pub fn opab<T: Scalar>(tape: &mut Tape<T>, u: Var, kernel: Var, pem_differentiable: bool) -> Result<Var> {
    let phase = pem_var(tape, u, pem_differentiable)?;
    gate(tape, u, phase, kernel)
}

/// `u ⊗ σ(ω_k(GAP(u)))`, the variant without the phase projection.
pub fn oa_ablation<T: Scalar>(tape: &mut Tape<T>, u: Var, kernel: Var) -> Result<Var> {
    gate(tape, u, u, kernel)
}

/// Dispatch on `kind`; `kernel` is ignored for [`SkipKind::Identity`].
pub fn apply_skip<T: Scalar>(
    tape: &mut Tape<T>,
    kind: SkipKind,
    u: Var,
    kernel: Option<Var>,
    pem_differentiable: bool,
) -> Result<Var> {
    let need = || Error::Usage("gated skip needs a kernel parameter".into());
    match kind {
        SkipKind::Opab => opab(tape, u, kernel.ok_or_else(need)?, pem_differentiable),
        SkipKind::Oa => oa_ablation(tape, u, kernel.ok_or_else(need)?),
        SkipKind::Identity => Ok(u),
    }
}
