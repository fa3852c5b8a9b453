//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error of tiny gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Check only this many randomly drawn coordinates (all when `None`).
    pub samples: Option<usize>,
    pub seed: u64,
    /// Perturb the analytic gradient before comparing. Self-test hook.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples: None,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F, backward: bool) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Usage("gradient check needs a scalar objective".into()));
    }
    let value = tape.value(loss).item();
    if !backward {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok((value, grads))
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, mut analytic) = evaluate(inputs, &f, true)?;
    if opts.inject_fault {
        for g in &mut analytic {
            g.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.1);
        }
    }
    let coords: Vec<(usize, usize)> = match opts.samples {
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let total: usize = inputs.iter().map(Tensor::numel).sum();
            (0..k.min(total))
                .map(|_| {
                    let mut flat = rng.random_range(0..total);
                    let mut i = 0;
                    while flat >= inputs[i].numel() {
                        flat -= inputs[i].numel();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, j) in coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + opts.step;
        let (plus, _) = evaluate(&probe, &f, false)?;
        probe[i].data_mut()[j] = orig - opts.step;
        let (minus, _) = evaluate(&probe, &f, false)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i].data()[j];
        let err = rel_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst = Some(Mismatch {
                input: i,
                index: j,
                analytic: a,
                numeric,
                rel_error: err,
            });
        }
    }
    Ok(report)
}

/// Reduce a tensor to a scalar by a fixed random projection, so that every
/// output element contributes a distinct weight to the gradient.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let r = tape.constant(r);
    let prod = tape.mul(v, r)?;
    Ok(tape.sum(prod))
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}
