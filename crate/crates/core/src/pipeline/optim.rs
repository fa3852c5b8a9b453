//! Bias-corrected ADAM and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LR0: f64 = 3e-4;
pub const LR_MIN: f64 = 1e-6;

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`; steps past the end give `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if total_steps == 0 && step == 0 { lr0 } else { lr_min };
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed updates.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    /// Apply one update to every `(name, parameter, gradient)`.
    ///
    /// All gradients are checked before anything is modified; a non-finite
    /// value aborts with the parameter's name.
    pub fn step<'a, I>(&mut self, items: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
    {
        let items: Vec<_> = items.into_iter().collect();
        for (name, p, g) in &items {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in {name} at index {i}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one = T::one();
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(self.eps));
        for (name, p, g) in items {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
