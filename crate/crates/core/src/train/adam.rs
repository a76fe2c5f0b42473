use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::ParamStore;
use crate::tensor::{Real, Tensor};

/// Bias-corrected Adam with per-parameter moments, created lazily on the
/// first update of each parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments of `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every parameter in `grads` that is not `frozen`.
    /// Gradients are checked for NaN / infinity before anything is touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        frozen: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (name, g) in grads.iter().filter(|(n, _)| !frozen(n)) {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(&[1], v));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::full(&[1], g))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.5);
        let mut adam = AdamState::new();
        adam.step(&mut p, &grad(1.0), 1e-3, |_| false).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w - (0.5 - 1e-3)).abs() < 1e-9, "{w}");
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = single(0.5);
        let mut adam = AdamState::new();
        adam.step(&mut p, &grad(2.0), 1e-2, |_| false).unwrap();
        let w1 = p.get("w").unwrap().item();
        let m1 = adam.moments("w").unwrap().0[0];
        let mut q = single(w1);
        let mut fresh = AdamState::new();
        fresh.step(&mut q, &grad(0.0), 1e-2, |_| false).unwrap();
        assert_eq!(q.get("w").unwrap().item(), w1);
        adam.step(&mut p, &grad(0.0), 1e-2, |_| false).unwrap();
        assert!((adam.moments("w").unwrap().0[0] - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched_and_nan_rejected() {
        let mut p = single(0.5);
        let mut adam = AdamState::new();
        adam.step(&mut p, &grad(3.0), 1e-2, |n| n == "w").unwrap();
        assert_eq!(p.get("w").unwrap().item().to_bits(), 0.5f64.to_bits());
        assert!(adam.moments("w").is_none());
        assert!(matches!(
            adam.step(&mut p, &grad(f64::NAN), 1e-2, |_| false),
            Err(Error::NonFinite(_))
        ));
    }
}
