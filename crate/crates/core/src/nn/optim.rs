use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// AdamW with decoupled weight decay.
///
/// Each step first shrinks the parameter, `p ← p − lr·wd·p`, then applies the
/// bias-corrected Adam update computed from the moments.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(base_lr: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            base_lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter named in `grads` in place.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        if lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter `{name}`"))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{name}` at element {i}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            let n = g.numel();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let p = params.get_mut(name).expect("checked above").data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamW::step`].
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamW<T>,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([1], vec![w]).unwrap());
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::new([1], vec![g]).unwrap())])
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = single(0.75);
        let mut opt = AdamW::new(1e-3, 0.0);
        for _ in 0..10 {
            opt.step(&mut s, &grad(0.0), 1e-3).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 0.75);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut s = single(1.0);
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut s, &grad(1.0), 1e-3).unwrap();
        // m̂ = v̂ = 1, so the update is lr / (1 + eps).
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_scales_parameter() {
        let mut s = single(1.0);
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut s, &grad(0.0), 0.1).unwrap();
        assert!((s.get("w").unwrap().data()[0] - (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut s = single(1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        let err = opt.step(&mut s, &grad(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(s.get("w").unwrap().data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
