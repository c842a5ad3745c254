//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Named gradient buffers. Accumulation is additive; call [`GradMap::zero`]
/// between steps.
#[derive(Clone, Debug, Default)]
pub struct GradMap<T: Float = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> GradMap<T> {
    pub fn new() -> Self {
        GradMap {
            grads: BTreeMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(existing) => {
                if existing.shape() != grad.shape() {
                    return Err(Error::shape(format!(
                        "gradient for {name}: {:?} vs {:?}",
                        existing.shape(),
                        grad.shape()
                    )));
                }
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + *b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }
}

struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

pub struct AdamW<T: Float = f32> {
    pub config: AdamWConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    /// Updates every parameter that has `requires_grad` set. Tensors without
    /// it are left untouched. Fails without modifying anything if a trainable
    /// parameter has no gradient.
    pub fn step<'a, N, I>(&mut self, params: I, grads: &GradMap<T>) -> Result<()>
    where
        N: AsRef<str>,
        I: IntoIterator<Item = (N, &'a mut Tensor<T>)>,
    {
        let mut trainable = Vec::new();
        for (name, p) in params {
            if !p.requires_grad() {
                continue;
            }
            let name = name.as_ref().to_string();
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Usage(format!("no gradient for trainable parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            trainable.push((name, p, g));
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let lr = T::from_f64_lossy(c.learning_rate);
        let decay = T::from_f64_lossy(c.learning_rate * c.weight_decay);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.epsilon);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));

        for (name, p, g) in trainable {
            let m = self.moments.entry(name).or_insert_with(|| Moments {
                first: vec![T::zero(); p.numel()],
                second: vec![T::zero(); p.numel()],
            });
            for (((w, gi), m1), m2) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = b1 * *m1 + (T::one() - b1) * *gi;
                *m2 = b2 * *m2 + (T::one() - b2) * *gi * *gi;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *w = *w - decay * *w;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v).with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = scalar_param(0.7);
        let mut grads = GradMap::new();
        grads.accumulate("w", &Tensor::scalar(0.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step([("w", &mut p)], &grads).unwrap();
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd_param() {
        let mut p = scalar_param(2.0);
        let mut grads = GradMap::new();
        grads.accumulate("w", &Tensor::scalar(0.0)).unwrap();
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step([("w", &mut p)], &grads).unwrap();
        assert!((p.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_recurrence_over_three_steps() {
        // Hand-evaluated AdamW on a scalar, independent of the vectorised loop.
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let gs = [0.5, -0.25, 1.5];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * 0.1 * w;
            w -= 0.01 * mhat / (vhat.sqrt() + 1e-8);
        }

        let mut p = scalar_param(1.0);
        let mut opt = AdamW::new(cfg);
        for g in gs {
            let mut grads = GradMap::new();
            grads.accumulate("w", &Tensor::scalar(g)).unwrap();
            opt.step([("w", &mut p)], &grads).unwrap();
        }
        assert_eq!(opt.step_count(), 3);
        assert!((p.data()[0] - w).abs() < 1e-14, "{} vs {w}", p.data()[0]);
    }

    #[test]
    fn first_step_of_unit_gradient_moves_by_lr() {
        // After bias correction the first update is lr·sign(g) (up to eps).
        let mut p = scalar_param(0.0);
        let mut grads = GradMap::new();
        grads.accumulate("w", &Tensor::scalar(3.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step([("w", &mut p)], &grads).unwrap();
        assert!((p.data()[0] + 0.05).abs() < 1e-9);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut frozen = Tensor::<f64>::scalar(5.0);
        let mut grads = GradMap::new();
        grads.accumulate("f", &Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step([("f", &mut frozen)], &grads).unwrap();
        assert_eq!(frozen.data(), &[5.0]);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut a = scalar_param(1.0);
        let mut b = scalar_param(2.0);
        let mut grads = GradMap::new();
        grads.accumulate("a", &Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step([("a", &mut a), ("b", &mut b)], &grads).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(a.data(), &[1.0], "no partial update");
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let mut p = Tensor::<f64>::zeros(&[2, 3]).with_requires_grad(true);
        let mut grads = GradMap::new();
        grads.accumulate("p", &Tensor::ones(&[2, 3])).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step([("p", &mut p)], &grads).unwrap();
        assert_eq!(opt.first_moment("p").unwrap().len(), 6);
        assert_eq!(opt.second_moment("p").unwrap().len(), 6);
    }

    #[test]
    fn grad_map_accumulates_until_zeroed() {
        let mut grads = GradMap::<f64>::new();
        grads.accumulate("w", &Tensor::scalar(1.5)).unwrap();
        grads.accumulate("w", &Tensor::scalar(2.0)).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[3.5]);
        grads.zero();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0]);
    }
}
