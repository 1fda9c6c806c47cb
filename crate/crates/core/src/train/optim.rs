use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{schema, EncoderWeights};
use crate::numerics::{Gradients, Real, Tensor};
use crate::surgery::TrainabilityMask;

use super::config::TrainConfig;

struct Slot<T: Real> {
    m: Tensor<T>,
    v: Tensor<T>,
    decay: bool,
}

/// AdamW with decoupled weight decay. Moments exist only for trainable tensors.
pub struct AdamW<T: Real = f32> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    slots: IndexMap<String, Slot<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weights: &EncoderWeights<T>, mask: &TrainabilityMask, cfg: &TrainConfig) -> Result<Self> {
        let mut slots = IndexMap::new();
        for spec in schema(weights.config()) {
            if !mask.is_trainable(&spec.name) {
                continue;
            }
            let t = weights.tensor(&spec.name)?;
            slots.insert(
                spec.name.clone(),
                Slot {
                    m: Tensor::zeros(t.shape()),
                    v: Tensor::zeros(t.shape()),
                    decay: spec.kind.decays(),
                },
            );
        }
        if slots.is_empty() {
            return Err(Error::NothingToTrain);
        }
        Ok(AdamW {
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            slots,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Names of the tensors this optimizer updates.
    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// One update at learning rate `lr`. Tensors without a slot are never touched.
    pub fn step(&mut self, weights: &mut EncoderWeights<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (name, _) in self.slots.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for trainable tensor `{name}`")))?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - self.beta1), T::from_f64_lossy(1.0 - self.beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        for (name, slot) in self.slots.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let p = weights
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    found: g.shape().to_vec(),
                    expected: p.shape().to_vec(),
                });
            }
            let decay = if slot.decay {
                T::from_f64_lossy(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut().iter_mut().zip(slot.v.data_mut()));
            for ((w, &gi), (m, v)) in iter {
                *w *= decay;
                *m = b1 * *m + one_b1 * gi;
                *v = b2 * *v + one_b2 * gi * gi;
                *w -= step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(T::from_f64_lossy(max_norm / (norm + 1e-6)));
    }
    norm
}
