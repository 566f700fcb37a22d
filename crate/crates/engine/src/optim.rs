use crate::error::{EngineError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state; one moment pair per parameter slot.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that requires a gradient, then clears all
    /// gradients. Fails without touching any value if a trainable
    /// parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.requires_grad && p.grad.is_none() {
                return Err(EngineError::MissingGrad(p.name.clone()));
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            if !p.requires_grad {
                continue;
            }
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let values = p.value.data_mut();
            for (((w, g), m), v) in values
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(store: &mut ParamStore, f: impl Fn(&[f64]) -> Vec<f64>) {
        let id = store.ids().next().unwrap();
        let g = f(store.value(id).data());
        let n = g.len();
        store.get_mut(id).grad = Some(Tensor::new(vec![n], g).unwrap());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.5, -2.0])).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            store.get_mut(id).grad = Some(Tensor::zeros(&[2]));
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        quadratic_grad(&mut store, |w| vec![2.0 * w[0]]);
        adam.step(&mut store).unwrap();
        let w = store.value(id).data()[0];
        assert!(w * w < 1.0);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn converges_on_two_parameter_quadratic() {
        // f(a, b) = (a - 3)^2 + 2 (b + 1)^2 with optimum (3, -1).
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            quadratic_grad(&mut store, |w| vec![2.0 * (w[0] - 3.0), 4.0 * (w[1] + 1.0)]);
            adam.step(&mut store).unwrap();
        }
        let w = store.value(id).data();
        assert!((w[0] - 3.0).abs() <= 1e-3 && (w[1] + 1.0).abs() <= 1e-3, "{w:?}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut store), Err(EngineError::MissingGrad(_))));
    }
}
