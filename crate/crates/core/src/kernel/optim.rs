use serde::{Deserialize, Serialize};

use super::{KernelError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.len()];
        Self {
            config,
            first: params.iter().map(|(_, _, t)| zeros(t)).collect(),
            second: params.iter().map(|(_, _, t)| zeros(t)).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must follow store order (see
    /// [`super::Gradients::dense`]). Parameters are left untouched when any
    /// gradient is malformed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), KernelError> {
        if grads.len() != params.len() {
            return Err(KernelError::InvalidArgument {
                op: "optimizer_step",
                reason: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for ((id, name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(KernelError::GradientShape {
                    name: name.to_string(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(KernelError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        let ids: Vec<_> = params.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let g = grads[slot].data();
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            for (i, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *p = *p * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = single(0.75);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..10 {
            opt.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(store.get(store.lookup("p").unwrap()).item(), 0.75);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        for g in [0.3, -2.0] {
            let mut store = single(0.0);
            let mut opt = AdamW::new(AdamWConfig::default(), &store);
            for _ in 0..100 {
                opt.step(&mut store, &[Tensor::scalar(g)]).unwrap();
            }
            let p = store.get(store.lookup("p").unwrap()).item();
            assert!(p * g < 0.0, "g={g} p={p}");
        }
    }

    #[test]
    fn decoupled_decay_multiplies_parameter() {
        let mut store = single(1.0);
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        let p = store.get(store.lookup("p").unwrap()).item();
        assert!((p - 0.999).abs() < 1e-15, "{p}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(opt.steps(), 0);
    }
}
