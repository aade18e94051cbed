use crate::{Error, ParamStore, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Skip the moment estimates and apply `w -= lr * grad` directly.
    pub plain_sgd: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plain_sgd: false,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step on every tensor in `params`, then clears the
    /// gradients. Fails without touching anything if a gradient is missing.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(i) = (0..params.len()).find(|&i| params.get(i).grad().is_none()) {
            return Err(Error::MissingGrad(params.name(i).to_string()));
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powf(self.step as f64);
        let bias2 = 1.0 - c.beta2.powf(self.step as f64);
        for i in 0..params.len() {
            let t = params.get_mut(i);
            let grad = t.grad().unwrap().to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                if c.plain_sgd {
                    *w -= c.lr * g;
                    continue;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
