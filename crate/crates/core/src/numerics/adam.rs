use super::param::ParamStore;
use crate::error::{Error, Result};

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl Adam {
    /// One update of every parameter from its accumulated gradient. A parameter
    /// without a gradient buffer is treated as having a zero gradient.
    ///
    /// Nothing is modified if any gradient contains a non-finite value.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter() {
            if let Some(g) = p.value.grad() {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter '{}' at index {pos}",
                        p.name
                    )));
                }
            }
        }
        for p in store.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let n = p.value.len();
            let grad: Vec<f64> = p.value.grad().map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
            let m = p.first_moment.data_mut();
            for (m, g) in m.iter_mut().zip(&grad) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = p.second_moment.data_mut();
            for (v, g) in v.iter_mut().zip(&grad) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let m = p.first_moment.data();
            let v = p.second_moment.data();
            let mut update = Vec::with_capacity(n);
            for i in 0..n {
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                update.push(m_hat / (v_hat.sqrt() + self.eps));
            }
            let w = p.value.data_mut();
            for (w, u) in w.iter_mut().zip(update) {
                *w -= self.lr * (u + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}
