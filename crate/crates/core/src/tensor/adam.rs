use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every entry of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |i: usize| vec![T::zero(); params.get(super::ParamId(i)).len()];
        Self { m: (0..params.len()).map(zeros).collect(), v: (0..params.len()).map(zeros).collect(), t: 0 }
    }

    /// One Adam update. Entries whose gradient is `None` are left untouched,
    /// as are non-trainable buffers. `lr` overrides `cfg.lr` (schedules).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], cfg: &AdamConfig, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} state slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::one() - T::lit(cfg.beta1.powi(t));
        let bc2 = T::one() - T::lit(cfg.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(cfg.eps);
        for (i, g) in grads.iter().enumerate() {
            let id = super::ParamId(i);
            let Some(g) = g else { continue };
            if !params.is_trainable(id) {
                continue;
            }
            let p = params.get_mut(id).data_mut();
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::shape("adam_step", format!("param {i}: {} values, grad {}", p.len(), g.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
