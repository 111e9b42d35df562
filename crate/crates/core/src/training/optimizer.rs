use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `min_lr` over `total_steps`
    /// (0 stands for the length of the whole run).
    Cosine { total_steps: usize, min_lr: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps, min_lr } => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW with decoupled weight decay. Moment buffers exist only for
/// tensors that were trainable when stepped.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    steps: u64,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// One update at learning rate `lr` over every trainable tensor.
    /// Frozen tensors are skipped whatever their gradient buffer holds.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let pending: Vec<ParamId> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
        for &id in &pending {
            if store.get(id).grad().is_none() {
                return Err(Error::Contract(format!(
                    "trainable tensor `{}` has no gradient",
                    store.name(id)
                )));
            }
        }
        self.steps += 1;
        let (b1, b2) = self.cfg.betas;
        let t = self.steps as i32;
        let c1 = T::from_f64_lossy(1.0 - b1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - b2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.cfg.eps);
        let wd = T::from_f64_lossy(self.cfg.weight_decay);
        for id in pending {
            let tensor = store.get_mut(id);
            let n = tensor.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let (theta, grad) = tensor.data_and_grad_mut();
            let grad = grad.expect("checked above");
            for i in 0..n {
                let g = grad[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
            }
        }
        Ok(())
    }
}
