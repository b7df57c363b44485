use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::Scalar;

/// Learning rate multiplied by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStepLr {
    pub fn new(base: f64, milestones: Vec<usize>, factor: f64) -> Self {
        MultiStepLr {
            base,
            milestones,
            factor,
        }
    }

    /// Rate used during (zero-based) `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(passed as i32)
    }

    pub fn trace(&self, epochs: usize) -> Vec<f64> {
        (0..epochs).map(|e| self.lr(e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments kept in f64 regardless of `T`.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter `{name}`")))?;
            if p.numel() != g.len() {
                return Err(Error::config(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.to_f64_lossy();
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w = T::of(w.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_decays_at_milestones() {
        let s = MultiStepLr::new(0.002, vec![170, 200], 0.1);
        assert_eq!(s.lr(169), 0.002);
        assert!((s.lr(170) - 0.0002).abs() < 1e-15);
        assert!((s.lr(209) - 0.00002).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_about_lr() {
        for g in [1e-3, 0.7, -25.0] {
            let mut p = ModelParams::<f64>::new();
            p.insert("w", Tensor::zeros([1, 1, 1, 1]));
            let mut adam = Adam::new(AdamConfig::default());
            let grads = BTreeMap::from([("w".to_string(), vec![g])]);
            adam.step(&mut p, &grads, 0.002).unwrap();
            let moved = p.get("w").unwrap().data()[0];
            assert!((moved.abs() - 0.002).abs() < 1e-7, "{g}: {moved}");
            assert_eq!(moved.signum(), -g.signum());
        }
    }
}
