//! Adam optimizer with optional decoupled weight decay.

use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    /// Decoupled weight decay, applied directly to the parameters.
    pub weight_decay: Real,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: Real) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment state for a fixed list of parameter tensors.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Self {
        Adam {
            cfg,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One update over aligned (parameter, gradient) lists.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as Real;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.numel(), g.numel());
            let wd = self.cfg.weight_decay;
            for ((pv, &gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= self.cfg.learning_rate * (m_hat / (v_hat.sqrt() + self.cfg.epsilon));
                if wd != 0.0 {
                    *pv -= self.cfg.learning_rate * wd * *pv;
                }
            }
        }
    }
}
