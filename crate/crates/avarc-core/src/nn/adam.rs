//! Adam with fixed learning rate.

use ndarray::ArrayD;

use super::HasParams;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
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

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from the gradients currently accumulated in `params`.
    /// Moment buffers are laid out lazily on the first call.
    pub fn step(&mut self, params: &mut dyn HasParams) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let cfg = self.cfg;

        let first = self.m.is_empty();
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.visit_params("", &mut |mut p| {
            if first {
                m.push(ArrayD::zeros(p.value.raw_dim()));
                v.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let mi = &mut m[idx];
            let vi = &mut v[idx];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(mi)
                .and(vi)
                .for_each(|val, &g, mm, vv| {
                    *mm = cfg.beta1 * *mm + (1.0 - cfg.beta1) * g;
                    *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * g * g;
                    let mhat = *mm / bc1;
                    let vhat = *vv / bc2;
                    *val -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
            idx += 1;
        });
    }
}
