//! Stochastic gradient descent with Nesterov momentum and a polynomial
//! learning-rate decay.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 5e-4, nesterov: true }
    }
}

/// Optimizer state: one velocity buffer per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Updates one parameter in place:
    /// `d = g + wd*p; v = mu*v + d; p -= lr * (d + mu*v)` (Nesterov) or `lr * v`.
    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(param.len(), grad.len(), "parameter/gradient length mismatch");
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != param.len() {
            *v = vec![0.0; param.len()];
        }
        let SgdConfig { momentum, weight_decay, nesterov } = self.config;
        for ((p, &g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            let mut d = g;
            if weight_decay != 0.0 {
                d += weight_decay * *p;
            }
            if momentum != 0.0 {
                *vi = momentum * *vi + d;
                d = if nesterov { d + momentum * *vi } else { *vi };
            }
            *p -= lr * d;
        }
    }

    pub fn velocity(&self, slot: usize) -> Option<&[f64]> {
        self.velocity.get(slot).map(Vec::as_slice)
    }

    pub fn set_velocity(&mut self, slot: usize, v: Vec<f64>) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        self.velocity[slot] = v;
    }
}

/// `base * (1 - step/total)^power`; constant when `total == 0`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * (1.0 - frac).powf(power)
}
