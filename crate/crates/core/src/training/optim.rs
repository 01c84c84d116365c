use serde::{Deserialize, Serialize};

use crate::adapter::WanderParams;

use super::GradientBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Stateful first-order optimizer over the flattened parameter arrays.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, p: &WanderParams) -> Self {
        let zeros: Vec<Vec<f64>> = p
            .named_slices()
            .iter()
            .map(|(_, s)| vec![0.0; s.len()])
            .collect();
        Self {
            kind,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `frozen[i]` skips array `i`.
    pub fn step(&mut self, p: &mut WanderParams, g: &GradientBundle, lr: f64, frozen: &[bool]) {
        self.step += 1;
        let t = self.step as i32;
        let grads = g.0.named_slices();
        for (i, dst) in p.slices_mut().into_iter().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let gi = grads[i].1;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, d) in dst.iter_mut().zip(gi) {
                        *x -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (x, d)) in dst.iter_mut().zip(gi).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Step decay: `lr * gamma^(epoch / step_size)`; `step_size = 0` disables it.
pub fn step_decay(lr: f64, gamma: f64, step_size: usize, epoch: usize) -> f64 {
    if step_size == 0 {
        lr
    } else {
        lr * gamma.powi((epoch / step_size) as i32)
    }
}
