use serde::{Deserialize, Serialize};

use crate::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the full gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Whether a step was applied or skipped for non-finite gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    skipped: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            skipped: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    /// Applies one update. `grads[i]` belongs to parameter `i` of `params`;
    /// `None` is treated as a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> StepOutcome {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        let finite = grads
            .iter()
            .flatten()
            .all(|g| g.is_finite());
        if !finite {
            self.skipped += 1;
            log::warn!(
                "skipping optimizer step {}: non-finite gradient ({} skipped so far)",
                self.step + 1,
                self.skipped
            );
            return StepOutcome::Skipped;
        }
        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (id, grad) in grads.iter().enumerate() {
            let n = params.by_id(id).numel();
            let m = self.m[id].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id].get_or_insert_with(|| vec![0.0; n]);
            match grad {
                Some(g) => {
                    assert_eq!(g.numel(), n, "gradient shape for {}", params.name(id));
                    for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        let gi = gi * scale;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                    }
                }
                None => {
                    m.iter_mut().for_each(|x| *x *= c.beta1);
                    v.iter_mut().for_each(|x| *x *= c.beta2);
                }
            }
            if m.iter().all(|&x| x == 0.0) {
                continue;
            }
            let p = params.by_id_mut(id);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bias1;
                let vhat = vi / bias2;
                *pi -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        StepOutcome::Applied
    }
}
