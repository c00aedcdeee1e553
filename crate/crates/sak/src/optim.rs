//! Adam with decoupled weight decay, learning-rate schedules, and
//! gradient clipping.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Poly,
    Constant,
}

/// Optimizer hyperparameters as they appear in run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Warmup length as a fraction of total steps (linear ramp).
    #[serde(default)]
    pub warmup_frac: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
}

fn default_kind() -> String {
    "adamw".to_string()
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl OptimConfig {
    /// Learning rate at `step` of `total` under the configured schedule.
    /// The poly schedule uses the conventional power 0.9.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_frac * total as f64).round() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup.max(1) as f64;
        }
        let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
        match self.schedule {
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
            Schedule::Poly => self.lr * (1.0 - t).max(0.0).powf(0.9),
            Schedule::Constant => self.lr,
        }
    }
}

/// Adam with decoupled weight decay, state kept per parameter entry in
/// insertion order.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update. `grads` must come from a tape on which `params`
    /// were bound in insertion order (as [`ParamSet::bind`] does).
    /// Returns the global gradient norm before clipping.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        bound_grads: &[(String, Option<ArrayD<f64>>)],
        lr: f64,
        clip: f64,
    ) -> f64 {
        self.step += 1;
        let mut sq_norm = 0.0;
        for (_, g) in bound_grads {
            if let Some(g) = g {
                sq_norm += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq_norm.sqrt();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, value)) in params.iter_mut().enumerate() {
            let Some(g) = &bound_grads[i].1 else { continue };
            debug_assert_eq!(bound_grads[i].0, name);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g * scale;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                let gs = g * scale;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gs * gs;
            });
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
        }
        norm
    }
}

/// Collect per-parameter gradients by name from a backward pass.
pub fn collect_grads(
    params: &ParamSet,
    bound: &crate::params::Bound<'_>,
    grads: &Gradients,
) -> Vec<(String, Option<ArrayD<f64>>)> {
    params
        .iter()
        .map(|(name, _)| {
            let var = bound.var(name);
            (name.to_string(), grads.get(var).cloned())
        })
        .collect()
}
