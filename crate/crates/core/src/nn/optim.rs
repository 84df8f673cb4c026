use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer as _, ParamsAdamW};

use crate::Result;

/// Linear warmup to `peak`, then cosine annealing to zero at `total`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Self {
        Self { peak, warmup, total }
    }

    pub fn constant(lr: f64) -> Self {
        Self { peak: lr, warmup: 0, total: 0 }
    }

    /// Learning rate applied at 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.peak;
        }
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / (self.warmup + 1) as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW over a fixed variable set with a step-indexed schedule.
pub struct Trainer {
    opt: AdamW,
    schedule: LrSchedule,
    step: usize,
    clip: Option<f64>,
    vars: Vec<Var>,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, schedule: LrSchedule, weight_decay: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr: schedule.lr(0),
            weight_decay,
            ..Default::default()
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            schedule,
            step: 0,
            clip: None,
            vars,
        })
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip = Some(max_norm);
        self
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Backpropagates `loss` and applies one update.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<GradStore> {
        let mut grads = loss.backward()?;
        if let Some(max_norm) = self.clip {
            let mut sq = 0.0;
            for v in &self.vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    sq += super::layers::scalar(&g.sqr()?.sum_all()?)?;
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                let s = max_norm / (norm + 1e-12);
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * s)?);
                    }
                }
            }
        }
        self.opt.set_learning_rate(self.schedule.lr(self.step));
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(grads)
    }
}
