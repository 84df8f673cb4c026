//! Loss stack, the SDS teacher, checkpoints and the three-stage schedule.

pub mod checkpoint;
pub mod losses;
pub mod stages;
pub mod teacher;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use losses::{loss_sds, loss_st, loss_total, LossWeights, SdsOutput, StOutput};
pub use stages::{
    load_dataset, save_dataset, train_stage1, train_stage2, train_stage3, train_teacher, Dataset, StageReport,
};
pub use teacher::{teacher_loss, NoiseSchedule, TeacherConfig, TeacherModel, ToyTeacher};

use serde::{Deserialize, Serialize};

use crate::{ensure_config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps per stage phase.
    pub steps: usize,
    pub lr: f64,
    /// Learning rate of the codec, diffusion and adapter phases of stage 1.
    pub pretrain_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Rollout horizon used while training.
    pub horizon: usize,
    /// Euler steps of the differentiable sampler in stages 2 and 3.
    pub sample_steps: usize,
    pub sds_t_min: usize,
    pub sds_t_max: usize,
    /// Cameras rendered per SDS / pixel term (taken from the scene ring).
    pub render_views: usize,
    /// Times sampled in `[0, 1]` for the pixel and smoothness terms.
    pub render_times: usize,
    /// Noise draws per latent in one flow-matching step.
    pub fm_repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-4,
            pretrain_lr: 1e-3,
            warmup: 20,
            weight_decay: 0.01,
            grad_clip: 1.0,
            horizon: 4,
            sample_steps: 4,
            sds_t_min: 20,
            sds_t_max: 230,
            render_views: 2,
            render_times: 3,
            fm_repeats: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.steps >= 1, "train.steps must be at least 1");
        ensure_config!(self.lr > 0.0 && self.pretrain_lr > 0.0, "learning rates must be positive");
        ensure_config!(self.weight_decay >= 0.0, "train.weight_decay must be nonnegative");
        ensure_config!(self.grad_clip > 0.0, "train.grad_clip must be positive");
        ensure_config!(self.sample_steps >= 1, "train.sample_steps must be at least 1");
        ensure_config!(self.sds_t_min <= self.sds_t_max, "train.sds_t_min must not exceed train.sds_t_max");
        ensure_config!(self.render_views >= 1, "train.render_views must be at least 1");
        ensure_config!(self.render_times >= 3, "train.render_times must be at least 3 for the smoothness term");
        ensure_config!(self.fm_repeats >= 1, "train.fm_repeats must be at least 1");
        Ok(())
    }
}
