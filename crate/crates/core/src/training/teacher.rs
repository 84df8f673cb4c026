//! Frozen image noise predictors for score distillation, and an in-repo
//! toy convolutional DDPM teacher trained on synthetic renders.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::cgdit::sinusoidal;
use crate::foundation::tokenize;
use crate::nn::rng::fnv1a64;
use crate::nn::{silu, Init, Linear, Param, ParamBuilder};
use crate::{ensure_config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub channels: usize,
    pub text_table: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            timesteps: 256,
            beta_start: 1e-4 * 1000.0 / 256.0,
            beta_end: 0.02 * 1000.0 / 256.0,
            channels: 32,
            text_table: 256,
            lr: 1e-3,
            steps: 200,
            batch: 4,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.timesteps >= 2, "teacher needs at least 2 timesteps");
        ensure_config!(
            0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0,
            "teacher betas must satisfy 0 < start <= end < 1"
        );
        ensure_config!(self.channels >= 1 && self.text_table >= 1, "teacher widths must be positive");
        Ok(())
    }
}

/// Discrete DDPM schedule with linear betas.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut acc = 1.0;
        let alphas_cumprod = (0..timesteps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self { alphas_cumprod }
    }

    pub fn timesteps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε` for a batch with per-image `t`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        let b = x0.dims()[0];
        ensure_config!(t.len() == b, "{} timesteps for {b} images", t.len());
        let mut shape = vec![b];
        shape.resize(x0.rank(), 1);
        let a: Vec<f64> = t.iter().map(|&s| self.alpha_bar(s).sqrt()).collect();
        let s: Vec<f64> = t.iter().map(|&s| (1.0 - self.alpha_bar(s)).sqrt()).collect();
        let a = Tensor::from_vec(a, b, x0.device())?.to_dtype(x0.dtype())?.reshape(shape.clone())?;
        let s = Tensor::from_vec(s, b, x0.device())?.to_dtype(x0.dtype())?.reshape(shape)?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }
}

/// A noise predictor `ε̂(x_t; t, c)` over `[B, H, W, 3]` images.
pub trait TeacherModel {
    fn schedule(&self) -> &NoiseSchedule;
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], text: &str) -> Result<Tensor>;
}

struct Conv2d {
    weight: Param,
    bias: Param,
}

impl Conv2d {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        Ok(Self {
            weight: pb.get(&[cout, cin, 3, 3], "weight", Init::Uniform(bound))?,
            bias: pb.get(&[cout], "bias", Init::Zeros)?,
        })
    }

    /// `[B, C, H, W]`, padding 1.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight.t(), 1, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.t().reshape((1, (), 1, 1))?)?)
    }
}

/// Three-layer conv denoiser with timestep and hashed-caption conditioning
/// added as per-channel biases.
pub struct ToyTeacher {
    schedule: NoiseSchedule,
    cfg: TeacherConfig,
    conv_in: Conv2d,
    conv_mid: Conv2d,
    conv_out: Conv2d,
    t_proj: Linear,
    text_table: Param,
    text_proj: Linear,
}

impl ToyTeacher {
    pub fn new(pb: &ParamBuilder, cfg: &TeacherConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            schedule: NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end),
            conv_in: Conv2d::new(&pb.pp("conv_in"), 3, c)?,
            conv_mid: Conv2d::new(&pb.pp("conv_mid"), c, c)?,
            conv_out: Conv2d::new(&pb.pp("conv_out"), c, 3)?,
            t_proj: Linear::new(&pb.pp("t_proj"), 32, 2 * c)?,
            text_table: pb.get(&[cfg.text_table, 16], "text_table", Init::Normal(0.5))?,
            text_proj: Linear::new(&pb.pp("text_proj"), 16, 2 * c)?,
            cfg: cfg.clone(),
        })
    }

    fn text_vector(&self, text: &str) -> Result<Tensor> {
        let toks = tokenize(text);
        let table = self.text_table.t();
        if toks.is_empty() {
            return Ok(table.zeros_like()?.narrow(0, 0, 1)?);
        }
        let idx: Vec<u32> = toks.iter().map(|t| (fnv1a64(t.as_bytes()) % self.cfg.text_table as u64) as u32).collect();
        let n = idx.len();
        Ok(table.index_select(&Tensor::from_vec(idx, n, table.device())?, 0)?.mean_keepdim(0)?)
    }
}

impl TeacherModel for ToyTeacher {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, x_t: &Tensor, t: &[usize], text: &str) -> Result<Tensor> {
        let b = x_t.dims()[0];
        let c = self.cfg.channels;
        let tau: Vec<f64> = t.iter().map(|&s| s as f64 / self.schedule.timesteps() as f64).collect();
        let tau = Tensor::from_vec(tau, b, x_t.device())?.to_dtype(x_t.dtype())?;
        let emb = self
            .t_proj
            .forward(&sinusoidal(&tau, 32, self.schedule.timesteps() as f64)?)?
            .broadcast_add(&self.text_proj.forward(&self.text_vector(text)?)?)?;
        let emb = emb.reshape((b, 2 * c, 1, 1))?;
        let e1 = emb.narrow(1, 0, c)?;
        let e2 = emb.narrow(1, c, c)?;
        let x = x_t.permute([0, 3, 1, 2])?.contiguous()?;
        let h = silu(&self.conv_in.forward(&x)?.broadcast_add(&e1)?)?;
        let h = silu(&self.conv_mid.forward(&h)?.broadcast_add(&e2)?)?;
        let out = self.conv_out.forward(&h)?;
        Ok(out.permute([0, 2, 3, 1])?.contiguous()?)
    }
}

/// Standard DDPM noise-regression loss on clean images.
pub fn teacher_loss<T: TeacherModel + ?Sized>(
    teacher: &T,
    images: &Tensor,
    text: &str,
    rng: &mut impl rand::Rng,
) -> Result<Tensor> {
    let b = images.dims()[0];
    let n = teacher.schedule().timesteps();
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
    let eps = crate::nn::rng::randn(rng, images.dims(), images.dtype(), images.device())?;
    let x_t = teacher.schedule().add_noise(images, &eps, &t)?;
    let pred = teacher.predict_noise(&x_t, &t, text)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

