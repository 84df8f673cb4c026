//! Score distillation, spatiotemporal supervision, and the weighted total.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::teacher::TeacherModel;
use crate::gaussians4d::{chamfer, render, temporal_smoothness, Camera, Gaussian4DScene};
use crate::nn::layers::scalar;
use crate::{ensure_config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Constant SDS weighting `w(t)`.
    pub sds_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.5, gamma: 1.0, lambda1: 1.0, lambda2: 0.1, lambda3: 0.5, sds_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("sds_weight", self.sds_weight),
        ] {
            ensure_config!(v >= 0.0 && v.is_finite(), "loss.{name} must be a finite nonnegative number, got {v}");
        }
        Ok(())
    }
}

/// Result of one SDS evaluation. `loss` carries the reported value and,
/// under backpropagation, the gradient `w·√ᾱ_t·(ε̂ − ε)/B` per pixel.
#[derive(Debug, Clone)]
pub struct SdsOutput {
    pub loss: Tensor,
    pub value: f64,
    pub timesteps: Vec<usize>,
}

/// Score distillation over rendered images `[B, H, W, 3]`. The reported
/// value is `w·‖ε̂ − ε‖²` averaged over images; the teacher Jacobian is
/// never formed.
pub fn loss_sds<T: TeacherModel + ?Sized>(
    rendered: &Tensor,
    teacher: &T,
    text: &str,
    t_range: (usize, usize),
    weight: f64,
    rng: &mut impl Rng,
) -> Result<SdsOutput> {
    let sched = teacher.schedule();
    let (lo, hi) = t_range;
    ensure_config!(lo <= hi && hi < sched.timesteps(), "SDS range {lo}..={hi} outside 0..{}", sched.timesteps());
    let b = rendered.dims()[0];
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(lo..=hi)).collect();
    let x0 = rendered.detach();
    let eps = crate::nn::rng::randn(rng, x0.dims(), x0.dtype(), x0.device())?;
    let x_t = sched.add_noise(&x0, &eps, &t)?;
    let residual = (teacher.predict_noise(&x_t, &t, text)?.detach() - eps)?;
    let value = (residual.sqr()?.sum_all()? * (weight / b as f64))?;
    let mut shape = vec![b];
    shape.resize(rendered.rank(), 1);
    let coef: Vec<f64> = t.iter().map(|&s| weight * sched.alpha_bar(s).sqrt() / b as f64).collect();
    let coef = Tensor::from_vec(coef, b, x0.device())?.to_dtype(x0.dtype())?.reshape(shape)?;
    let grad = residual.broadcast_mul(&coef)?;
    let surrogate = (rendered * &grad)?.sum_all()?;
    let loss = ((value.clone() + surrogate)? - (&x0 * &grad)?.sum_all()?)?;
    Ok(SdsOutput { value: scalar(&value)?, loss, timesteps: t })
}

/// Weighted parts of the spatiotemporal loss.
#[derive(Debug, Clone)]
pub struct StOutput {
    pub loss: Tensor,
    pub chamfer: Tensor,
    pub smoothness: Tensor,
    pub render: Tensor,
}

/// Chamfer at `t = 0`, plus `β`·temporal smoothness of the prediction,
/// plus `γ`·mean pixel MSE between renders over every (camera, time).
pub fn loss_st(
    pred: &Gaussian4DScene,
    gt: &Gaussian4DScene,
    cameras: &[Camera],
    times: &[f64],
    weights: &LossWeights,
) -> Result<StOutput> {
    ensure_config!(!cameras.is_empty() && !times.is_empty(), "spatiotemporal loss needs cameras and times");
    let cd = chamfer(&pred.positions_at(0.0)?, &gt.positions_at(0.0)?)?;
    let smooth = if weights.beta > 0.0 {
        temporal_smoothness(pred, times)?
    } else {
        cd.zeros_like()?
    };
    let mut terms = Vec::with_capacity(cameras.len() * times.len());
    if weights.gamma > 0.0 {
        for cam in cameras {
            for &t in times {
                terms.push((render(pred, cam, t)? - render(gt, cam, t)?)?.sqr()?.mean_all()?);
            }
        }
    }
    let pix = if terms.is_empty() { cd.zeros_like()? } else { Tensor::stack(&terms, 0)?.mean(0)? };
    let loss = ((&cd + (&smooth * weights.beta)?)? + (&pix * weights.gamma)?)?;
    Ok(StOutput { loss, chamfer: cd, smoothness: smooth, render: pix })
}

/// `λ1·L_WM + λ2·L_SDS + λ3·L_ST`.
pub fn loss_total(wm: &Tensor, sds: &Tensor, st: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((((wm * w.lambda1)? + (sds * w.lambda2)?)? + (st * w.lambda3)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians4d::Camera;
    use crate::nn::layers::to_f64_vec;
    use crate::nn::rng;
    use crate::training::teacher::NoiseSchedule;
    use candle_core::{DType, Device, Var};
    use std::cell::RefCell;

    /// Records its inputs and answers with a fixed function of them.
    struct Probe {
        schedule: NoiseSchedule,
        x0: Tensor,
        constant: Option<f64>,
        seen: RefCell<Option<(Tensor, Vec<usize>)>>,
    }

    impl TeacherModel for Probe {
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }

        fn predict_noise(&self, x_t: &Tensor, t: &[usize], _text: &str) -> Result<Tensor> {
            *self.seen.borrow_mut() = Some((x_t.clone(), t.to_vec()));
            match self.constant {
                Some(c) => Ok((x_t.ones_like()? * c)?),
                None => {
                    // Exact noise recovery from the known clean image.
                    let a = self.schedule.alpha_bar(t[0]);
                    Ok(((x_t - (&self.x0 * a.sqrt())?)? / (1.0 - a).sqrt())?)
                }
            }
        }
    }

    fn probe(x0: &Tensor, constant: Option<f64>) -> Probe {
        Probe {
            schedule: NoiseSchedule::linear(256, 1e-4 * 1000.0 / 256.0, 0.02 * 1000.0 / 256.0),
            x0: x0.clone(),
            constant,
            seen: RefCell::new(None),
        }
    }

    fn image(seed: u64) -> Var {
        let t = rng::rand_uniform(&mut rng::seeded(seed), &[1, 2, 2, 3], 0.0, 1.0, DType::F64, &Device::Cpu).unwrap();
        Var::from_tensor(&t).unwrap()
    }

    #[test]
    fn perfect_teacher_gives_zero_value_and_gradient() {
        let x = image(1);
        let teacher = probe(x.as_tensor(), None);
        let out = loss_sds(x.as_tensor(), &teacher, "", (20, 230), 1.0, &mut rng::seeded(3)).unwrap();
        assert!(out.value.abs() < 1e-20);
        let g = out.loss.backward().unwrap();
        let g = to_f64_vec(g.get(x.as_tensor()).unwrap()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn constant_teacher_gradient_is_scaled_residual() {
        let x = image(2);
        let teacher = probe(x.as_tensor(), Some(0.3));
        let w = 1.7;
        let out = loss_sds(x.as_tensor(), &teacher, "a", (20, 230), w, &mut rng::seeded(4)).unwrap();
        let (x_t, t) = teacher.seen.borrow().clone().unwrap();
        assert!((20..=230).contains(&t[0]));
        let a = teacher.schedule.alpha_bar(t[0]);
        let eps: Vec<f64> = to_f64_vec(&x_t)
            .unwrap()
            .iter()
            .zip(to_f64_vec(x.as_tensor()).unwrap())
            .map(|(xt, x0)| (xt - a.sqrt() * x0) / (1.0 - a).sqrt())
            .collect();
        let grads = out.loss.backward().unwrap();
        let g = to_f64_vec(grads.get(x.as_tensor()).unwrap()).unwrap();
        for (gi, e) in g.iter().zip(&eps) {
            assert!((gi - w * a.sqrt() * (0.3 - e)).abs() < 1e-9);
        }
        let value: f64 = eps.iter().map(|e| (0.3 - e).powi(2)).sum::<f64>() * w;
        assert!((out.value - value).abs() < 1e-9);
        assert!((scalar(&out.loss).unwrap() - value).abs() < 1e-9);
    }

    #[test]
    fn sds_is_deterministic_under_a_seed() {
        let x = image(5);
        let teacher = probe(x.as_tensor(), Some(-0.1));
        let a = loss_sds(x.as_tensor(), &teacher, "", (20, 230), 1.0, &mut rng::seeded(9)).unwrap();
        let b = loss_sds(x.as_tensor(), &teacher, "", (20, 230), 1.0, &mut rng::seeded(9)).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.timesteps, b.timesteps);
        assert!(loss_sds(x.as_tensor(), &teacher, "", (20, 256), 1.0, &mut rng::seeded(9)).is_err());
    }

    fn scene(moving: bool) -> Gaussian4DScene {
        let dev = Device::Cpu;
        let t = |v: Vec<f64>, s: &[usize]| rng::from_f64(v, s, DType::F64, &dev).unwrap();
        let mut deform = vec![0.0; 2 * 3 * 2];
        if moving {
            deform[1] = 0.5;
            deform[6] = 0.2;
        }
        Gaussian4DScene {
            positions: t(vec![0.1, 0.0, 0.0, -0.2, 0.1, 0.0], &[2, 3]),
            scales: t(vec![0.2; 6], &[2, 3]),
            rotations: t(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], &[2, 4]),
            opacities: t(vec![0.8, 0.6], &[2]),
            colors: t(vec![0.9, 0.1, 0.1, 0.1, 0.9, 0.1], &[2, 3]),
            deform: t(deform, &[2, 3, 2]),
        }
    }

    fn cams() -> Vec<Camera> {
        vec![Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 12.0, 8, 8)]
    }

    #[test]
    fn st_loss_identity_and_ablation() {
        let times = [0.0, 0.5, 1.0];
        let w = LossWeights::default();
        let static_gt = scene(false);
        let out = loss_st(&static_gt, &static_gt, &cams(), &times, &w).unwrap();
        assert_eq!(scalar(&out.loss).unwrap(), 0.0);

        let moving = scene(true);
        let out = loss_st(&moving, &moving, &cams(), &times, &w).unwrap();
        let smooth = scalar(&temporal_smoothness(&moving, &times).unwrap()).unwrap();
        assert!(smooth > 0.0);
        assert!((scalar(&out.loss).unwrap() - 0.5 * smooth).abs() < 1e-12);

        let pure = LossWeights { beta: 0.0, gamma: 0.0, ..w.clone() };
        let out = loss_st(&moving, &static_gt, &cams(), &times, &pure).unwrap();
        let cd = scalar(&chamfer(&moving.positions_at(0.0).unwrap(), &static_gt.positions).unwrap()).unwrap();
        assert!((scalar(&out.loss).unwrap() - cd).abs() < 1e-12);
        assert!(loss_st(&moving, &moving, &[], &times, &w).is_err());
    }

    #[test]
    fn total_is_linear_in_parts() {
        let dev = Device::Cpu;
        let one = Tensor::new(1.0f64, &dev).unwrap();
        let zero = Tensor::new(0.0f64, &dev).unwrap();
        let w = LossWeights::default();
        assert_eq!(scalar(&loss_total(&zero, &zero, &zero, &w).unwrap()).unwrap(), 0.0);
        assert!((scalar(&loss_total(&one, &one, &one, &w).unwrap()).unwrap() - 1.6).abs() < 1e-12);
        let only_sds = LossWeights { lambda1: 0.0, lambda3: 0.0, ..w.clone() };
        let v = Tensor::new(3.0f64, &dev).unwrap();
        assert!((scalar(&loss_total(&one, &v, &one, &only_sds).unwrap()).unwrap() - 0.3).abs() < 1e-12);
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
    }
}
