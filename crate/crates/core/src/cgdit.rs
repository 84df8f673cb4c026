//! Cognition-guided diffusion transformer trained by rectified-flow
//! matching. Noise sits at `τ = 1`, data at `τ = 0`, and the regression
//! target is `ε − z0`.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cognition_graph::CognitionGraph;
use crate::nn::layers::{silu, to_f64_vec};
use crate::nn::{modulate, rng, Attention, Init, LayerNorm, Linear, Mlp, Param, ParamBuilder};
use crate::{ensure_config, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub train_timesteps: usize,
    pub sample_steps: usize,
    pub blocks: usize,
    pub heads: usize,
    pub width: usize,
    /// Latent tokens per sample.
    pub tokens: usize,
    pub latent_dim: usize,
    /// Width of conditioning tokens (graph node width).
    pub cond_dim: usize,
    /// Longest conditioning horizon supported by the frame embeddings.
    pub max_cond_frames: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            sample_steps: 50,
            blocks: 4,
            heads: 4,
            width: 128,
            tokens: 8,
            latent_dim: 64,
            cond_dim: 64,
            max_cond_frames: 16,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.sample_steps >= 1, "sample_steps must be at least 1");
        ensure_config!(
            self.train_timesteps >= self.sample_steps,
            "train_timesteps {} below sample_steps {}",
            self.train_timesteps,
            self.sample_steps
        );
        ensure_config!(self.width % 2 == 0, "width must be even");
        ensure_config!(self.width % self.heads == 0, "width {} not divisible by {} heads", self.width, self.heads);
        Ok(())
    }
}

/// Node tensors of a predicted horizon, each offset by a learned frame
/// embedding and concatenated along the token axis.
#[derive(Debug, Clone)]
pub struct ConditioningSequence {
    /// `[T_c·n, d]`
    pub tokens: Tensor,
    pub frame_count: usize,
}

impl ConditioningSequence {
    pub fn detach(&self) -> Self {
        Self { tokens: self.tokens.detach(), frame_count: self.frame_count }
    }
}

/// `z_τ = (1 − τ)·z0 + τ·ε` and `v = ε − z0`. `tau` broadcasts from the
/// leading axis.
pub fn flow_interp(z0: &Tensor, eps: &Tensor, tau: &Tensor) -> Result<(Tensor, Tensor)> {
    ensure_config!(z0.dims() == eps.dims(), "z0 {:?} and noise {:?} differ", z0.dims(), eps.dims());
    let mut shape = vec![z0.dims()[0]];
    shape.resize(z0.rank(), 1);
    let t = tau.reshape(shape)?;
    let zt = (z0.broadcast_mul(&(1.0 - &t)?)? + eps.broadcast_mul(&t)?)?;
    Ok((zt, (eps - z0)?))
}

/// A velocity predictor over batched latents `[B, Nz, dz]` and times `[B]`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, tau: &Tensor, cond: Option<&ConditioningSequence>) -> Result<Tensor>;
}

/// Sinusoidal features of `τ·scale`: `[sin(ω_k τ s)…, cos(ω_k τ s)…]` with
/// `ω_k = 10000^(−k/half)`.
pub fn sinusoidal(tau: &Tensor, dim: usize, scale: f64) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp()).collect();
    let f = Tensor::from_vec(freqs, (1, half), tau.device())?.to_dtype(tau.dtype())?;
    let arg = (tau.reshape(((), 1))? * scale)?.broadcast_mul(&f)?;
    Ok(Tensor::cat(&[arg.sin()?, arg.cos()?], 1)?)
}

struct DitBlock {
    ada: Linear,
    self_attn: Attention,
    cond_norm: LayerNorm,
    cross: Attention,
    mlp: Mlp,
}

impl DitBlock {
    fn new(pb: &ParamBuilder, cfg: &DiffusionConfig) -> Result<Self> {
        let w = cfg.width;
        let ada = Linear::new(&pb.pp("ada"), w, 9 * w)?;
        pb.store().zero(&format!("{}.ada", pb.prefix()))?;
        Ok(Self {
            ada,
            self_attn: Attention::new(&pb.pp("self_attn"), w, w, w, w, cfg.heads)?,
            cond_norm: LayerNorm::new(&pb.pp("cond_norm"), cfg.cond_dim)?,
            cross: Attention::new(&pb.pp("cross"), w, cfg.cond_dim, w, w, cfg.heads)?,
            mlp: Mlp::new(&pb.pp("mlp"), w, 4 * w, w)?,
        })
    }

    /// `x [B, N, w]`, `c [B, w]` conditioning vector, `cond [B, Nc, d]`.
    fn forward(&self, x: &Tensor, c: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let m = self.ada.forward(&silu(c)?)?.unsqueeze(1)?.chunk(9, D::Minus1)?;
        let h = modulate(x, &m[0], &m[1])?;
        let x = (x + self.self_attn.forward(&h, &h, None)?.broadcast_mul(&m[2])?)?;
        let x = match cond {
            Some(kv) => {
                let h = modulate(&x, &m[3], &m[4])?;
                let a = self.cross.forward(&h, &self.cond_norm.forward(kv)?, None)?;
                (&x + a.broadcast_mul(&m[5])?)?
            }
            None => x,
        };
        let h = modulate(&x, &m[6], &m[7])?;
        Ok((&x + self.mlp.forward(&h)?.broadcast_mul(&m[8])?)?)
    }
}

pub struct CgDit {
    cfg: DiffusionConfig,
    frame_embed: Param,
    t_mlp: Mlp,
    input: Linear,
    token_pos: Param,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    head: Linear,
}

impl CgDit {
    pub fn new(pb: &ParamBuilder, cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let final_ada = Linear::new(&pb.pp("final_ada"), w, 2 * w)?;
        let head = Linear::new(&pb.pp("head"), w, cfg.latent_dim)?;
        pb.store().zero(&format!("{}.final_ada", pb.prefix()))?;
        Ok(Self {
            frame_embed: pb.get(&[cfg.max_cond_frames, cfg.cond_dim], "frame_embed", Init::Normal(0.02))?,
            t_mlp: Mlp::new(&pb.pp("t_mlp"), w, w, w)?,
            input: Linear::new(&pb.pp("input"), cfg.latent_dim, w)?,
            token_pos: pb.get(&[cfg.tokens, w], "token_pos", Init::Normal(0.02))?,
            blocks: (0..cfg.blocks)
                .map(|i| DitBlock::new(&pb.pp(&format!("block{i}")), cfg))
                .collect::<Result<_>>()?,
            final_ada,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    /// `[B] -> [B, width]`.
    pub fn timestep_embed(&self, tau: &Tensor) -> Result<Tensor> {
        let s = sinusoidal(tau, self.cfg.width, self.cfg.train_timesteps as f64)?;
        self.t_mlp.forward(&s)
    }

    /// Builds the conditioning sequence from a predicted horizon.
    pub fn condition(&self, graphs: &[CognitionGraph]) -> Result<ConditioningSequence> {
        ensure_config!(!graphs.is_empty(), "conditioning needs at least one graph");
        ensure_config!(
            graphs.len() <= self.cfg.max_cond_frames,
            "horizon {} exceeds the {} supported conditioning frames",
            graphs.len(),
            self.cfg.max_cond_frames
        );
        let fe = self.frame_embed.t();
        let parts: Vec<Tensor> = graphs
            .iter()
            .enumerate()
            .map(|(t, g)| Ok(g.nodes.broadcast_add(&fe.get(t)?.unsqueeze(0)?)?))
            .collect::<Result<_>>()?;
        Ok(ConditioningSequence { tokens: Tensor::cat(&parts, 0)?, frame_count: graphs.len() })
    }
}

impl VelocityField for CgDit {
    fn velocity(&self, z: &Tensor, tau: &Tensor, cond: Option<&ConditioningSequence>) -> Result<Tensor> {
        let (b, n, dz) = z.dims3()?;
        ensure_config!(dz == self.cfg.latent_dim, "latent width {dz}, model expects {}", self.cfg.latent_dim);
        ensure_config!(n <= self.cfg.tokens, "{n} latent tokens, model supports {}", self.cfg.tokens);
        let kv = match cond {
            Some(c) => {
                let (nc, d) = c.tokens.dims2()?;
                ensure_config!(d == self.cfg.cond_dim, "conditioning width {d}, model expects {}", self.cfg.cond_dim);
                ensure_config!(
                    c.frame_count >= 1 && nc % c.frame_count == 0,
                    "conditioning length {nc} not divisible by {} frames",
                    c.frame_count
                );
                Some(c.tokens.unsqueeze(0)?.repeat((b, 1, 1))?)
            }
            None => None,
        };
        let c = self.timestep_embed(tau)?;
        let mut x = self
            .input
            .forward(z)?
            .broadcast_add(&self.token_pos.t().narrow(0, 0, n)?.unsqueeze(0)?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, &c, kv.as_ref())?;
        }
        let m = self.final_ada.forward(&silu(&c)?)?.unsqueeze(1)?.chunk(2, D::Minus1)?;
        self.head.forward(&modulate(&x, &m[0], &m[1])?)
    }
}

/// Mean squared velocity error at a seeded `τ ~ U[0, 1]` per element and
/// `ε ~ N(0, I)`.
pub fn fm_loss<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    cond: Option<&ConditioningSequence>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let b = z0.dims()[0];
    let tau = rng::from_f64((0..b).map(|_| rng.random::<f64>()).collect(), &[b], z0.dtype(), z0.device())?;
    let eps = rng::randn(rng, z0.dims(), z0.dtype(), z0.device())?;
    let (zt, target) = flow_interp(z0, &eps, &tau)?;
    let v = field.velocity(&zt, &tau, cond)?;
    Ok((v - target)?.sqr()?.mean_all()?)
}

/// Euler integration from seeded noise at `τ = 1` down to `τ = 0`.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    shape: &[usize],
    cond: Option<&ConditioningSequence>,
    steps: usize,
    rng: &mut impl Rng,
    dtype: candle_core::DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let eps = rng::randn(rng, shape, dtype, device)?;
    integrate(field, eps, cond, steps)
}

/// Euler integration from a given starting point at `τ = 1`. Each step is
/// detached, so no autograd graph is kept.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    start: Tensor,
    cond: Option<&ConditioningSequence>,
    steps: usize,
) -> Result<Tensor> {
    euler(field, start, cond, steps, true)
}

/// Euler integration that keeps the graph through every step.
pub fn integrate_differentiable<F: VelocityField + ?Sized>(
    field: &F,
    start: Tensor,
    cond: Option<&ConditioningSequence>,
    steps: usize,
) -> Result<Tensor> {
    euler(field, start, cond, steps, false)
}

fn euler<F: VelocityField + ?Sized>(
    field: &F,
    start: Tensor,
    cond: Option<&ConditioningSequence>,
    steps: usize,
    detach: bool,
) -> Result<Tensor> {
    ensure_config!(steps >= 1, "sampling needs at least one step");
    let b = start.dims()[0];
    let dt = 1.0 / steps as f64;
    let mut z = start;
    for i in 0..steps {
        let tau = 1.0 - i as f64 * dt;
        let t = Tensor::full(tau, b, z.device())?.to_dtype(z.dtype())?;
        let v = field.velocity(&z, &t, cond)?;
        z = (z - (v * dt)?)?;
        if detach {
            z = z.detach();
        }
    }
    Ok(z)
}

/// V-statistic energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` between two
/// sample sets `[N, c]` and `[M, c]`.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    let c = x.dim(1)?;
    if y.dim(1)? != c {
        return Err(Error::config("energy distance needs equal widths"));
    }
    let xs = to_f64_vec(x)?;
    let ys = to_f64_vec(y)?;
    let mean_dist = |a: &[f64], b: &[f64]| -> f64 {
        let (na, nb) = (a.len() / c, b.len() / c);
        let mut total = 0.0;
        for i in 0..na {
            let p = &a[i * c..(i + 1) * c];
            for j in 0..nb {
                let q = &b[j * c..(j + 1) * c];
                total += p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            }
        }
        total / (na * nb) as f64
    };
    Ok(2.0 * mean_dist(&xs, &ys) - mean_dist(&xs, &xs) - mean_dist(&ys, &ys))
}

/// The exact straight-path velocity toward a fixed target:
/// `v(z, τ) = (z − z0)/τ`. Euler integration of it lands on `z0`.
pub struct OracleVelocity {
    pub target: Tensor,
}

impl VelocityField for OracleVelocity {
    fn velocity(&self, z: &Tensor, tau: &Tensor, _cond: Option<&ConditioningSequence>) -> Result<Tensor> {
        let mut shape = vec![z.dims()[0]];
        shape.resize(z.rank(), 1);
        Ok(z.broadcast_sub(&self.target)?.broadcast_div(&tau.reshape(shape)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cognition_graph::GraphKind;
    use crate::nn::layers::{max_abs_diff, scalar};
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        rng::randn(&mut rng::seeded(seed), shape, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_hand_case() {
        let z0 = randn(1, &[2, 3, 4]);
        let eps = randn(2, &[2, 3, 4]);
        let at = |t: f64| flow_interp(&z0, &eps, &Tensor::new(&[t, t], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(max_abs_diff(&at(0.0).0, &z0).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&at(1.0).0, &eps).unwrap(), 0.0);
        let zero = Tensor::zeros((1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let one = Tensor::ones((1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let (zt, v) = flow_interp(&zero, &one, &Tensor::new(&[0.25f64], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(scalar(&zt).unwrap(), 0.25);
        assert_eq!(scalar(&v).unwrap(), 1.0);
    }

    #[test]
    fn oracle_sampler_recovers_the_target() {
        let target = randn(3, &[4, 8, 6]);
        let oracle = OracleVelocity { target: target.clone() };
        for steps in [1, 50] {
            let z = sample(&oracle, &[4, 8, 6], None, steps, &mut rng::seeded(4), DType::F64, &Device::Cpu).unwrap();
            assert!(max_abs_diff(&z, &target).unwrap() < 1e-12, "steps {steps}");
        }
        assert!(sample(&oracle, &[4, 8, 6], None, 0, &mut rng::seeded(4), DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn oracle_velocity_has_zero_flow_matching_loss() {
        let z0 = randn(5, &[16, 2, 3]);
        let oracle = OracleVelocity { target: z0.clone() };
        let l = scalar(&fm_loss(&oracle, &z0, None, &mut rng::seeded(6)).unwrap()).unwrap();
        assert!(l < 1e-18);
    }

    fn cfg() -> DiffusionConfig {
        DiffusionConfig { blocks: 2, heads: 2, width: 16, tokens: 3, latent_dim: 4, cond_dim: 8, max_cond_frames: 4, ..Default::default() }
    }

    fn graph(seed: u64) -> CognitionGraph {
        CognitionGraph {
            kind: GraphKind::Fused,
            nodes: randn(seed, &[5, 8]),
            edge_feats: Tensor::zeros((5, 5, 2), DType::F64, &Device::Cpu).unwrap(),
            edge_gate: Tensor::zeros((5, 5), DType::F64, &Device::Cpu).unwrap(),
            topk: 1,
            logical: randn(seed + 1, &[2, 8]),
        }
    }

    /// Replaces the zero-initialized modulation weights with noise so every
    /// branch contributes.
    fn activate(store: &ParamStore) {
        let mut r = rng::seeded(77);
        for p in store.all() {
            if p.name().contains("ada") {
                let t = rng::randn(&mut r, p.dims(), DType::F64, &Device::Cpu).unwrap();
                p.var().set(&(t * 0.3).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn conditioning_flows_only_through_cross_attention() {
        let store = ParamStore::cpu(8, DType::F64);
        let dit = CgDit::new(&store.builder("dit"), &cfg()).unwrap();
        activate(&store);
        let z = randn(9, &[2, 3, 4]);
        let tau = Tensor::new(&[0.3f64, 0.8], &Device::Cpu).unwrap();
        let ca = dit.condition(&[graph(10), graph(12)]).unwrap();
        let cb = dit.condition(&[graph(20), graph(22)]).unwrap();
        assert_eq!(ca.tokens.dims(), &[10, 8]);
        let va = dit.velocity(&z, &tau, Some(&ca)).unwrap();
        let vb = dit.velocity(&z, &tau, Some(&cb)).unwrap();
        assert!(max_abs_diff(&va, &vb).unwrap() > 1e-6);
        for i in 0..2 {
            store.zero(&format!("dit.block{i}.cross.o")).unwrap();
        }
        let va = dit.velocity(&z, &tau, Some(&ca)).unwrap();
        let vb = dit.velocity(&z, &tau, Some(&cb)).unwrap();
        let vn = dit.velocity(&z, &tau, None).unwrap();
        assert!(max_abs_diff(&va, &vb).unwrap() < 1e-12);
        assert!(max_abs_diff(&va, &vn).unwrap() < 1e-12);
    }

    #[test]
    fn zero_initialized_modulation_gives_head_of_input() {
        let store = ParamStore::cpu(8, DType::F64);
        let dit = CgDit::new(&store.builder("dit"), &cfg()).unwrap();
        let z = randn(9, &[2, 3, 4]);
        let tau = Tensor::new(&[0.3f64, 0.8], &Device::Cpu).unwrap();
        let v = dit.velocity(&z, &tau, Some(&dit.condition(&[graph(1)]).unwrap())).unwrap();
        let tau2 = Tensor::new(&[0.9f64, 0.1], &Device::Cpu).unwrap();
        let v2 = dit.velocity(&z, &tau2, None).unwrap();
        // Zeroed adaLN gates: every block is the identity and τ is unused.
        assert!(max_abs_diff(&v, &v2).unwrap() < 1e-12);
        assert!(dit.condition(&vec![graph(1); 5]).is_err());
    }

    #[test]
    fn energy_distance_properties() {
        let a = randn(30, &[64, 2]);
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
        let shifted = (&a + 3.0).unwrap();
        assert!(energy_distance(&a, &shifted).unwrap() > 1.0);
        let b = randn(31, &[64, 2]);
        let d1 = energy_distance(&a, &b).unwrap();
        let d2 = energy_distance(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }
}
