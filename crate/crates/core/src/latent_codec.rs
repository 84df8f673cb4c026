//! KL-regularized autoencoder between Gaussian scenes and latent tokens.
//! The encoder bins canonical Gaussians into a voxel grid and applies a
//! strided 3D convolution stack; the decoder turns learnable queries into
//! Gaussians through cross- and self-attention and parallel heads.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gaussians4d::metrics::nearest_indices;
use crate::gaussians4d::{chamfer, Gaussian4DScene};
use crate::nn::layers::to_f64_vec;
use crate::nn::{gelu, rng, sigmoid, softplus, Attention, Conv3d, Init, LayerNorm, Linear, Mlp, Param, ParamBuilder, TransformerBlock};
use crate::{ensure_config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub gaussians: usize,
    pub degree: usize,
    pub bounds: f64,
    pub conv_channels: [usize; 3],
    pub width: usize,
    pub heads: usize,
    pub kl_weight: f64,
    pub scale_floor: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            latent_dim: 64,
            gaussians: 64,
            degree: 2,
            bounds: 1.0,
            conv_channels: [32, 64, 64],
            width: 64,
            heads: 4,
            kl_weight: 1e-4,
            scale_floor: 1e-3,
        }
    }
}

impl CodecConfig {
    pub fn channels(&self) -> usize {
        1 + 3 + 1 + 3 + 3 * self.degree
    }

    pub fn num_tokens(&self) -> usize {
        let mut r = self.resolution;
        for _ in 0..3 {
            r = (r + 2 - 3) / 2 + 1;
        }
        r * r * r
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.resolution >= 2, "voxel resolution must be at least 2");
        ensure_config!(self.gaussians >= 1, "decoder needs at least one Gaussian");
        ensure_config!(self.degree >= 1, "deformation degree must be at least 1");
        ensure_config!(self.bounds > 0.0, "bounds must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    /// `[R, R, R, C]`; channel 0 is the count.
    pub grid: Tensor,
    pub resolution: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct Latent4D {
    /// `[Nz, dz]`
    pub mean: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

/// Per-Gaussian voxel index of canonical positions over `[-b, b]³`.
pub fn voxel_indices(scene: &Gaussian4DScene, resolution: usize, bounds: f64) -> Result<Vec<usize>> {
    let r = resolution as f64;
    Ok(scene
        .positions_host()?
        .iter()
        .map(|p| {
            let cell = |x: f64| (((x + bounds) / (2.0 * bounds) * r).floor().max(0.0) as usize).min(resolution - 1);
            (cell(p[0]) * resolution + cell(p[1])) * resolution + cell(p[2])
        })
        .collect())
}

/// Bins canonical Gaussians into an `R³` grid: count, then the mean of
/// `[color, opacity, scale, deform]` per occupied voxel.
pub fn voxelize(scene: &Gaussian4DScene, resolution: usize, bounds: f64) -> Result<VoxelGrid> {
    ensure_config!(resolution >= 2, "voxel resolution must be at least 2");
    ensure_config!(!scene.is_empty(), "cannot voxelize an empty scene");
    let k = scene.len();
    let cells = resolution.pow(3);
    let idx = voxel_indices(scene, resolution, bounds)?;
    let mut assign = vec![0.0f64; cells * k];
    let mut counts = vec![0.0f64; cells];
    for (g, &v) in idx.iter().enumerate() {
        assign[v * k + g] = 1.0;
        counts[v] += 1.0;
    }
    let dtype = scene.dtype();
    let dev = scene.device();
    let inv: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
    let assign = Tensor::from_vec(assign, (cells, k), dev)?.to_dtype(dtype)?;
    let attrs = Tensor::cat(
        &[
            scene.colors.clone(),
            scene.opacities.unsqueeze(1)?,
            scene.scales.clone(),
            scene.deform.reshape((k, 3 * scene.degree()))?,
        ],
        1,
    )?;
    let inv = Tensor::from_vec(inv, (cells, 1), dev)?.to_dtype(dtype)?;
    let means = assign.matmul(&attrs)?.broadcast_mul(&inv)?;
    let counts = Tensor::from_vec(counts, (cells, 1), dev)?.to_dtype(dtype)?;
    let channels = 1 + attrs.dim(1)?;
    let grid = Tensor::cat(&[counts, means], 1)?.reshape((resolution, resolution, resolution, channels))?;
    Ok(VoxelGrid { grid, resolution, channels })
}

/// `0.5·Σ(μ² + σ² − 1 − log σ²)` per token, averaged over tokens.
pub fn kl(latent: &Latent4D) -> Result<Tensor> {
    let per = ((latent.mean.sqr()? + latent.logvar.exp()?)? - 1.0)?.sub(&latent.logvar)?;
    Ok((per.sum(D::Minus1)? * 0.5)?.mean(0)?)
}

pub enum Sampling<'a, R: Rng> {
    Eval,
    Train(&'a mut R),
}

pub struct LatentCodec {
    cfg: CodecConfig,
    convs: [Conv3d; 3],
    token_pos: Param,
    mu: Linear,
    logvar: Linear,
    queries: Param,
    z_proj: Linear,
    q_norm: LayerNorm,
    cross: Attention,
    cross_mlp_norm: LayerNorm,
    cross_mlp: Mlp,
    blocks: [TransformerBlock; 2],
    out_norm: LayerNorm,
    heads: [Mlp; 6],
}

const HEAD_NAMES: [&str; 6] = ["position", "scale", "rotation", "opacity", "color", "deform"];

impl LatentCodec {
    pub fn new(pb: &ParamBuilder, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.conv_channels;
        let enc = pb.pp("encoder");
        let dec = pb.pp("decoder");
        let w = cfg.width;
        let outs = [3, 3, 4, 1, 3, 3 * cfg.degree];
        let heads = (0..6)
            .map(|i| Mlp::new(&dec.pp("head").pp(HEAD_NAMES[i]), w, w, outs[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs: [
                Conv3d::new(&enc.pp("conv0"), cfg.channels(), c1, 2)?,
                Conv3d::new(&enc.pp("conv1"), c1, c2, 2)?,
                Conv3d::new(&enc.pp("conv2"), c2, c3, 2)?,
            ],
            token_pos: enc.get(&[cfg.num_tokens(), c3], "token_pos", Init::Normal(0.02))?,
            mu: Linear::new(&enc.pp("mu"), c3, cfg.latent_dim)?,
            logvar: Linear::new(&enc.pp("logvar"), c3, cfg.latent_dim)?,
            queries: dec.get(&[cfg.gaussians, w], "queries", Init::Normal(1.0))?,
            z_proj: Linear::new(&dec.pp("z_proj"), cfg.latent_dim, w)?,
            q_norm: LayerNorm::new(&dec.pp("q_norm"), w)?,
            cross: Attention::new(&dec.pp("cross"), w, w, w, w, cfg.heads)?,
            cross_mlp_norm: LayerNorm::new(&dec.pp("cross_mlp_norm"), w)?,
            cross_mlp: Mlp::new(&dec.pp("cross_mlp"), w, 2 * w, w)?,
            blocks: [
                TransformerBlock::new(&dec.pp("block0"), w, cfg.heads, 2)?,
                TransformerBlock::new(&dec.pp("block1"), w, cfg.heads, 2)?,
            ],
            out_norm: LayerNorm::new(&dec.pp("out_norm"), w)?,
            heads: heads.try_into().map_err(|_| crate::Error::config("head count"))?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// `[Nz, c]` convolutional tokens of a voxel grid.
    pub fn encode_grid(&self, grid: &VoxelGrid) -> Result<Tensor> {
        let mut x = grid.grid.clone();
        for conv in &self.convs {
            x = gelu(&conv.forward(&x)?)?;
        }
        let c = x.dim(D::Minus1)?;
        Ok(x.reshape(((), c))?.broadcast_add(&self.token_pos.t())?)
    }

    pub fn encode<R: Rng>(&self, scene: &Gaussian4DScene, sampling: Sampling<'_, R>) -> Result<Latent4D> {
        ensure_config!(
            scene.degree() == self.cfg.degree,
            "codec expects degree {}, scene has {}",
            self.cfg.degree,
            scene.degree()
        );
        let tokens = self.encode_grid(&voxelize(scene, self.cfg.resolution, self.cfg.bounds)?)?;
        let mean = self.mu.forward(&tokens)?;
        let logvar = self.logvar.forward(&tokens)?;
        let z = match sampling {
            Sampling::Eval => mean.clone(),
            Sampling::Train(r) => {
                let eps = rng::randn(r, mean.dims(), mean.dtype(), mean.device())?;
                (&mean + (&logvar * 0.5)?.exp()?.mul(&eps)?)?
            }
        };
        Ok(Latent4D { mean, logvar, z })
    }

    pub fn encode_eval(&self, scene: &Gaussian4DScene) -> Result<Latent4D> {
        self.encode::<rng::SeededRng>(scene, Sampling::Eval)
    }

    pub fn decode(&self, z: &Tensor, k: usize) -> Result<Gaussian4DScene> {
        ensure_config!(k == self.cfg.gaussians, "decoder was built for K = {}, asked for {k}", self.cfg.gaussians);
        let zp = self.z_proj.forward(z)?;
        let q = self.queries.t();
        let mut x = (&q + self.cross.forward(&self.q_norm.forward(&q)?, &zp, None)?)?;
        x = (&x + self.cross_mlp.forward(&self.cross_mlp_norm.forward(&x)?)?)?;
        for b in &self.blocks {
            x = b.forward(&x, None)?;
        }
        let x = self.out_norm.forward(&x)?;
        let h: Vec<Tensor> = self.heads.iter().map(|m| m.forward(&x)).collect::<Result<_>>()?;
        let rot = &h[2];
        let norm = rot.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-8, f64::INFINITY)?;
        Ok(Gaussian4DScene {
            positions: (h[0].tanh()? * self.cfg.bounds)?,
            scales: (softplus(&h[1])? + self.cfg.scale_floor)?,
            rotations: rot.broadcast_div(&norm)?,
            opacities: sigmoid(&h[3])?.squeeze(1)?,
            colors: sigmoid(&h[4])?,
            deform: h[5].reshape((k, 3, self.cfg.degree))?,
        })
    }

    /// Reconstruction loss of one scene: chamfer on canonical positions,
    /// attribute MSE against the nearest target Gaussian, and weighted KL.
    pub fn loss<R: Rng>(&self, scene: &Gaussian4DScene, sampling: Sampling<'_, R>) -> Result<Tensor> {
        let latent = self.encode(scene, sampling)?;
        let pred = self.decode(&latent.z, self.cfg.gaussians)?;
        Ok((reconstruction_loss(&pred, scene)? + (kl(&latent)? * self.cfg.kl_weight)?)?)
    }

    /// Reconstruction chamfer of `decode(encode(scene))` in eval mode.
    pub fn reconstruction_chamfer(&self, scene: &Gaussian4DScene) -> Result<f64> {
        let pred = self.decode(&self.encode_eval(scene)?.z, self.cfg.gaussians)?;
        let c = chamfer(&pred.positions, &scene.positions)?;
        Ok(to_f64_vec(&c)?[0])
    }
}

fn attributes(scene: &Gaussian4DScene) -> Result<Tensor> {
    let k = scene.len();
    Ok(Tensor::cat(
        &[
            scene.colors.clone(),
            scene.opacities.unsqueeze(1)?,
            scene.scales.clone(),
            scene.deform.reshape((k, 3 * scene.degree()))?,
        ],
        1,
    )?)
}

/// Chamfer plus the MSE of `[color, opacity, scale, deform]` between each
/// predicted Gaussian and its nearest target Gaussian.
pub fn reconstruction_loss(pred: &Gaussian4DScene, target: &Gaussian4DScene) -> Result<Tensor> {
    let cd = chamfer(&pred.positions, &target.positions)?;
    let nn = nearest_indices(&pred.positions, &target.positions)?;
    let n = nn.len();
    let idx = Tensor::from_vec(nn, n, pred.device())?;
    let matched = attributes(target)?.index_select(&idx, 0)?;
    let mse = (attributes(pred)? - matched)?.sqr()?.mean_all()?;
    Ok((cd + mse)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{max_abs_diff, scalar};
    use crate::nn::ParamStore;
    use crate::scene_synth::{synth_scene, MotionFamily, SyntheticSceneSpec};
    use candle_core::{DType, Device};

    fn scene_from(pos: &[[f64; 3]], colors: &[[f64; 3]]) -> Gaussian4DScene {
        let k = pos.len();
        let dev = Device::Cpu;
        Gaussian4DScene {
            positions: Tensor::from_vec(pos.concat(), (k, 3), &dev).unwrap(),
            scales: Tensor::full(0.1f64, (k, 3), &dev).unwrap(),
            rotations: Tensor::new(&[1.0f64, 0.0, 0.0, 0.0], &dev).unwrap().unsqueeze(0).unwrap().repeat((k, 1)).unwrap(),
            opacities: Tensor::full(0.5f64, k, &dev).unwrap(),
            colors: Tensor::from_vec(colors.concat(), (k, 3), &dev).unwrap(),
            deform: Tensor::zeros((k, 3, 2), DType::F64, &dev).unwrap(),
        }
    }

    fn small_cfg() -> CodecConfig {
        CodecConfig { conv_channels: [8, 8, 16], latent_dim: 8, width: 16, heads: 2, gaussians: 16, ..Default::default() }
    }

    #[test]
    fn voxelize_single_and_pair() {
        let s = scene_from(&[[0.0, 0.0, 0.0]], &[[0.2, 0.4, 0.6]]);
        let g = voxelize(&s, 4, 1.0).unwrap();
        assert_eq!(g.grid.dims(), &[4, 4, 4, 14]);
        let flat = g.grid.reshape((64, 14)).unwrap().to_vec2::<f64>().unwrap();
        let occupied: Vec<usize> = (0..64).filter(|&i| flat[i][0] != 0.0).collect();
        assert_eq!(occupied, vec![(2 * 4 + 2) * 4 + 2]);
        let row = &flat[occupied[0]];
        assert_eq!(&row[..8], &[1.0, 0.2, 0.4, 0.6, 0.5, 0.1, 0.1, 0.1]);
        for (i, r) in flat.iter().enumerate() {
            if i != occupied[0] {
                assert!(r.iter().all(|v| *v == 0.0));
            }
        }
        let s = scene_from(&[[0.1, 0.1, 0.1], [0.2, 0.05, 0.15]], &[[0.2, 0.4, 0.6], [0.6, 0.0, 1.0]]);
        let flat = voxelize(&s, 4, 1.0).unwrap().grid.reshape((64, 14)).unwrap().to_vec2::<f64>().unwrap();
        let row = flat.iter().find(|r| r[0] != 0.0).unwrap();
        assert_eq!(row[0], 2.0);
        for (got, want) in row[1..4].iter().zip([0.4, 0.2, 0.8]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_closed_form() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((3, 4), DType::F64, &dev).unwrap();
        let l = Latent4D { mean: z.clone(), logvar: z.clone(), z: z.clone() };
        assert_eq!(scalar(&kl(&l).unwrap()).unwrap(), 0.0);
        let one = Tensor::ones((1, 1), DType::F64, &dev).unwrap();
        let l = Latent4D { mean: one.clone(), logvar: one.zeros_like().unwrap(), z: one };
        assert!((scalar(&kl(&l).unwrap()).unwrap() - 0.5).abs() < 1e-9);
        let mut r = rng::seeded(3);
        for _ in 0..10 {
            let m = rng::randn(&mut r, &[5, 6], DType::F64, &dev).unwrap();
            let lv = rng::randn(&mut r, &[5, 6], DType::F64, &dev).unwrap();
            let l = Latent4D { mean: m.clone(), logvar: lv, z: m };
            assert!(scalar(&kl(&l).unwrap()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn encode_modes_and_shapes() {
        assert_eq!(CodecConfig::default().num_tokens(), 8);
        let store = ParamStore::cpu(1, DType::F32);
        let codec = LatentCodec::new(&store.root(), &CodecConfig { gaussians: 64, ..Default::default() }).unwrap();
        let scene = synth_scene(&SyntheticSceneSpec { motion_family: MotionFamily::CircularOrbit, ..Default::default() }).unwrap();
        let a = codec.encode_eval(&scene).unwrap();
        let b = codec.encode_eval(&scene).unwrap();
        assert_eq!(a.z.dims(), &[8, 64]);
        assert_eq!(max_abs_diff(&a.z, &b.z).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&a.z, &a.mean).unwrap(), 0.0);
        let t1 = codec.encode(&scene, Sampling::Train(&mut rng::seeded(5))).unwrap();
        let t2 = codec.encode(&scene, Sampling::Train(&mut rng::seeded(5))).unwrap();
        assert_eq!(max_abs_diff(&t1.z, &t2.z).unwrap(), 0.0);
        assert!(max_abs_diff(&t1.z, &a.z).unwrap() > 0.0);
        let dec = codec.decode(&a.z, 64).unwrap();
        assert_eq!(dec.deform.dims(), &[64, 3, 2]);
        dec.validate().unwrap();
    }

    #[test]
    fn decode_invariants_for_extreme_latents() {
        let store = ParamStore::cpu(2, DType::F64);
        let codec = LatentCodec::new(&store.root(), &small_cfg()).unwrap();
        let mut r = rng::seeded(9);
        for scale in [0.0, 1.0, 100.0] {
            let z = (rng::randn(&mut r, &[8, 8], DType::F64, &Device::Cpu).unwrap() * scale).unwrap();
            codec.decode(&z, 16).unwrap().validate().unwrap();
        }
        assert!(codec.decode(&Tensor::zeros((8, 8), DType::F64, &Device::Cpu).unwrap(), 4).is_err());
    }

    #[test]
    fn loss_is_differentiable() {
        let store = ParamStore::cpu(4, DType::F64);
        let codec = LatentCodec::new(&store.root(), &small_cfg()).unwrap();
        let scene = synth_scene(&SyntheticSceneSpec { gaussians_per_object: 8, ..Default::default() })
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let loss = codec.loss(&scene, Sampling::Train(&mut rng::seeded(1))).unwrap();
        let grads = loss.backward().unwrap();
        let g = store.grad_norm(&grads, "encoder.conv0").unwrap();
        assert!(g.is_finite() && g > 0.0);
        assert!(store.grad_norm(&grads, "decoder.head.deform").unwrap() > 0.0);
    }
}
