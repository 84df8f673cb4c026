//! The full generator: encoders, cognition graphs, world model, latent
//! codec and diffusion transformer under one parameter store, plus the
//! text-to-graph adapter used when the prompt has no images.

use candle_core::Tensor;
use rand::Rng;

use crate::cgdit::{integrate, integrate_differentiable, CgDit, ConditioningSequence, VelocityField};
use crate::cognition_graph::{CognitionEncoder, CognitionGraph, GraphConfig, GraphKind, GraphSet};
use crate::config::RunConfig;
use crate::foundation::{Foundation, TokenBundle};
use crate::gaussians4d::Gaussian4DScene;
use crate::latent_codec::LatentCodec;
use crate::nn::{rng, Attention, Init, LayerNorm, Linear, Mlp, Param, ParamBuilder, ParamStore};
use crate::world_model::WorldModel;
use crate::{ensure_config, Result};

/// Learnable nodes cross-attending over text tokens, producing a fused
/// graph from a caption alone.
pub struct TextAdapter {
    nodes: Param,
    norm: LayerNorm,
    cross: Attention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
    logical: Linear,
    logical_tokens: usize,
}

impl TextAdapter {
    pub fn new(pb: &ParamBuilder, cfg: &GraphConfig, logical_tokens: usize) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            nodes: pb.get(&[cfg.nodes, d], "nodes", Init::Normal(1.0))?,
            norm: LayerNorm::new(&pb.pp("norm"), d)?,
            cross: Attention::new(&pb.pp("cross"), d, d, d, d, cfg.heads)?,
            ffn_norm: LayerNorm::new(&pb.pp("ffn_norm"), d)?,
            ffn: Mlp::new(&pb.pp("ffn"), d, 2 * d, d)?,
            logical: Linear::new(&pb.pp("logical"), d, logical_tokens * d)?,
            logical_tokens,
        })
    }

    /// `(nodes [n, d], logical [L, d])` from text tokens `[L_t, d]` and the
    /// pooled bag `[d]`.
    pub fn forward(&self, text_tokens: &Tensor, bag: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.nodes.t();
        let x = (&q + self.cross.forward(&self.norm.forward(&q)?, text_tokens, None)?)?;
        let x = (&x + self.ffn.forward(&self.ffn_norm.forward(&x)?)?)?;
        let d = bag.dims()[0];
        let logical = self.logical.forward(&bag.unsqueeze(0)?)?.reshape((self.logical_tokens, d))?;
        Ok((x, logical))
    }
}

/// Conditioning input of one generation.
#[derive(Debug, Clone)]
pub enum Prompt {
    Text(String),
    /// `[F, H, W, 3]` prompt frames, `[V, H, W, 3]` views, and a caption
    /// (possibly empty).
    Images { frames: Tensor, views: Tensor, text: String },
}

/// Everything one generation produced.
#[derive(Debug, Clone)]
pub struct Generation {
    pub graph: CognitionGraph,
    pub horizon: Vec<CognitionGraph>,
    pub latent: Tensor,
    pub scene: Gaussian4DScene,
}

pub struct St4dModel {
    pub store: ParamStore,
    pub cfg: RunConfig,
    pub foundation: Foundation,
    pub graphs: CognitionEncoder,
    pub world: WorldModel,
    pub codec: LatentCodec,
    pub dit: CgDit,
    pub text_adapter: TextAdapter,
}

/// Parameter-name prefixes of the submodules.
pub mod prefix {
    pub const FOUNDATION: &str = "foundation";
    pub const ACTION_ENCODER: &str = "foundation.action";
    pub const GRAPH: &str = "graph";
    pub const WORLD: &str = "world";
    pub const WORLD_STATE: &str = "world.state";
    pub const WORLD_ACTION: &str = "world.action";
    pub const WORLD_ADALN: &str = "world.adaln";
    pub const WORLD_PREDICTOR: &str = "world.predictor";
    pub const WORLD_DECODER: &str = "world.decoder";
    pub const CODEC: &str = "codec";
    pub const CODEC_DECODER: &str = "codec.decoder";
    pub const DIT: &str = "dit";
    pub const TEXT_ADAPTER: &str = "text_adapter";
}

impl St4dModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::cpu(cfg.seed, cfg.dtype()?);
        let root = store.root();
        let f = &cfg.foundation;
        Ok(Self {
            foundation: Foundation::new(&root.pp(prefix::FOUNDATION), f)?,
            graphs: CognitionEncoder::new(&root.pp(prefix::GRAPH), &cfg.graph)?,
            world: WorldModel::new(&root.pp(prefix::WORLD), &cfg.world, cfg.graph.d, f.d_a)?,
            codec: LatentCodec::new(&root.pp(prefix::CODEC), &cfg.codec)?,
            dit: CgDit::new(&root.pp(prefix::DIT), &cfg.diffusion)?,
            text_adapter: TextAdapter::new(&root.pp(prefix::TEXT_ADAPTER), &cfg.graph, f.logical_tokens)?,
            store,
            cfg: cfg.clone(),
        })
    }

    pub fn encode_images(&self, frames: &Tensor, views: &Tensor, text: &str) -> Result<(TokenBundle, GraphSet)> {
        let bundle = self.foundation.encode(frames, views, text)?;
        let graphs = self.graphs.encode(&bundle)?;
        Ok((bundle, graphs))
    }

    /// Fused graph from a caption through the text adapter.
    pub fn text_graph(&self, text: &str) -> Result<CognitionGraph> {
        let (nodes, logical) = self
            .text_adapter
            .forward(&self.foundation.embed_text(text)?, &self.foundation.text_bag(text)?)?;
        let edges = self.graphs.fusion().edges();
        let (edge_feats, edge_gate) = edges.forward(&nodes, &logical)?;
        Ok(CognitionGraph { kind: GraphKind::Fused, nodes, edge_feats, edge_gate, topk: edges.topk(), logical })
    }

    /// Fused graph and action tokens for a prompt.
    pub fn prompt_graph(&self, prompt: &Prompt) -> Result<(CognitionGraph, Tensor)> {
        match prompt {
            Prompt::Text(text) => {
                let g = self.text_graph(text)?;
                let a = Tensor::zeros((1, self.cfg.foundation.d_a), g.nodes.dtype(), g.nodes.device())?;
                Ok((g, a))
            }
            Prompt::Images { frames, views, text } => {
                let (bundle, graphs) = self.encode_images(frames, views, text)?;
                Ok((graphs.fused, bundle.action))
            }
        }
    }

    pub fn rollout(&self, g: &CognitionGraph, action: &Tensor, horizon: usize) -> Result<Vec<CognitionGraph>> {
        self.world.rollout(g, action, horizon, self.graphs.fusion().edges())
    }

    /// Predicted horizon turned into diffusion conditioning.
    pub fn conditioning(&self, prompt: &Prompt, horizon: usize) -> Result<(CognitionGraph, Vec<CognitionGraph>, ConditioningSequence)> {
        let (g, action) = self.prompt_graph(prompt)?;
        let future = self.rollout(&g, &action, horizon)?;
        let cond = self.dit.condition(&future)?;
        Ok((g, future, cond))
    }

    /// Seeded Euler sampling of one latent `[Nz, dz]`. With
    /// `differentiable` the graph through every step is kept.
    pub fn sample_latent(
        &self,
        cond: &ConditioningSequence,
        steps: usize,
        differentiable: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let c = &self.cfg.diffusion;
        let eps = rng::randn(rng, &[1, c.tokens, c.latent_dim], self.store.dtype(), self.store.device())?;
        let z = if differentiable {
            integrate_differentiable(&self.dit, eps, Some(cond), steps)?
        } else {
            integrate(&self.dit, eps, Some(cond), steps)?
        };
        Ok(z.squeeze(0)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Gaussian4DScene> {
        self.codec.decode(z, self.cfg.codec.gaussians)
    }

    /// Full pipeline: prompt → graphs → rollout → sampling → decoding.
    pub fn generate(&self, prompt: &Prompt, horizon: usize, steps: usize, rng: &mut impl Rng) -> Result<Generation> {
        ensure_config!(horizon >= 1, "horizon must be at least 1");
        let (graph, future, cond) = self.conditioning(prompt, horizon)?;
        let latent = self.sample_latent(&cond, steps, false, rng)?;
        let scene = self.decode(&latent)?;
        Ok(Generation { graph, horizon: future, latent, scene })
    }

    pub fn velocity_field(&self) -> &dyn VelocityField {
        &self.dit
    }
}
