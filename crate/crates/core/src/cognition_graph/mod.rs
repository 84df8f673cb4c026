//! Semantic, global-appearance and local-dynamic cognition graphs and their
//! fusion into one spatiotemporal graph.

pub mod embed;
pub mod export;
pub mod fusion;
pub mod graph;

pub use embed::{embed_tensor, ge3d, pe2d};
pub use fusion::{FusionOutput, SemStf};
pub use graph::{
    flatten_tokens, topk_mask, CognitionGraph, EdgeBuilder, GraphConfig, GraphEncoder, GraphKind, MessagePassing,
    NodeExtractor,
};

use candle_core::Tensor;

use crate::foundation::TokenBundle;
use crate::nn::ParamBuilder;
use crate::{ensure_config, Result};

/// The three graphs and their fusion.
#[derive(Debug, Clone)]
pub struct GraphSet {
    pub semantic: CognitionGraph,
    pub global: CognitionGraph,
    pub local: CognitionGraph,
    pub fused: CognitionGraph,
}

pub struct CognitionEncoder {
    cfg: GraphConfig,
    semantic: GraphEncoder,
    global: GraphEncoder,
    local: GraphEncoder,
    fusion: SemStf,
}

impl CognitionEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &GraphConfig) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            semantic: GraphEncoder::new(&pb.pp("semantic"), GraphKind::Semantic, cfg)?,
            global: GraphEncoder::new(&pb.pp("global"), GraphKind::Global, cfg)?,
            local: GraphEncoder::new(&pb.pp("local"), GraphKind::Local, cfg)?,
            fusion: SemStf::new(&pb.pp("fusion"), cfg)?,
        })
    }

    pub fn config(&self) -> &GraphConfig {
        &self.cfg
    }

    pub fn encoder(&self, kind: GraphKind) -> Result<&GraphEncoder> {
        match kind {
            GraphKind::Semantic => Ok(&self.semantic),
            GraphKind::Global => Ok(&self.global),
            GraphKind::Local => Ok(&self.local),
            GraphKind::Fused => Err(crate::Error::config("fused graphs only come from fusion")),
        }
    }

    pub fn fusion(&self) -> &SemStf {
        &self.fusion
    }

    /// Builds one graph from flat tokens `[M, d]` and coordinates `[M, c]`.
    pub fn build_graph(
        &self,
        kind: GraphKind,
        tokens: &Tensor,
        coords: &Tensor,
        logical: &Tensor,
        n: usize,
    ) -> Result<CognitionGraph> {
        let enc = self.encoder(kind)?;
        ensure_config!(
            n == enc.extractor().num_seeds(),
            "model was built for {} nodes, asked for {n}",
            enc.extractor().num_seeds()
        );
        enc.build(tokens, coords, logical)
    }

    /// Runs the full construction from a token bundle.
    pub fn encode(&self, bundle: &TokenBundle) -> Result<GraphSet> {
        let n = self.cfg.nodes;
        let xy = &bundle.patch_coords;
        let xyz = Tensor::cat(&[xy, &bundle.patch_depth.unsqueeze(1)?], 1)?;
        let (t, c) = flatten_tokens(&bundle.semantic, xy)?;
        let semantic = self.build_graph(GraphKind::Semantic, &t, &c, &bundle.logical, n)?;
        let (t, c) = flatten_tokens(&bundle.spatial, &xyz)?;
        let global = self.build_graph(GraphKind::Global, &t, &c, &bundle.logical, n)?;
        let (t, c) = flatten_tokens(&bundle.temporal, &xyz)?;
        let local = self.build_graph(GraphKind::Local, &t, &c, &bundle.logical, n)?;
        let fused = self.fusion.forward(&semantic, &global, &local)?;
        Ok(GraphSet { semantic, global, local, fused })
    }
}
