//! Semantic-bridged spatiotemporal fusion: the semantic graph queries the
//! global and local graphs through one shared cross-attention, a per-node
//! two-way softmax gate mixes the streams, and a feed-forward block folds
//! them into the semantic anchor.

use candle_core::{Tensor, D};

use super::graph::{CognitionGraph, EdgeBuilder, GraphConfig, GraphKind};
use crate::nn::{softmax_last, Attention, LayerNorm, Mlp, ParamBuilder};
use crate::{ensure_config, Result};

pub struct SemStf {
    q_norm: LayerNorm,
    kv_norm: LayerNorm,
    cross: Attention,
    gate: Mlp,
    ffn_norm: LayerNorm,
    ffn: Mlp,
    edges: EdgeBuilder,
    copy_edges: bool,
}

/// Intermediate values of one fusion pass.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub graph: CognitionGraph,
    /// `[n, d]` global stream readout.
    pub h_global: Tensor,
    /// `[n, d]` local stream readout.
    pub h_local: Tensor,
    /// `[n, 2]` softmax logits before normalization.
    pub gate_logits: Tensor,
    /// `[n, 2]` per-node weights `(g_g, g_l)`.
    pub gates: Tensor,
    /// `[n, d]` `h_sem + g_g⊙h_g + g_l⊙h_l`
    pub mixed: Tensor,
}

impl SemStf {
    pub fn new(pb: &ParamBuilder, cfg: &GraphConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            q_norm: LayerNorm::new(&pb.pp("q_norm"), d)?,
            kv_norm: LayerNorm::new(&pb.pp("kv_norm"), d)?,
            cross: Attention::new(&pb.pp("cross"), d, d, d, d, cfg.heads)?,
            gate: Mlp::new(&pb.pp("gate"), 3 * d, d, 2)?,
            ffn_norm: LayerNorm::new(&pb.pp("ffn_norm"), d)?,
            ffn: Mlp::new(&pb.pp("ffn"), d, 2 * d, d)?,
            edges: EdgeBuilder::new(&pb.pp("edges"), cfg)?,
            copy_edges: cfg.copy_fused_edges,
        })
    }

    pub fn edges(&self) -> &EdgeBuilder {
        &self.edges
    }

    pub fn forward(&self, sem: &CognitionGraph, global: &CognitionGraph, local: &CognitionGraph) -> Result<CognitionGraph> {
        Ok(self.forward_detailed(sem, global, local, None)?.graph)
    }

    /// `forced` overrides the learned per-node weights with constants.
    pub fn forward_detailed(
        &self,
        sem: &CognitionGraph,
        global: &CognitionGraph,
        local: &CognitionGraph,
        forced: Option<(f64, f64)>,
    ) -> Result<FusionOutput> {
        ensure_config!(sem.kind == GraphKind::Semantic, "fusion query must be a semantic graph, got {}", sem.kind);
        ensure_config!(global.kind == GraphKind::Global, "expected a global graph, got {}", global.kind);
        ensure_config!(local.kind == GraphKind::Local, "expected a local graph, got {}", local.kind);
        for g in [global, local] {
            ensure_config!(
                g.nodes.dims() == sem.nodes.dims(),
                "graph shapes differ: {:?} vs {:?}",
                g.nodes.dims(),
                sem.nodes.dims()
            );
        }
        let h_sem = &sem.nodes;
        let q = self.q_norm.forward(h_sem)?;
        let h_global = self.cross.forward(&q, &self.kv_norm.forward(&global.nodes)?, None)?;
        let h_local = self.cross.forward(&q, &self.kv_norm.forward(&local.nodes)?, None)?;
        let gate_logits = self.gate.forward(&Tensor::cat(&[h_sem, &h_global, &h_local], 1)?)?;
        let gates = match forced {
            None => softmax_last(&gate_logits)?,
            Some((gg, gl)) => {
                let n = h_sem.dims()[0];
                Tensor::new(&[gg, gl], h_sem.device())?
                    .to_dtype(h_sem.dtype())?
                    .unsqueeze(0)?
                    .repeat((n, 1))?
            }
        };
        let g_g = gates.narrow(D::Minus1, 0, 1)?;
        let g_l = gates.narrow(D::Minus1, 1, 1)?;
        let mixed = (h_sem + h_global.broadcast_mul(&g_g)?)?.add(&h_local.broadcast_mul(&g_l)?)?;
        let nodes = (&mixed + self.ffn.forward(&self.ffn_norm.forward(&mixed)?)?)?;
        let (edge_feats, edge_gate) = if self.copy_edges {
            (sem.edge_feats.clone(), sem.edge_gate.clone())
        } else {
            self.edges.forward(&nodes, &sem.logical)?
        };
        Ok(FusionOutput {
            graph: CognitionGraph {
                kind: GraphKind::Fused,
                nodes,
                edge_feats,
                edge_gate,
                topk: self.edges.topk(),
                logical: sem.logical.clone(),
            },
            h_global,
            h_local,
            gate_logits,
            gates,
            mixed,
        })
    }
}
