//! Action-conditioned latent world model: graph-to-slot distillation,
//! attention-pooled actions, adaLN conditioning, a block-causal transformer
//! predictor over slot histories, and a cross-attention decoder that
//! resamples predicted slots back into cognition graphs.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::cognition_graph::{CognitionGraph, EdgeBuilder, GraphKind};
use crate::nn::{layer_norm, mask_from_fn, Attention, Init, LayerNorm, Linear, Mlp, Param, ParamBuilder, TransformerBlock};
use crate::nn::layers::LN_EPS;
use crate::{ensure_config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModelConfig {
    pub slots: usize,
    pub d_s: usize,
    pub context: usize,
    pub heads: usize,
    pub predictor_blocks: usize,
    pub alpha: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self { slots: 16, d_s: 64, context: 8, heads: 4, predictor_blocks: 2, alpha: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct WorldState {
    /// `[m, d_s]`
    pub slots: Tensor,
    pub time_index: usize,
}

#[derive(Debug, Clone)]
pub struct ActionVector {
    /// `[d_a]`
    pub a: Tensor,
}

pub struct WorldModel {
    cfg: WorldModelConfig,
    queries: Param,
    distill_attn: Attention,
    distill_norm: LayerNorm,
    action_query: Param,
    action_attn: Attention,
    action_mlp: Mlp,
    gamma: Mlp,
    beta: Mlp,
    time_embed: Param,
    slot_embed: Param,
    blocks: Vec<TransformerBlock>,
    out_norm: LayerNorm,
    head: Linear,
    dec_norm: LayerNorm,
    dec_attn: Attention,
    dec_ffn: Mlp,
}

impl WorldModel {
    /// `d` is the graph node width, `d_a` the action token width.
    pub fn new(pb: &ParamBuilder, cfg: &WorldModelConfig, d: usize, d_a: usize) -> Result<Self> {
        ensure_config!(cfg.context >= 1, "predictor context must be at least 1");
        ensure_config!(cfg.slots >= 1, "need at least one slot");
        let (m, ds) = (cfg.slots, cfg.d_s);
        let st = pb.pp("state");
        let ac = pb.pp("action");
        let pr = pb.pp("predictor");
        let de = pb.pp("decoder");
        let action_heads = if d_a % cfg.heads == 0 { cfg.heads } else { 1 };
        // The head starts as the identity, so an untrained predictor copies
        // the normalized last state and training learns the change.
        let head = Linear::new(&pr.pp("head"), ds, ds)?;
        head.weight().var().set(&Tensor::eye(ds, pb.dtype(), pb.device())?)?;
        let gamma = Mlp::new(&pb.pp("adaln").pp("gamma"), d_a, ds, ds)?;
        let beta = Mlp::new(&pb.pp("adaln").pp("beta"), d_a, ds, ds)?;
        Ok(Self {
            queries: st.get(&[m, ds], "queries", Init::Normal(1.0))?,
            distill_attn: Attention::new(&st.pp("attn"), ds, d, ds, ds, cfg.heads)?,
            distill_norm: LayerNorm::new(&st.pp("norm"), ds)?,
            action_query: ac.get(&[1, d_a], "query", Init::Normal(1.0))?,
            action_attn: Attention::new(&ac.pp("attn"), d_a, d_a, d_a, d_a, action_heads)?,
            action_mlp: Mlp::new(&ac.pp("mlp"), d_a, 2 * d_a, d_a)?,
            gamma,
            beta,
            time_embed: pr.get(&[cfg.context, ds], "time", Init::Normal(0.02))?,
            slot_embed: pr.get(&[m, ds], "slot", Init::Normal(0.02))?,
            blocks: (0..cfg.predictor_blocks)
                .map(|i| TransformerBlock::new(&pr.pp(&format!("block{i}")), ds, cfg.heads, 2))
                .collect::<Result<_>>()?,
            out_norm: LayerNorm::new(&pr.pp("out_norm"), ds)?,
            head,
            dec_norm: LayerNorm::new(&de.pp("norm"), d)?,
            dec_attn: Attention::new(&de.pp("cross"), d, ds, d, d, if d % cfg.heads == 0 { cfg.heads } else { 1 })?,
            dec_ffn: Mlp::no_bias(&de.pp("ffn"), d, 2 * d, d)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.cfg
    }

    /// Raw cross-attention readout of the slot queries, before the output
    /// normalization.
    pub fn distill_readout(&self, nodes: &Tensor) -> Result<Tensor> {
        self.distill_attn.forward(&self.queries.t(), nodes, None)
    }

    pub fn distill_state(&self, g: &CognitionGraph) -> Result<WorldState> {
        ensure_config!(g.kind == GraphKind::Fused, "states are distilled from fused graphs, got {}", g.kind);
        self.distill_nodes(&g.nodes)
    }

    /// Distills any `[M, d]` token set, e.g. per-frame semantic tokens.
    pub fn distill_nodes(&self, nodes: &Tensor) -> Result<WorldState> {
        let slots = self.distill_norm.forward(&self.distill_readout(nodes)?)?;
        Ok(WorldState { slots, time_index: 0 })
    }

    pub fn pool_action(&self, action_tokens: &Tensor) -> Result<ActionVector> {
        ensure_config!(action_tokens.dims()[0] >= 1, "need at least one action token");
        let r = self.action_attn.forward(&self.action_query.t(), action_tokens, None)?;
        Ok(ActionVector { a: self.action_mlp.forward(&r)?.squeeze(0)? })
    }

    /// `(γ(a), β(a))`, each `[d_s]`.
    pub fn modulation(&self, a: &ActionVector) -> Result<(Tensor, Tensor)> {
        let x = a.a.unsqueeze(0)?;
        Ok((self.gamma.forward(&x)?.squeeze(0)?, self.beta.forward(&x)?.squeeze(0)?))
    }

    pub fn adaln_condition(&self, s: &WorldState, a: &ActionVector) -> Result<WorldState> {
        let (g, b) = self.modulation(a)?;
        let slots = layer_norm(&s.slots, LN_EPS)?.broadcast_mul(&(g + 1.0)?)?.broadcast_add(&b)?;
        Ok(WorldState { slots, time_index: s.time_index })
    }

    /// Predicts the next state and returns the per-block attention weights
    /// `[1, heads, m·T, m·T]`.
    pub fn predict_next_with_weights(&self, history: &[WorldState]) -> Result<(WorldState, Vec<Tensor>)> {
        ensure_config!(!history.is_empty(), "predictor needs a non-empty history");
        let start = history.len().saturating_sub(self.cfg.context);
        let window = &history[start..];
        let (t, m, ds) = (window.len(), self.cfg.slots, self.cfg.d_s);
        let seq: Vec<Tensor> = window.iter().map(|s| s.slots.clone()).collect();
        let x = Tensor::stack(&seq, 0)?
            .broadcast_add(&self.time_embed.t().narrow(0, 0, t)?.unsqueeze(1)?)?
            .broadcast_add(&self.slot_embed.t().unsqueeze(0)?)?;
        let mut x = x.reshape((1, t * m, ds))?;
        let mask = mask_from_fn(t * m, t * m, x.dtype(), x.device(), |i, j| j / m <= i / m)?;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, w) = b.forward_with_weights(&x, Some(&mask))?;
            x = y;
            weights.push(w);
        }
        let last = x.squeeze(0)?.narrow(0, (t - 1) * m, m)?;
        let slots = self.head.forward(&self.out_norm.forward(&last)?)?;
        let time_index = window[t - 1].time_index + 1;
        Ok((WorldState { slots, time_index }, weights))
    }

    pub fn predict_next(&self, history: &[WorldState]) -> Result<WorldState> {
        Ok(self.predict_next_with_weights(history)?.0)
    }

    /// Node update `N + h + FFN(h)` with `h` the slot readout of the
    /// normalized nodes.
    pub fn resample_nodes(&self, nodes: &Tensor, s_next: &WorldState) -> Result<Tensor> {
        let h = self.dec_attn.forward(&self.dec_norm.forward(nodes)?, &s_next.slots, None)?;
        Ok(((nodes + &h)? + self.dec_ffn.forward(&h)?)?)
    }

    pub fn resample_decode(&self, g: &CognitionGraph, s_next: &WorldState, edges: &EdgeBuilder) -> Result<CognitionGraph> {
        ensure_config!(g.kind == GraphKind::Fused, "resampling expects a fused graph, got {}", g.kind);
        let nodes = self.resample_nodes(&g.nodes, s_next)?;
        let (edge_feats, edge_gate) = edges.forward(&nodes, &g.logical)?;
        Ok(CognitionGraph {
            kind: GraphKind::Fused,
            nodes,
            edge_feats,
            edge_gate,
            topk: edges.topk(),
            logical: g.logical.clone(),
        })
    }

    /// Autoregressive rollout of `horizon` future graphs under one pooled
    /// action.
    pub fn rollout(
        &self,
        g: &CognitionGraph,
        action_tokens: &Tensor,
        horizon: usize,
        edges: &EdgeBuilder,
    ) -> Result<Vec<CognitionGraph>> {
        ensure_config!(horizon >= 1, "rollout horizon must be at least 1");
        let a = self.pool_action(action_tokens)?;
        let mut history = Vec::with_capacity(horizon);
        let mut current = g.clone();
        let mut out = Vec::with_capacity(horizon);
        for step in 0..horizon {
            let mut s = self.distill_state(&current)?;
            s.time_index = step;
            history.push(self.adaln_condition(&s, &a)?);
            let next = self.predict_next(&history)?;
            current = self.resample_decode(&current, &next, edges)?;
            out.push(current.clone());
        }
        Ok(out)
    }
}

/// `‖mean‖² + ‖cov − I‖_F²` with the unbiased sample covariance of `[B, N]`.
pub fn sigreg(states: &Tensor) -> Result<Tensor> {
    let (b, n) = states.dims2()?;
    ensure_config!(b >= 2, "sigreg needs a batch of at least 2, got {b}");
    let mean = states.mean_keepdim(0)?;
    let c = states.broadcast_sub(&mean)?;
    let cov = (c.t()?.matmul(&c)? / (b - 1) as f64)?;
    let eye = Tensor::eye(n, states.dtype(), states.device())?;
    Ok((mean.sqr()?.sum_all()? + (cov - eye)?.sqr()?.sum_all()?)?)
}

/// Mean squared error plus `α·sigreg`; the target is detached.
pub fn loss_wm(pred: &Tensor, target: &Tensor, states: &Tensor, alpha: f64) -> Result<Tensor> {
    ensure_config!(
        pred.dims() == target.dims(),
        "prediction {:?} and target {:?} differ in shape",
        pred.dims(),
        target.dims()
    );
    let mse = (pred - target.detach())?.sqr()?.mean_all()?;
    Ok((mse + (sigreg(states)? * alpha)?)?)
}

/// Flattens a list of states into a `[B, m·d_s]` batch.
pub fn stack_states(states: &[WorldState]) -> Result<Tensor> {
    let rows: Vec<Tensor> = states.iter().map(|s| s.slots.flatten_all()).collect::<std::result::Result<_, _>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Copy-last baseline helper: mean squared difference of two tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    crate::nn::layers::scalar(&(a - b)?.sqr()?.mean_all()?)
}
