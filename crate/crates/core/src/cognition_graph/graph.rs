//! Graph construction: seed-query node extraction, logically guided gated
//! edges with per-row top-k sparsification, and residual message passing.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::embed::embed_tensor;
use crate::nn::layers::to_f64_vec;
use crate::nn::{gelu, sigmoid, Attention, Init, Linear, Param, ParamBuilder};
use crate::{ensure_config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Semantic,
    Global,
    Local,
    Fused,
}

impl GraphKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GraphKind::Semantic => "semantic",
            GraphKind::Global => "global",
            GraphKind::Local => "local",
            GraphKind::Fused => "fused",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(GraphKind::Semantic),
            "global" => Ok(GraphKind::Global),
            "local" => Ok(GraphKind::Local),
            "fused" => Ok(GraphKind::Fused),
            _ => Err(Error::config(format!("unknown graph kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub nodes: usize,
    pub d: usize,
    pub d_e: usize,
    pub topk: usize,
    pub pe_dim: usize,
    pub heads: usize,
    pub edge_hidden: usize,
    pub msg_hidden: usize,
    /// Copy the semantic graph's edges into the fused graph instead of
    /// rebuilding them.
    pub copy_fused_edges: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            nodes: 256,
            d: 64,
            d_e: 32,
            topk: 8,
            pe_dim: 48,
            heads: 4,
            edge_hidden: 64,
            msg_hidden: 64,
            copy_fused_edges: false,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.nodes >= 2, "a graph needs at least 2 nodes, got {}", self.nodes);
        ensure_config!(self.topk >= 1, "topk must be at least 1");
        ensure_config!(self.pe_dim % 12 == 0 && self.pe_dim > 0, "pe_dim must be a positive multiple of 12");
        ensure_config!(self.d % self.heads == 0, "d={} not divisible by {} heads", self.d, self.heads);
        Ok(())
    }
}

/// Nodes plus dense gated edges. `logical` keeps the guiding tokens so
/// edges can be rebuilt after the nodes change.
#[derive(Debug, Clone)]
pub struct CognitionGraph {
    pub kind: GraphKind,
    /// `[n, d]`
    pub nodes: Tensor,
    /// `[n, n, d_e]`
    pub edge_feats: Tensor,
    /// `[n, n]` in `[0, 1]`
    pub edge_gate: Tensor,
    pub topk: usize,
    /// `[L, d]`
    pub logical: Tensor,
}

impl CognitionGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.nodes.dims()[1]
    }

    pub fn gate_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.edge_gate.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// Checks row sparsity, the zero diagonal, gate range and finiteness.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.edge_gate.dims() != [n, n] || self.edge_feats.dims()[..2] != [n, n] {
            return Err(Error::Numerical(format!("edge tensors do not match {n} nodes")));
        }
        if !to_f64_vec(&self.nodes)?.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("{} graph has non-finite nodes", self.kind)));
        }
        for (i, row) in self.gate_rows()?.iter().enumerate() {
            if row[i] != 0.0 {
                return Err(Error::Numerical(format!("self-edge at node {i}")));
            }
            if row.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(Error::Numerical(format!("gate out of range in row {i}")));
            }
            let nz = row.iter().filter(|g| **g != 0.0).count();
            if nz > self.topk {
                return Err(Error::Numerical(format!("row {i} has {nz} edges, topk is {}", self.topk)));
            }
        }
        Ok(())
    }

    pub fn detach(&self) -> Self {
        Self {
            kind: self.kind,
            nodes: self.nodes.detach(),
            edge_feats: self.edge_feats.detach(),
            edge_gate: self.edge_gate.detach(),
            topk: self.topk,
            logical: self.logical.detach(),
        }
    }
}

/// `n` learnable seeds cross-attending over tokens. Keys see the token
/// concatenated with its coordinate embedding; values see the token only.
pub struct NodeExtractor {
    seeds: Param,
    attn: Attention,
}

impl NodeExtractor {
    pub fn new(pb: &ParamBuilder, cfg: &GraphConfig) -> Result<Self> {
        Ok(Self {
            seeds: pb.get(&[cfg.nodes, cfg.d], "seeds", Init::Normal(1.0))?,
            attn: Attention::new_split(&pb.pp("attn"), cfg.d, cfg.d + cfg.pe_dim, cfg.d, cfg.d, cfg.d, cfg.heads)?,
        })
    }

    pub fn num_seeds(&self) -> usize {
        self.seeds.dims()[0]
    }

    /// `tokens [M, d]`, `coords_embed [M, d_pe]` -> `[n, d]`.
    pub fn forward(&self, tokens: &Tensor, coords_embed: &Tensor) -> Result<Tensor> {
        ensure_config!(tokens.dims()[0] >= 1, "node extraction needs at least one token");
        ensure_config!(
            tokens.dims()[0] == coords_embed.dims()[0],
            "{} tokens but {} coordinate embeddings",
            tokens.dims()[0],
            coords_embed.dims()[0]
        );
        let keys = Tensor::cat(&[tokens, coords_embed], 1)?;
        Ok(self.attn.forward_split(&self.seeds.t(), &keys, tokens, None)?.0)
    }
}

/// Keeps the `k` largest off-diagonal entries per row, lowest column first
/// among ties. Returns a 0/1 mask.
pub fn topk_mask(gates: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = gates.len();
    let mut mask = vec![0.0; n * n];
    for (i, row) in gates.iter().enumerate() {
        let mut cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cols.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &j in cols.iter().take(k) {
            mask[i * n + j] = 1.0;
        }
    }
    mask
}

/// Edge features `e_ij = MLP([N_i; N_j; c])` with `c` an attention pool of
/// the logical tokens queried by the mean node, and gates
/// `sigmoid(w·e_ij)` sparsified per row.
pub struct EdgeBuilder {
    pool: Attention,
    src: Linear,
    dst: Linear,
    ctx: Linear,
    out: Linear,
    gate: Linear,
    topk: usize,
}

impl EdgeBuilder {
    pub fn new(pb: &ParamBuilder, cfg: &GraphConfig) -> Result<Self> {
        let mlp = pb.pp("mlp");
        Ok(Self {
            pool: Attention::new(&pb.pp("pool"), cfg.d, cfg.d, cfg.d, cfg.d, cfg.heads)?,
            src: Linear::new(&mlp.pp("src"), cfg.d, cfg.edge_hidden)?,
            dst: Linear::no_bias(&mlp.pp("dst"), cfg.d, cfg.edge_hidden)?,
            ctx: Linear::no_bias(&mlp.pp("ctx"), cfg.d, cfg.edge_hidden)?,
            out: Linear::new(&mlp.pp("out"), cfg.edge_hidden, cfg.d_e)?,
            gate: Linear::new(&pb.pp("gate"), cfg.d_e, 1)?,
            topk: cfg.topk,
        })
    }

    pub fn topk(&self) -> usize {
        self.topk
    }

    /// `[d]` logical context for the given nodes.
    pub fn context(&self, nodes: &Tensor, logical: &Tensor) -> Result<Tensor> {
        let q = nodes.mean_keepdim(0)?;
        Ok(self.pool.forward(&q, logical, None)?.squeeze(0)?)
    }

    /// Edge features and gates before sparsification.
    pub fn raw(&self, nodes: &Tensor, logical: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = nodes.dims()[0];
        ensure_config!(n >= 2, "edges need at least 2 nodes, got {n}");
        let c = self.context(nodes, logical)?.unsqueeze(0)?;
        let a = self.src.forward(nodes)?.broadcast_add(&self.ctx.forward(&c)?)?.unsqueeze(1)?;
        let b = self.dst.forward(nodes)?.unsqueeze(0)?;
        let h = gelu(&a.broadcast_add(&b)?)?;
        let e = self.out.forward(&h)?;
        let g = sigmoid(&self.gate.forward(&e)?.squeeze(D::Minus1)?)?;
        Ok((e, g))
    }

    /// `(edge_feats [n, n, d_e], edge_gate [n, n])`.
    pub fn forward(&self, nodes: &Tensor, logical: &Tensor) -> Result<(Tensor, Tensor)> {
        let (e, g) = self.raw(nodes, logical)?;
        let n = nodes.dims()[0];
        let rows = g.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mask = Tensor::from_vec(topk_mask(&rows, self.topk), (n, n), g.device())?.to_dtype(g.dtype())?;
        Ok((e, (g * mask)?))
    }
}

/// `N_i' = N_i + Σ_j gate_ij · MLP([N_i; N_j; E_ij])`.
pub struct MessagePassing {
    src: Linear,
    dst: Linear,
    edge: Linear,
    out: Linear,
}

impl MessagePassing {
    pub fn new(pb: &ParamBuilder, cfg: &GraphConfig) -> Result<Self> {
        Ok(Self {
            src: Linear::new(&pb.pp("src"), cfg.d, cfg.msg_hidden)?,
            dst: Linear::no_bias(&pb.pp("dst"), cfg.d, cfg.msg_hidden)?,
            edge: Linear::no_bias(&pb.pp("edge"), cfg.d_e, cfg.msg_hidden)?,
            out: Linear::new(&pb.pp("out"), cfg.msg_hidden, cfg.d)?,
        })
    }

    /// Per-edge messages `[n, n, d]` before gating.
    pub fn messages(&self, nodes: &Tensor, edge_feats: &Tensor) -> Result<Tensor> {
        let a = self.src.forward(nodes)?.unsqueeze(1)?;
        let b = self.dst.forward(nodes)?.unsqueeze(0)?;
        let h = gelu(&self.edge.forward(edge_feats)?.broadcast_add(&a)?.broadcast_add(&b)?)?;
        self.out.forward(&h)
    }

    pub fn forward(&self, nodes: &Tensor, edge_feats: &Tensor, edge_gate: &Tensor) -> Result<Tensor> {
        let m = self.messages(nodes, edge_feats)?;
        let agg = m.broadcast_mul(&edge_gate.unsqueeze(2)?)?.sum(1)?;
        Ok((nodes + agg)?)
    }

    /// Weights of the first layer `[src | dst | edge]` and the output layer.
    pub fn layers(&self) -> [&Linear; 4] {
        [&self.src, &self.dst, &self.edge, &self.out]
    }
}

/// The full construction pipeline for one graph kind.
pub struct GraphEncoder {
    kind: GraphKind,
    cfg: GraphConfig,
    extractor: NodeExtractor,
    edges: EdgeBuilder,
    messages: MessagePassing,
}

impl GraphEncoder {
    pub fn new(pb: &ParamBuilder, kind: GraphKind, cfg: &GraphConfig) -> Result<Self> {
        cfg.validate()?;
        ensure_config!(kind != GraphKind::Fused, "fused graphs are produced by fusion, not construction");
        Ok(Self {
            kind,
            cfg: cfg.clone(),
            extractor: NodeExtractor::new(&pb.pp("nodes"), cfg)?,
            edges: EdgeBuilder::new(&pb.pp("edges"), cfg)?,
            messages: MessagePassing::new(&pb.pp("message"), cfg)?,
        })
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn extractor(&self) -> &NodeExtractor {
        &self.extractor
    }

    pub fn edges(&self) -> &EdgeBuilder {
        &self.edges
    }

    pub fn messages(&self) -> &MessagePassing {
        &self.messages
    }

    /// Coordinates are `[M, 2]` for semantic graphs and `[M, 3]` otherwise.
    pub fn coord_embedding(&self, coords: &Tensor) -> Result<Tensor> {
        let want = if self.kind == GraphKind::Semantic { 2 } else { 3 };
        let c = coords.dims2()?.1;
        ensure_config!(c == want, "{} graph expects {want}-d coordinates, got {c}", self.kind);
        embed_tensor(coords, self.cfg.pe_dim)
    }

    /// `tokens [M, d]`, `coords [M, 2|3]`, `logical [L, d]`.
    pub fn build(&self, tokens: &Tensor, coords: &Tensor, logical: &Tensor) -> Result<CognitionGraph> {
        let pe = self.coord_embedding(coords)?;
        let nodes = self.extractor.forward(tokens, &pe)?;
        let (edge_feats, edge_gate) = self.edges.forward(&nodes, logical)?;
        let nodes = self.messages.forward(&nodes, &edge_feats, &edge_gate)?;
        Ok(CognitionGraph {
            kind: self.kind,
            nodes,
            edge_feats,
            edge_gate,
            topk: self.cfg.topk,
            logical: logical.clone(),
        })
    }
}

/// Flattens `[B, P, d]` tokens and tiles per-patch coordinates `[P, c]`
/// across the leading axis.
pub fn flatten_tokens(tokens: &Tensor, coords: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, p, d) = tokens.dims3()?;
    ensure_config!(coords.dims()[0] == p, "{} coordinates for {p} patches", coords.dims()[0]);
    Ok((tokens.reshape((b * p, d))?, coords.repeat((b, 1))?))
}

#[cfg(test)]
impl NodeExtractor {
    pub(crate) fn attn_v(&self) -> crate::nn::Linear {
        self.attn.v_proj().clone()
    }

    pub(crate) fn attn_o(&self) -> crate::nn::Linear {
        self.attn.o_proj().clone()
    }
}
