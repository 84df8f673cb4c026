//! The five token encoders: semantic (causal in time), spatial (pairwise
//! cross-view attention), temporal (sliding-window attention), logical
//! (image + text) and action (frame differences). Spatial, temporal and
//! logical encoders share one patch backbone.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::rng::fnv1a64;
use crate::nn::{
    layer_norm, mask_from_fn, Attention, Init, Linear, Mlp, Param, ParamBuilder, TransformerBlock,
};
use crate::{ensure_config, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoundationConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d: usize,
    pub d_a: usize,
    pub logical_tokens: usize,
    pub heads: usize,
    pub temporal_window: usize,
    pub max_frames: usize,
    pub text_table: usize,
    pub semantic_blocks: usize,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            d: 64,
            d_a: 32,
            logical_tokens: 8,
            heads: 4,
            temporal_window: 3,
            max_frames: 32,
            text_table: 1024,
            semantic_blocks: 2,
        }
    }
}

impl FoundationConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.patch > 0, "patch size must be positive");
        ensure_config!(
            self.image_size % self.patch == 0,
            "image size {} not divisible by patch size {}",
            self.image_size,
            self.patch
        );
        ensure_config!(self.temporal_window % 2 == 1, "temporal window must be odd, got {}", self.temporal_window);
        ensure_config!(self.logical_tokens >= 1, "need at least one logical token");
        ensure_config!(self.text_table >= 1, "text table must be non-empty");
        Ok(())
    }
}

/// The five token families plus patch geometry.
#[derive(Debug, Clone)]
pub struct TokenBundle {
    /// `[F, P, d]`
    pub semantic: Tensor,
    /// `[V, P, d]`
    pub spatial: Tensor,
    /// `[F, P, d]`
    pub temporal: Tensor,
    /// `[L, d]`
    pub logical: Tensor,
    /// `[F, d_a]`
    pub action: Tensor,
    /// `[P, 2]` normalized patch centres `(x, y)` in `[0, 1]`.
    pub patch_coords: Tensor,
    /// `[P]`
    pub patch_depth: Tensor,
}

/// Splits `[N, H, W, 3]` into `[N, P, p*p*3]` row-major patches.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (n, h, w, c) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("resolution {h}x{w} not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape(&[n, gh, patch, gw, patch, c])?
        .permute([0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((n, gh * gw, patch * patch * c))?)
}

/// Whitespace tokens, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

pub struct Foundation {
    cfg: FoundationConfig,
    sem_embed: Linear,
    sem_time: Param,
    sem_blocks: Vec<TransformerBlock>,
    backbone_embed: Linear,
    backbone_pos: Param,
    backbone_block: TransformerBlock,
    view_attn: Attention,
    temporal_block: TransformerBlock,
    depth_head: Linear,
    logical_mlp: Mlp,
    text_table: Param,
    text_pad: Param,
    action_mlp: Mlp,
}

impl Foundation {
    pub fn new(pb: &ParamBuilder, cfg: &FoundationConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let p = cfg.num_patches();
        let sem = pb.pp("semantic");
        let bb = pb.pp("backbone");
        Ok(Self {
            sem_embed: Linear::new(&sem.pp("embed"), patch_dim, d)?,
            sem_time: sem.get(&[cfg.max_frames, d], "time", Init::Normal(0.02))?,
            sem_blocks: (0..cfg.semantic_blocks)
                .map(|i| TransformerBlock::new(&sem.pp(&format!("block{i}")), d, cfg.heads, 2))
                .collect::<Result<_>>()?,
            backbone_embed: Linear::new(&bb.pp("embed"), patch_dim, d)?,
            backbone_pos: bb.get(&[p, d], "pos", Init::Normal(0.02))?,
            backbone_block: TransformerBlock::new(&bb.pp("block"), d, cfg.heads, 2)?,
            view_attn: Attention::new(&pb.pp("spatial").pp("view_attn"), d, d, d, d, cfg.heads)?,
            temporal_block: TransformerBlock::new(&pb.pp("temporal").pp("block"), d, cfg.heads, 2)?,
            depth_head: Linear::new(&pb.pp("spatial").pp("depth"), d, 1)?,
            logical_mlp: Mlp::new(&pb.pp("logical").pp("mlp"), 2 * d, 2 * d, cfg.logical_tokens * d)?,
            text_table: pb.pp("text").get(&[cfg.text_table, d], "table", Init::Normal(0.5))?,
            text_pad: pb.pp("text").get(&[1, d], "pad", Init::Normal(0.5))?,
            action_mlp: Mlp::new(&pb.pp("action").pp("mlp"), p * 3, 2 * cfg.d_a, cfg.d_a)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &FoundationConfig {
        &self.cfg
    }

    fn check_images(&self, images: &Tensor) -> Result<(usize, usize)> {
        let (n, h, w, c) = images.dims4()?;
        ensure_config!(c == 3, "images must have 3 channels, got {c}");
        ensure_config!(n >= 1, "need at least one image");
        ensure_config!(
            h % self.cfg.patch == 0 && w % self.cfg.patch == 0,
            "resolution {h}x{w} not divisible by patch size {}",
            self.cfg.patch
        );
        ensure_config!(
            h == self.cfg.image_size && w == self.cfg.image_size,
            "encoder built for {0}x{0} images, got {h}x{w}",
            self.cfg.image_size
        );
        Ok((n, self.cfg.num_patches()))
    }

    /// Patch embedding of the semantic encoder, before any attention.
    pub fn semantic_patch_embed(&self, images: &Tensor) -> Result<Tensor> {
        self.sem_embed.forward(&patchify(images, self.cfg.patch)?)
    }

    /// `[F, H, W, 3] -> [F, P, d]`, causal over frames.
    pub fn encode_semantic(&self, images: &Tensor) -> Result<Tensor> {
        let (f, p) = self.check_images(images)?;
        ensure_config!(f <= self.cfg.max_frames, "at most {} frames supported", self.cfg.max_frames);
        let d = self.cfg.d;
        let time = self.sem_time.t().narrow(0, 0, f)?.unsqueeze(1)?;
        let x = self.semantic_patch_embed(images)?.broadcast_add(&time)?;
        let mut x = x.reshape((1, f * p, d))?;
        let mask = mask_from_fn(f * p, f * p, x.dtype(), x.device(), |i, j| j / p <= i / p)?;
        for b in &self.sem_blocks {
            x = b.forward(&x, Some(&mask))?;
        }
        Ok(x.reshape((f, p, d))?)
    }

    /// Shared per-image backbone `[N, H, W, 3] -> [N, P, d]`.
    pub fn backbone(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let x = self
            .backbone_embed
            .forward(&patchify(images, self.cfg.patch)?)?
            .broadcast_add(&self.backbone_pos.t().unsqueeze(0)?)?;
        self.backbone_block.forward(&x, None)
    }

    /// `[V, H, W, 3] -> [V, P, d]`: each view attends to every other view
    /// pairwise; the pairwise readouts are averaged and added residually.
    pub fn encode_spatial(&self, views: &Tensor) -> Result<Tensor> {
        let x = self.backbone(views)?;
        self.refine_views(&x)
    }

    /// Cross-view refinement of backbone features `[V, P, d]`.
    pub fn refine_views(&self, x: &Tensor) -> Result<Tensor> {
        let (v, p, d) = x.dims3()?;
        if v == 1 {
            return Ok(x.clone());
        }
        let mut qi = Vec::with_capacity(v * (v - 1));
        let mut ki = Vec::with_capacity(v * (v - 1));
        for a in 0..v as u32 {
            for b in 0..v as u32 {
                if a != b {
                    qi.push(a);
                    ki.push(b);
                }
            }
        }
        let pairs = qi.len();
        let normed = layer_norm(x, crate::nn::layers::LN_EPS)?;
        let q = normed.index_select(&Tensor::from_vec(qi, pairs, x.device())?, 0)?;
        let k = normed.index_select(&Tensor::from_vec(ki, pairs, x.device())?, 0)?;
        let cross = self
            .view_attn
            .forward(&q, &k, None)?
            .reshape((v, v - 1, p, d))?
            .mean(1)?;
        Ok((x + cross)?)
    }

    /// `[F, H, W, 3] -> [F, P, d]`; frame `f` attends to frames within
    /// `window / 2` of `f`.
    pub fn encode_temporal(&self, frames: &Tensor, window: usize) -> Result<Tensor> {
        ensure_config!(window % 2 == 1, "temporal window must be odd, got {window}");
        let x = self.backbone(frames)?;
        let (f, p, d) = x.dims3()?;
        let half = window / 2;
        let mask = mask_from_fn(f * p, f * p, x.dtype(), x.device(), |i, j| (i / p).abs_diff(j / p) <= half)?;
        Ok(self
            .temporal_block
            .forward(&x.reshape((1, f * p, d))?, Some(&mask))?
            .reshape((f, p, d))?)
    }

    /// Temporal block with unrestricted attention; reference for the
    /// window mask.
    pub fn encode_temporal_full(&self, frames: &Tensor) -> Result<Tensor> {
        let x = self.backbone(frames)?;
        let (f, p, d) = x.dims3()?;
        Ok(self
            .temporal_block
            .forward(&x.reshape((1, f * p, d))?, None)?
            .reshape((f, p, d))?)
    }

    /// Hashed bag-of-words vector `[d]`; zero for empty text.
    pub fn text_bag(&self, text: &str) -> Result<Tensor> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Ok(Tensor::zeros(self.cfg.d, self.text_table.t().dtype(), self.text_table.t().device())?);
        }
        Ok(self.embed_text(text)?.mean(0)?)
    }

    /// `[L, d]` from mean-pooled image patches and the text bag.
    pub fn encode_logical(&self, frames: &Tensor, text: &str) -> Result<Tensor> {
        let feats = self.backbone(frames)?;
        self.logical_from_features(&feats, text)
    }

    fn logical_from_features(&self, feats: &Tensor, text: &str) -> Result<Tensor> {
        let d = self.cfg.d;
        let global = feats.reshape(((), d))?.mean(0)?;
        let joint = Tensor::cat(&[global, self.text_bag(text)?], 0)?.unsqueeze(0)?;
        Ok(self
            .logical_mlp
            .forward(&joint)?
            .reshape((self.cfg.logical_tokens, d))?)
    }

    /// `[F, H, W, 3] -> [F, d_a]` from per-patch mean frame differences;
    /// frame 0 uses a zero difference.
    pub fn encode_action(&self, frames: &Tensor) -> Result<Tensor> {
        let (f, p) = self.check_images(frames)?;
        let first = frames.narrow(0, 0, 1)?.zeros_like()?;
        let diffs = if f > 1 {
            let d = (frames.narrow(0, 1, f - 1)? - frames.narrow(0, 0, f - 1)?)?;
            Tensor::cat(&[first, d], 0)?
        } else {
            first
        };
        let pp = self.cfg.patch * self.cfg.patch;
        let pooled = patchify(&diffs, self.cfg.patch)?
            .reshape((f, p, pp, 3))?
            .mean(2)?
            .reshape((f, p * 3))?;
        self.action_mlp.forward(&pooled)
    }

    /// `[L_t, d]` rows of the hashed token table; empty text yields the
    /// single padding row.
    pub fn embed_text(&self, text: &str) -> Result<Tensor> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Ok(self.text_pad.t());
        }
        let idx: Vec<u32> = toks
            .iter()
            .map(|t| (fnv1a64(t.as_bytes()) % self.cfg.text_table as u64) as u32)
            .collect();
        let n = idx.len();
        let table = self.text_table.t();
        Ok(table.index_select(&Tensor::from_vec(idx, n, table.device())?, 0)?)
    }

    /// Per-patch depth `[P]` from spatial tokens `[V, P, d]`.
    pub fn patch_depth(&self, spatial: &Tensor) -> Result<Tensor> {
        Ok(self.depth_head.forward(spatial)?.squeeze(D::Minus1)?.mean(0)?.tanh()?)
    }

    pub fn patch_coords(&self, like: &Tensor) -> Result<Tensor> {
        let g = self.cfg.grid();
        let mut data = Vec::with_capacity(g * g * 2);
        for r in 0..g {
            for c in 0..g {
                data.push((c as f64 + 0.5) / g as f64);
                data.push((r as f64 + 0.5) / g as f64);
            }
        }
        Ok(Tensor::from_vec(data, (g * g, 2), like.device())?.to_dtype(like.dtype())?)
    }

    /// Runs all five encoders. `frames` is the `[F, H, W, 3]` prompt
    /// sequence and `views` the `[V, H, W, 3]` multi-view set.
    pub fn encode(&self, frames: &Tensor, views: &Tensor, text: &str) -> Result<TokenBundle> {
        let semantic = self.encode_semantic(frames)?;
        let frame_feats = self.backbone(frames)?;
        let (f, p, d) = frame_feats.dims3()?;
        let half = self.cfg.temporal_window / 2;
        let mask = mask_from_fn(f * p, f * p, frame_feats.dtype(), frame_feats.device(), |i, j| {
            (i / p).abs_diff(j / p) <= half
        })?;
        let temporal = self
            .temporal_block
            .forward(&frame_feats.reshape((1, f * p, d))?, Some(&mask))?
            .reshape((f, p, d))?;
        let spatial = self.encode_spatial(views)?;
        let logical = self.logical_from_features(&frame_feats, text)?;
        let action = self.encode_action(frames)?;
        let patch_depth = self.patch_depth(&spatial)?;
        Ok(TokenBundle {
            patch_coords: self.patch_coords(&semantic)?,
            semantic,
            spatial,
            temporal,
            logical,
            action,
            patch_depth,
        })
    }
}
