use candle_core::{DType, Device, Tensor};

use super::layers::{layer_norm, softmax_last, LayerNorm, Linear, Mlp, LN_EPS};
use super::params::ParamBuilder;
use crate::{Error, Result};

/// Multi-head scaled dot-product attention with separate query and
/// key/value input widths.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(
        pb: &ParamBuilder,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Self::new_split(pb, q_dim, kv_dim, kv_dim, inner, out_dim, heads)
    }

    /// Keys and values projected from inputs of different widths.
    pub fn new_split(
        pb: &ParamBuilder,
        q_dim: usize,
        k_dim: usize,
        v_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::config(format!(
                "attention width {inner} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&pb.pp("q"), q_dim, inner)?,
            k: Linear::new(&pb.pp("k"), k_dim, inner)?,
            v: Linear::new(&pb.pp("v"), v_dim, inner)?,
            o: Linear::new(&pb.pp("o"), inner, out_dim)?,
            heads,
            head_dim: inner / heads,
        })
    }

    pub fn v_proj(&self) -> &Linear {
        &self.v
    }

    pub fn o_proj(&self) -> &Linear {
        &self.o
    }

    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(q_in, kv_in, mask)?.0)
    }

    /// Inputs are `[N, d]` or `[B, N, d]`. Returns the output and the
    /// attention weights `[B, heads, Nq, Nk]`. `mask` is an additive
    /// `[Nq, Nk]` bias.
    pub fn forward_with_weights(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        self.forward_split(q_in, kv_in, kv_in, mask)
    }

    /// Attention with distinct key and value inputs (same token count).
    pub fn forward_split(
        &self,
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let unbatched = q_in.rank() == 2;
        let (q_in, k_in, v_in) = if unbatched {
            (q_in.unsqueeze(0)?, k_in.unsqueeze(0)?, v_in.unsqueeze(0)?)
        } else {
            (q_in.clone(), k_in.clone(), v_in.clone())
        };
        let (b, nq, _) = q_in.dims3()?;
        let nk = k_in.dim(1)?;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(&q_in)?, nq)?;
        let k = split(self.k.forward(&k_in)?, nk)?;
        let v = split(self.v.forward(&v_in)?, nk)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let w = softmax_last(&scores)?;
        let out = w
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, self.heads * self.head_dim))?;
        let out = self.o.forward(&out)?;
        let out = if unbatched { out.squeeze(0)? } else { out };
        Ok((out, w))
    }
}

/// Additive mask: 0 where `allowed(i, j)`, -inf elsewhere.
pub fn mask_from_fn(
    nq: usize,
    nk: usize,
    dtype: DType,
    device: &Device,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(nq * nk);
    for i in 0..nq {
        for j in 0..nk {
            data.push(if allowed(i, j) { 0.0f64 } else { f64::NEG_INFINITY });
        }
    }
    Ok(Tensor::from_vec(data, (nq, nk), device)?.to_dtype(dtype)?)
}

/// Pre-norm transformer block: self-attention then MLP, both residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            attn: Attention::new(&pb.pp("attn"), dim, dim, dim, dim, heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, mask)?.0)
    }

    pub fn forward_with_weights(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let h = self.norm1.forward(x)?;
        let (a, w) = self.attn.forward_with_weights(&h, &h, mask)?;
        let x = (x + a)?;
        let x = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok((x, w))
    }
}

/// `(1 + scale) * LN(x) + shift` with an affine-free layer norm.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(layer_norm(x, LN_EPS)?
        .broadcast_mul(&(scale + 1.0)?)?
        .broadcast_add(shift)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::to_f64_vec;
    use crate::nn::params::ParamStore;
    use crate::nn::rng;

    #[test]
    fn masked_weights_are_exactly_zero() {
        let s = ParamStore::cpu(3, DType::F64);
        let attn = Attention::new(&s.builder("a"), 8, 8, 8, 8, 2).unwrap();
        let x = rng::randn(&mut rng::seeded(0), &[5, 8], DType::F64, &Device::Cpu).unwrap();
        let mask = mask_from_fn(5, 5, DType::F64, &Device::Cpu, |i, j| j <= i).unwrap();
        let (_, w) = attn.forward_with_weights(&x, &x, Some(&mask)).unwrap();
        let w = to_f64_vec(&w).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let row = &w[h * 25 + i * 5..h * 25 + i * 5 + 5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, v) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_key_returns_value_projection() {
        let s = ParamStore::cpu(4, DType::F64);
        let attn = Attention::new(&s.builder("a"), 6, 4, 8, 6, 2).unwrap();
        let q = rng::randn(&mut rng::seeded(1), &[3, 6], DType::F64, &Device::Cpu).unwrap();
        let kv = rng::randn(&mut rng::seeded(2), &[1, 4], DType::F64, &Device::Cpu).unwrap();
        let out = attn.forward(&q, &kv, None).unwrap();
        let expect = attn.o.forward(&attn.v.forward(&kv).unwrap()).unwrap();
        for row in out.to_vec2::<f64>().unwrap() {
            for (a, b) in row.iter().zip(expect.to_vec2::<f64>().unwrap()[0].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
