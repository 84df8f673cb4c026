use candle_core::{Tensor, D};

use super::params::{Init, Param, ParamBuilder};
use crate::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_bias(pb, in_dim, out_dim, true)
    }

    pub fn no_bias(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_bias(pb, in_dim, out_dim, false)
    }

    pub fn with_bias(pb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?;
        let bias = if bias {
            Some(pb.get(&[out_dim], "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies `x W^T + b` over the last axis of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t();
        let dims = x.dims().to_vec();
        let last = *dims.last().expect("linear input must have rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, last))?.matmul(&w.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.t())?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Normalizes the last axis to zero mean and unit (biased) variance.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Param,
    bias: Param,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[dim], "weight", Init::Ones)?,
            bias: pb.get(&[dim], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x, LN_EPS)?
            .broadcast_mul(&self.weight.t())?
            .broadcast_add(&self.bias.t())?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + e^x)` computed as `relu(x) + log(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Softmax over the last axis. The row max is subtracted as a constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, out_dim)?,
        })
    }

    pub fn no_bias(pb: &ParamBuilder, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::no_bias(&pb.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::no_bias(&pb.pp("fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Scalar read of a rank-0 (or single-element) tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = (a - b)?.abs()?.flatten_all()?.max(0)?;
    scalar(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [10.0, -3.0, 0.5, 7.0]], &Device::Cpu).unwrap();
        let y = layer_norm(&x, 0.0).unwrap();
        for row in y.to_vec2::<f64>().unwrap() {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        let x = Tensor::new(&[-200.0f32, -1.0, 0.0, 1.0, 200.0], &Device::Cpu).unwrap();
        let sp = to_f64_vec(&softplus(&x).unwrap()).unwrap();
        assert!(sp.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((sp[2] - 2f64.ln()).abs() < 1e-6);
        assert!((sp[4] - 200.0).abs() < 1e-3);
        let sg = to_f64_vec(&sigmoid(&x).unwrap()).unwrap();
        assert!((sg[2] - 0.5).abs() < 1e-7);
        assert!(sg.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn linear_handles_rank3_inputs() {
        let s = ParamStore::cpu(1, DType::F64);
        let lin = Linear::new(&s.builder("l"), 4, 3).unwrap();
        let x = Tensor::ones((2, 5, 4), DType::F64, &Device::Cpu).unwrap();
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 5, 3]);
        let flat = lin.forward(&x.reshape((10, 4)).unwrap()).unwrap();
        assert_eq!(max_abs_diff(&y.reshape((10, 3)).unwrap(), &flat).unwrap(), 0.0);
    }
}
