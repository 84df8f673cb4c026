use candle_core::{Tensor, D};

use super::params::{Init, Param, ParamBuilder};
use crate::Result;

/// Dense 3D convolution, kernel 3, padding 1, over channel-last grids
/// `[X, Y, Z, C]`. Lowered to a gather (im2col) plus one matmul.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Param,
    bias: Param,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
}

const K: usize = 3;

impl Conv3d {
    pub fn new(pb: &ParamBuilder, in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        let fan_in = in_channels * K * K * K;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: pb.get(&[out_channels, fan_in], "weight", Init::Uniform(bound))?,
            bias: pb.get(&[out_channels], "bias", Init::Zeros)?,
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 - K) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (sx, sy, sz, c) = x.dims4()?;
        debug_assert_eq!(c, self.in_channels);
        let padded = x
            .pad_with_zeros(0, 1, 1)?
            .pad_with_zeros(1, 1, 1)?
            .pad_with_zeros(2, 1, 1)?;
        let (px, py, pz) = (sx + 2, sy + 2, sz + 2);
        let flat = padded.reshape((px * py * pz, c))?;
        let (ox, oy, oz) = (self.out_size(sx), self.out_size(sy), self.out_size(sz));
        let mut idx = Vec::with_capacity(ox * oy * oz * K * K * K);
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    for a in 0..K {
                        for b in 0..K {
                            for e in 0..K {
                                let (u, v, w) = (i * self.stride + a, j * self.stride + b, k * self.stride + e);
                                idx.push(((u * py + v) * pz + w) as u32);
                            }
                        }
                    }
                }
            }
        }
        let n_out = ox * oy * oz;
        let idx = Tensor::from_vec(idx, n_out * K * K * K, x.device())?;
        let cols = flat.index_select(&idx, 0)?.reshape((n_out, K * K * K * c))?;
        let y = cols
            .matmul(&self.weight.t().t()?)?
            .broadcast_add(&self.bias.t())?;
        Ok(y.reshape((ox, oy, oz, self.out_channels))?)
    }
}

/// Same convolution written as explicit loops; test oracle.
#[cfg(test)]
pub(crate) fn conv3d_reference(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    w: &[f64],
    b: &[f64],
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    let (sx, sy, sz, c) = dims;
    let o = |n: usize| (n + 2 - K) / stride + 1;
    let (ox, oy, oz) = (o(sx), o(sy), o(sz));
    let mut out = vec![0.0; ox * oy * oz * cout];
    for i in 0..ox {
        for j in 0..oy {
            for k in 0..oz {
                for co in 0..cout {
                    let mut acc = b[co];
                    for a in 0..K {
                        for bb in 0..K {
                            for e in 0..K {
                                let (u, v, ww) = (
                                    (i * stride + a) as isize - 1,
                                    (j * stride + bb) as isize - 1,
                                    (k * stride + e) as isize - 1,
                                );
                                if u < 0 || v < 0 || ww < 0 || u >= sx as isize || v >= sy as isize || ww >= sz as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xi = (((u as usize * sy) + v as usize) * sz + ww as usize) * c + ci;
                                    let wi = co * K * K * K * c + ((a * K + bb) * K + e) * c + ci;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((i * oy + j) * oz + k) * cout + co] = acc;
                }
            }
        }
    }
    out
}

/// Mean over all axes but the last.
pub fn mean_tokens(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    Ok(x.reshape(((), c))?.mean(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::to_f64_vec;
    use crate::nn::params::ParamStore;
    use crate::nn::rng;
    use candle_core::{DType, Device};

    #[test]
    fn matches_loop_reference() {
        let s = ParamStore::cpu(5, DType::F64);
        let conv = Conv3d::new(&s.builder("c"), 3, 4, 2).unwrap();
        s.with_prefix("c.bias")[0]
            .var()
            .set(&Tensor::new(&[0.1f64, -0.2, 0.3, 0.0], &Device::Cpu).unwrap())
            .unwrap();
        let x = rng::randn(&mut rng::seeded(9), &[5, 4, 6, 3], DType::F64, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[3, 2, 3, 4]);
        let w = to_f64_vec(&s.with_prefix("c.weight")[0].t()).unwrap();
        let b = to_f64_vec(&s.with_prefix("c.bias")[0].t()).unwrap();
        let r = conv3d_reference(&to_f64_vec(&x).unwrap(), (5, 4, 6, 3), &w, &b, 4, 2);
        for (a, e) in to_f64_vec(&y).unwrap().iter().zip(r.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
