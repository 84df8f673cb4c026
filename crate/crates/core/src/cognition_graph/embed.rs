//! Sinusoidal positional (2D) and geometry (3D) embeddings.
//!
//! Each coordinate owns a contiguous block of `2·nf` components laid out as
//! `[sin(ω_0 x), cos(ω_0 x), sin(ω_1 x), cos(ω_1 x), ...]` with
//! `ω_k = π · 64^(k / nf)`.

use std::f64::consts::PI;

use candle_core::Tensor;

use crate::{Error, Result};

const MAX_FREQ_RATIO: f64 = 64.0;

pub fn frequencies(nf: usize) -> Vec<f64> {
    (0..nf).map(|k| PI * MAX_FREQ_RATIO.powf(k as f64 / nf as f64)).collect()
}

fn embed(coords: &[f64], dim: usize) -> Result<Vec<f64>> {
    let c = coords.len();
    if dim == 0 || dim % (2 * c) != 0 {
        return Err(Error::config(format!("embedding dim {dim} must be a positive multiple of {}", 2 * c)));
    }
    let freqs = frequencies(dim / (2 * c));
    let mut out = Vec::with_capacity(dim);
    for &x in coords {
        for &w in &freqs {
            out.push((w * x).sin());
            out.push((w * x).cos());
        }
    }
    Ok(out)
}

pub fn pe2d(x: f64, y: f64, dim: usize) -> Result<Vec<f64>> {
    embed(&[x, y], dim)
}

pub fn ge3d(x: f64, y: f64, z: f64, dim: usize) -> Result<Vec<f64>> {
    embed(&[x, y, z], dim)
}

/// Differentiable embedding of `[M, c]` coordinates into `[M, dim]`.
pub fn embed_tensor(coords: &Tensor, dim: usize) -> Result<Tensor> {
    let (m, c) = coords.dims2()?;
    if dim == 0 || dim % (2 * c) != 0 {
        return Err(Error::config(format!("embedding dim {dim} must be a positive multiple of {}", 2 * c)));
    }
    let nf = dim / (2 * c);
    let freqs = Tensor::from_vec(frequencies(nf), (1, 1, nf), coords.device())?.to_dtype(coords.dtype())?;
    let arg = coords.unsqueeze(2)?.broadcast_mul(&freqs)?;
    let both = Tensor::stack(&[arg.sin()?, arg.cos()?], 3)?;
    Ok(both.reshape((m, dim))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn zero_argument() {
        let v = pe2d(0.0, 0.0, 8).unwrap();
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let g = ge3d(0.0, 0.0, 0.0, 12).unwrap();
        for (i, x) in g.iter().enumerate() {
            assert_eq!(*x, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn direct_formula() {
        // dim 8: two frequencies per coordinate, π and π·8.
        let v = pe2d(0.3, 0.7, 8).unwrap();
        let w = [PI, PI * 8.0];
        let expect = [
            (w[0] * 0.3).sin(),
            (w[0] * 0.3).cos(),
            (w[1] * 0.3).sin(),
            (w[1] * 0.3).cos(),
            (w[0] * 0.7).sin(),
            (w[0] * 0.7).cos(),
            (w[1] * 0.7).sin(),
            (w[1] * 0.7).cos(),
        ];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // dim 6: one frequency per coordinate.
        let g = ge3d(0.1, -0.2, 0.4, 6).unwrap();
        let expect = [
            (PI * 0.1).sin(),
            (PI * 0.1).cos(),
            (-PI * 0.2).sin(),
            (-PI * 0.2).cos(),
            (PI * 0.4).sin(),
            (PI * 0.4).cos(),
        ];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn range_and_dims() {
        for &(x, y, z) in &[(0.3, 0.7, -2.0), (13.0, -5.5, 0.01)] {
            assert!(pe2d(x, y, 48).unwrap().iter().all(|v| v.abs() <= 1.0));
            assert!(ge3d(x, y, z, 48).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(matches!(pe2d(0.0, 0.0, 6), Err(Error::Config(_))));
        assert!(matches!(ge3d(0.0, 0.0, 0.0, 8), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_matches_scalar() {
        let pts = [[0.3, 0.7, 0.2], [0.9, 0.1, -0.4]];
        let t = Tensor::new(&pts, &Device::Cpu).unwrap();
        let e = embed_tensor(&t, 24).unwrap().to_vec2::<f64>().unwrap();
        let e2 = embed_tensor(&t.narrow(1, 0, 2).unwrap(), 24).unwrap().to_vec2::<f64>().unwrap();
        for (i, p) in pts.iter().enumerate() {
            for (a, b) in e[i].iter().zip(ge3d(p[0], p[1], p[2], 24).unwrap()) {
                assert!((a - b).abs() < 1e-15);
            }
            let want = pe2d(p[0], p[1], 24).unwrap();
            for (a, b) in e2[i].iter().zip(want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let f = embed_tensor(&t.to_dtype(DType::F32).unwrap(), 12).unwrap();
        assert_eq!(f.dtype(), DType::F32);
    }
}
