use candle_core::{Tensor, D};

use super::scene::Gaussian4DScene;
use crate::nn::layers::to_f64_vec;
use crate::{ensure_config, Error, Result};

fn pairwise_sq(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    Ok(p.unsqueeze(1)?
        .broadcast_sub(&q.unsqueeze(0)?)?
        .sqr()?
        .sum(D::Minus1)?)
}

/// Symmetric squared Chamfer distance between `[Np, 3]` and `[Nq, 3]`.
pub fn chamfer(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    ensure_config!(p.dim(0)? > 0 && q.dim(0)? > 0, "chamfer needs two non-empty clouds");
    let d2 = pairwise_sq(p, q)?;
    Ok((d2.min(1)?.mean(0)? + d2.min(0)?.mean(0)?)?)
}

/// For each row of `p`, the index of its nearest row in `q`.
pub fn nearest_indices(p: &Tensor, q: &Tensor) -> Result<Vec<u32>> {
    Ok(pairwise_sq(&p.detach(), &q.detach())?.argmin(1)?.to_vec1::<u32>()?)
}

fn points(t: &Tensor) -> Result<Vec<[f64; 3]>> {
    Ok(to_f64_vec(t)?.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn within_fraction(a: &[[f64; 3]], b: &[[f64; 3]], tau2: f64) -> f64 {
    let hits = a
        .iter()
        .filter(|p| {
            b.iter()
                .any(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2) <= tau2)
        })
        .count();
    hits as f64 / a.len() as f64
}

/// F-score at distance threshold `tau`: harmonic mean of the fraction of
/// `p` within `tau` of `q` and vice versa.
pub fn f_score(p: &Tensor, q: &Tensor, tau: f64) -> Result<f64> {
    ensure_config!(tau > 0.0, "f-score threshold must be positive, got {tau}");
    let (p, q) = (points(p)?, points(q)?);
    ensure_config!(!p.is_empty() && !q.is_empty(), "f-score needs two non-empty clouds");
    let precision = within_fraction(&p, &q, tau * tau);
    let recall = within_fraction(&q, &p, tau * tau);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Sum over sorted `times` of the squared change in per-step displacement,
/// squared norms taken over axes and averaged over Gaussians.
pub fn temporal_smoothness(scene: &Gaussian4DScene, times: &[f64]) -> Result<Tensor> {
    ensure_config!(times.len() >= 3, "temporal smoothness needs at least 3 times, got {}", times.len());
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("temporal smoothness times must be sorted"));
    }
    let pos: Vec<Tensor> = times.iter().map(|&t| scene.positions_at(t)).collect::<Result<_>>()?;
    let deltas: Vec<Tensor> = pos.windows(2).map(|w| Ok((&w[1] - &w[0])?)).collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(deltas.len() - 1);
    for w in deltas.windows(2) {
        terms.push((&w[1] - &w[0])?.sqr()?.sum(1)?.mean(0)?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::scalar;
    use crate::nn::rng;
    use candle_core::{DType, Device};

    fn brute_chamfer(p: &[[f64; 3]], q: &[[f64; 3]]) -> f64 {
        let d = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
        let mut s1 = 0.0;
        for a in p {
            let mut best = f64::INFINITY;
            for b in q {
                best = best.min(d(a, b));
            }
            s1 += best;
        }
        let mut s2 = 0.0;
        for b in q {
            let mut best = f64::INFINITY;
            for a in p {
                best = best.min(d(a, b));
            }
            s2 += best;
        }
        s1 / p.len() as f64 + s2 / q.len() as f64
    }

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric() {
        let mut r = rng::seeded(11);
        for _ in 0..5 {
            let p = rng::randn(&mut r, &[16, 3], DType::F64, &Device::Cpu).unwrap();
            let q = rng::randn(&mut r, &[16, 3], DType::F64, &Device::Cpu).unwrap();
            let c = scalar(&chamfer(&p, &q).unwrap()).unwrap();
            let b = brute_chamfer(&points(&p).unwrap(), &points(&q).unwrap());
            assert!((c - b).abs() < 1e-9);
            let c2 = scalar(&chamfer(&q, &p).unwrap()).unwrap();
            assert!((c - c2).abs() < 1e-12);
        }
    }

    #[test]
    fn chamfer_hand_cases() {
        let dev = Device::Cpu;
        let p = Tensor::new(&[[0.0f64, 0.0, 0.0]], &dev).unwrap();
        let q = Tensor::new(&[[1.0f64, 0.0, 0.0]], &dev).unwrap();
        assert_eq!(scalar(&chamfer(&p, &q).unwrap()).unwrap(), 2.0);
        assert_eq!(scalar(&chamfer(&p, &p).unwrap()).unwrap(), 0.0);
        let empty = Tensor::zeros((0, 3), DType::F64, &dev).unwrap();
        assert!(matches!(chamfer(&empty, &p), Err(Error::Config(_))));
    }

    #[test]
    fn f_score_cases() {
        let dev = Device::Cpu;
        let p = Tensor::new(&[[0.0f64, 0.0, 0.0], [5.0, 0.0, 0.0]], &dev).unwrap();
        assert_eq!(f_score(&p, &p, 0.1).unwrap(), 1.0);
        let far = Tensor::new(&[[100.0f64, 0.0, 0.0]], &dev).unwrap();
        assert_eq!(f_score(&p, &far, 0.1).unwrap(), 0.0);
        // Half of p near q; all of q near p.
        let q = Tensor::new(&[[0.05f64, 0.0, 0.0]], &dev).unwrap();
        assert!((f_score(&p, &q, 0.1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(f_score(&p, &q, 0.0).is_err());
    }
}
