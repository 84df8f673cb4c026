//! Differentiable splatting with isotropic screen-space footprints and
//! exact per-pixel front-to-back compositing.

use candle_core::{Tensor, D};

use super::scene::{Camera, Gaussian4DScene};
use crate::nn::layers::to_f64_vec;
use crate::Result;

/// Gaussians closer than this to the image plane are culled.
pub const NEAR_PLANE: f64 = 1e-3;

fn pixel_grid(cam: &Camera, like: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(cam.height * cam.width * 2);
    for r in 0..cam.height {
        for c in 0..cam.width {
            data.push(c as f64);
            data.push(r as f64);
        }
    }
    Ok(Tensor::from_vec(data, (cam.height * cam.width, 2), like.device())?.to_dtype(like.dtype())?)
}

/// Visible Gaussians in ascending depth, ties broken by index.
pub fn depth_order(depth: &Tensor) -> Result<Vec<u32>> {
    let depth = to_f64_vec(depth)?;
    let mut idx: Vec<u32> = (0..depth.len() as u32)
        .filter(|&i| depth[i as usize] > NEAR_PLANE)
        .collect();
    idx.sort_by(|&a, &b| {
        depth[a as usize]
            .partial_cmp(&depth[b as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(idx)
}

/// Per-pixel compositing weights `α_i Π_{j<i}(1-α_j)` for the depth-sorted
/// visible set: `[H*W, Kv]`, plus the sorted index list.
pub fn composite_weights(scene: &Gaussian4DScene, cam: &Camera, t: f64) -> Result<Option<(Tensor, Tensor)>> {
    let pos = scene.positions_at(t)?;
    let (uv, depth) = cam.project(&pos)?;
    let order = depth_order(&depth)?;
    if order.is_empty() {
        return Ok(None);
    }
    let kv = order.len();
    let idx = Tensor::from_vec(order, kv, pos.device())?;
    let uv = uv.index_select(&idx, 0)?;
    let depth = depth.index_select(&idx, 0)?;
    let mean_scale = scene.scales.index_select(&idx, 0)?.mean(1)?;
    let radius = (mean_scale.div(&depth)? * cam.focal)?;
    let two_r2 = (radius.sqr()? * 2.0)?.unsqueeze(0)?;

    let pix = pixel_grid(cam, &pos)?;
    let d2 = pix
        .unsqueeze(1)?
        .broadcast_sub(&uv.unsqueeze(0)?)?
        .sqr()?
        .sum(D::Minus1)?;
    let footprint = d2.broadcast_div(&two_r2)?.neg()?.exp()?;
    let opacity = scene.opacities.index_select(&idx, 0)?.unsqueeze(0)?;
    let alpha = footprint.broadcast_mul(&opacity)?;

    // Exclusive prefix sum of log-transmittance via a strictly upper
    // triangular matmul.
    let log_t = alpha.affine(-1.0, 1.0)?.maximum(1e-12)?.log()?;
    let mut tri = vec![0.0f64; kv * kv];
    for j in 0..kv {
        for i in (j + 1)..kv {
            tri[j * kv + i] = 1.0;
        }
    }
    let tri = Tensor::from_vec(tri, (kv, kv), pos.device())?.to_dtype(pos.dtype())?;
    let transmittance = log_t.matmul(&tri)?.exp()?;
    Ok(Some(((alpha * transmittance)?, idx)))
}

/// Renders `[H, W, 3]` at normalized time `t` on a black background.
pub fn render(scene: &Gaussian4DScene, cam: &Camera, t: f64) -> Result<Tensor> {
    match composite_weights(scene, cam, t)? {
        None => Ok(Tensor::zeros((cam.height, cam.width, 3), scene.dtype(), scene.device())?),
        Some((w, idx)) => {
            let colors = scene.colors.index_select(&idx, 0)?;
            Ok(w.matmul(&colors)?.reshape((cam.height, cam.width, 3))?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::max_abs_diff;
    use candle_core::{DType, Device};

    fn cam16() -> Camera {
        Camera::look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 16.0, 16, 16)
    }

    fn scene(pos: &[[f64; 3]], opac: &[f64], colors: &[[f64; 3]], scale: f64) -> Gaussian4DScene {
        let dev = Device::Cpu;
        let k = pos.len();
        Gaussian4DScene {
            positions: Tensor::new(pos.concat(), &dev).unwrap().reshape((k, 3)).unwrap(),
            scales: (Tensor::ones((k, 3), DType::F64, &dev).unwrap() * scale).unwrap(),
            rotations: Tensor::new(&[[1.0f64, 0.0, 0.0, 0.0]], &dev).unwrap().repeat((k, 1)).unwrap(),
            opacities: Tensor::new(opac, &dev).unwrap(),
            colors: Tensor::new(colors.concat(), &dev).unwrap().reshape((k, 3)).unwrap(),
            deform: Tensor::zeros((k, 3, 2), DType::F64, &dev).unwrap(),
        }
    }

    #[test]
    fn nothing_visible_renders_black() {
        let s = scene(&[[0.0, 0.0, -5.0]], &[0.9], &[[1.0, 1.0, 1.0]], 0.2);
        let img = render(&s, &cam16(), 0.0).unwrap();
        assert_eq!(img.dims(), &[16, 16, 3]);
        assert_eq!(img.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn centred_gaussian_peaks_at_image_centre() {
        let s = scene(&[[0.0, 0.0, 0.0]], &[0.99], &[[0.2, 0.6, 0.9]], 0.3);
        let img = render(&s, &cam16(), 0.0).unwrap();
        let lum = img.sum(2).unwrap().to_vec2::<f64>().unwrap();
        let mut best = (0, 0, f64::MIN);
        for (r, row) in lum.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if *v > best.2 {
                    best = (r, c, *v);
                }
            }
        }
        assert_eq!((best.0, best.1), (8, 8));
        let px = img.get(8).unwrap().get(8).unwrap().to_vec1::<f64>().unwrap();
        for (p, c) in px.iter().zip([0.2, 0.6, 0.9]) {
            assert!((p - 0.99 * c).abs() < 1e-9);
        }
    }

    #[test]
    fn opaque_near_gaussian_occludes_far_one() {
        let s = scene(
            &[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]],
            &[0.5, 1.0 - 1e-9],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            0.3,
        );
        let img = render(&s, &cam16(), 0.0).unwrap();
        let px = img.get(8).unwrap().get(8).unwrap().to_vec1::<f64>().unwrap();
        assert!((px[0] - 0.0).abs() < 1e-3);
        assert!((px[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn weights_never_exceed_unity() {
        let s = scene(
            &[[0.0, 0.0, 0.0], [0.1, 0.0, 0.5], [-0.2, 0.1, -0.5], [0.0, 0.3, 0.2]],
            &[0.9, 0.95, 0.8, 0.99],
            &[[1.0; 3]; 4],
            0.4,
        );
        let (w, _) = composite_weights(&s, &cam16(), 0.0).unwrap().unwrap();
        for row in w.to_vec2::<f64>().unwrap() {
            assert!(row.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn static_scene_is_time_invariant() {
        let s = scene(&[[0.1, 0.0, 0.0]], &[0.8], &[[1.0, 0.5, 0.0]], 0.3);
        let a = render(&s, &cam16(), 0.0).unwrap();
        let b = render(&s, &cam16(), 1.0).unwrap();
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
    }
}
