use candle_core::{DType, Device, Tensor};

use crate::nn::layers::{to_f64_vec, all_finite};
use crate::{ensure_config, Error, Result};

/// Explicit deformable Gaussian scene.
///
/// `deform` holds per-axis polynomial coefficients: entry `[k, a, d]`
/// multiplies `t^(d+1)`, so the constant term is the canonical position.
#[derive(Debug, Clone)]
pub struct Gaussian4DScene {
    /// `[K, 3]`
    pub positions: Tensor,
    /// `[K, 3]`, strictly positive.
    pub scales: Tensor,
    /// `[K, 4]` unit quaternions `(w, x, y, z)`.
    pub rotations: Tensor,
    /// `[K]` in `(0, 1)`.
    pub opacities: Tensor,
    /// `[K, 3]` in `[0, 1]`.
    pub colors: Tensor,
    /// `[K, 3, D]`.
    pub deform: Tensor,
}

impl Gaussian4DScene {
    pub fn len(&self) -> usize {
        self.positions.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn degree(&self) -> usize {
        self.deform.dims()[2]
    }

    pub fn dtype(&self) -> DType {
        self.positions.dtype()
    }

    pub fn device(&self) -> &Device {
        self.positions.device()
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            positions: f(&self.positions)?,
            scales: f(&self.scales)?,
            rotations: f(&self.rotations)?,
            opacities: f(&self.opacities)?,
            colors: f(&self.colors)?,
            deform: f(&self.deform)?,
        })
    }

    pub fn detach(&self) -> Self {
        self.map(|t| Ok(t.detach())).expect("detach is infallible")
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        self.map(|t| Ok(t.to_dtype(dtype)?))
    }

    /// Deformed centers `μ + Σ_d C[:,:,d] t^d`.
    pub fn positions_at(&self, t: f64) -> Result<Tensor> {
        let degree = self.degree();
        if degree == 0 || t == 0.0 {
            return Ok(self.positions.clone());
        }
        let powers: Vec<f64> = (1..=degree).map(|d| t.powi(d as i32)).collect();
        let powers = Tensor::from_vec(powers, (degree, 1), self.device())?.to_dtype(self.dtype())?;
        let k = self.len();
        let offset = self
            .deform
            .reshape((k * 3, degree))?
            .matmul(&powers)?
            .reshape((k, 3))?;
        Ok((&self.positions + offset)?)
    }

    /// Checks shapes and the attribute range invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        ensure_config!(k >= 1, "scene has no Gaussians");
        let d = self.degree();
        let expect = [
            ("positions", &self.positions, vec![k, 3]),
            ("scales", &self.scales, vec![k, 3]),
            ("rotations", &self.rotations, vec![k, 4]),
            ("opacities", &self.opacities, vec![k]),
            ("colors", &self.colors, vec![k, 3]),
            ("deform", &self.deform, vec![k, 3, d]),
        ];
        for (name, t, shape) in expect.iter() {
            if t.dims() != shape.as_slice() {
                return Err(Error::config(format!("{name} has shape {:?}, expected {:?}", t.dims(), shape)));
            }
            if !all_finite(t)? {
                return Err(Error::Numerical(format!("{name} contains non-finite values")));
            }
        }
        let tol: f64 = if self.dtype() == DType::F64 { 1e-9 } else { 1e-5 };
        let q = to_f64_vec(&self.rotations)?;
        for (i, row) in q.chunks(4).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure_config!((n - 1.0).abs() <= tol.max(1e-5), "rotation {i} has norm {n}");
        }
        ensure_config!(
            to_f64_vec(&self.scales)?.iter().all(|&s| s > 0.0),
            "scales must be strictly positive"
        );
        ensure_config!(
            to_f64_vec(&self.opacities)?.iter().all(|&o| o > 0.0 && o < 1.0),
            "opacities must lie in (0, 1)"
        );
        ensure_config!(
            to_f64_vec(&self.colors)?.iter().all(|&c| (0.0..=1.0).contains(&c)),
            "colors must lie in [0, 1]"
        );
        Ok(())
    }

    pub fn positions_host(&self) -> Result<Vec<[f64; 3]>> {
        Ok(to_f64_vec(&self.positions)?
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }
}

/// Pinhole camera. `rotation` maps world to camera axes: x right, y down,
/// z forward.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
    pub focal: f64,
    pub height: usize,
    pub width: usize,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// appears towards the top of the image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, height: usize, width: usize) -> Self {
        let fwd = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let right = normalize(cross(fwd, up));
        let down = cross(fwd, right);
        Self {
            position: eye,
            rotation: [right, down, fwd],
            focal,
            height,
            width,
        }
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.focal > 0.0, "focal must be positive");
        ensure_config!(self.height > 0 && self.width > 0, "resolution must be positive");
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                ensure_config!((dot - expect).abs() <= 1e-5, "camera rotation is not orthonormal");
            }
        }
        Ok(())
    }

    /// Projects world points `[K, 3]` to pixel coordinates `[K, 2]`
    /// (column, row) and camera depth `[K]`.
    pub fn project(&self, points: &Tensor) -> Result<(Tensor, Tensor)> {
        let dtype = points.dtype();
        let dev = points.device();
        let pos = Tensor::new(&self.position, dev)?.to_dtype(dtype)?;
        let rot_t: Vec<f64> = (0..3)
            .flat_map(|k| (0..3).map(move |i| (k, i)))
            .map(|(k, i)| self.rotation[i][k])
            .collect();
        let rot_t = Tensor::from_vec(rot_t, (3, 3), dev)?.to_dtype(dtype)?;
        let pc = points.broadcast_sub(&pos)?.matmul(&rot_t)?;
        let depth = pc.narrow(1, 2, 1)?;
        let (cx, cy) = self.principal_point();
        let centre = Tensor::new(&[cx, cy], dev)?.to_dtype(dtype)?;
        let uv = (pc.narrow(1, 0, 2)?.broadcast_div(&depth)? * self.focal)?.broadcast_add(&centre)?;
        Ok((uv.contiguous()?, depth.squeeze(1)?.contiguous()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(deform: Tensor) -> Gaussian4DScene {
        let dev = Device::Cpu;
        let k = deform.dims()[0];
        Gaussian4DScene {
            positions: Tensor::zeros((k, 3), DType::F64, &dev).unwrap(),
            scales: Tensor::ones((k, 3), DType::F64, &dev).unwrap(),
            rotations: Tensor::new(&[[1.0f64, 0.0, 0.0, 0.0]], &dev).unwrap().repeat((k, 1)).unwrap(),
            opacities: (Tensor::ones(k, DType::F64, &dev).unwrap() * 0.5).unwrap(),
            colors: Tensor::ones((k, 3), DType::F64, &dev).unwrap(),
            deform,
        }
    }

    #[test]
    fn positions_at_zero_is_canonical() {
        let dev = Device::Cpu;
        let deform = Tensor::new(&[[[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]]], &dev).unwrap();
        let s = scene_with(deform);
        let p = s.positions_at(0.0).unwrap();
        assert_eq!(p.to_vec2::<f64>().unwrap(), vec![vec![0.0; 3]]);
    }

    #[test]
    fn positions_at_hand_case() {
        // x: c1=1, y: c2=2, z: both zero; at t=0.5 offsets are 0.5 and 0.5.
        let dev = Device::Cpu;
        let deform = Tensor::new(&[[[1.0f64, 0.0], [0.0, 2.0], [0.0, 0.0]]], &dev).unwrap();
        let s = scene_with(deform);
        let p = s.positions_at(0.5).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0], vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn projection_hand_case() {
        // Camera at the origin looking down +z with identity rotation.
        let cam = Camera {
            position: [0.0, 0.0, 0.0],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            focal: 10.0,
            height: 20,
            width: 30,
        };
        let pts = Tensor::new(&[[0.0f64, 0.0, 1.0], [1.0, -2.0, 4.0]], &Device::Cpu).unwrap();
        let (uv, depth) = cam.project(&pts).unwrap();
        let uv = uv.to_vec2::<f64>().unwrap();
        assert_eq!(uv[0], vec![15.0, 10.0]);
        // u = 10 * 1/4 + 15, v = 10 * -2/4 + 10
        assert_eq!(uv[1], vec![17.5, 5.0]);
        assert_eq!(depth.to_vec1::<f64>().unwrap(), vec![1.0, 4.0]);

        let cam2 = Camera { focal: 20.0, ..cam };
        let uv2 = cam2.project(&pts).unwrap().0.to_vec2::<f64>().unwrap();
        assert_eq!(uv2[1][0] - 15.0, 2.0 * (uv[1][0] - 15.0));
        assert_eq!(uv2[1][1] - 10.0, 2.0 * (uv[1][1] - 10.0));
    }

    #[test]
    fn look_at_is_orthonormal() {
        let cam = Camera::look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 64.0, 64, 64);
        cam.validate().unwrap();
        let pts = Tensor::new(&[[0.0f64, 0.0, 0.0]], &Device::Cpu).unwrap();
        let (uv, depth) = cam.project(&pts).unwrap();
        let uv = uv.to_vec2::<f64>().unwrap();
        assert!((uv[0][0] - 32.0).abs() < 1e-9 && (uv[0][1] - 32.0).abs() < 1e-9);
        assert!((depth.to_vec1::<f64>().unwrap()[0] - 14f64.sqrt()).abs() < 1e-9);
    }
}
