//! Procedural ground truth: seeded deformable Gaussian scenes, camera rigs,
//! rendered prompt sequences and templated captions.

pub mod io;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gaussians4d::{render, Camera, Gaussian4DScene};
use crate::nn::rng;
use crate::{ensure_config, Error, Result};

pub use io::{load_scene, save_scene, SCENE_EXTENSION};

/// Number of uniformly spaced times used to fit motion programs.
pub const FIT_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Static,
    LinearDrift,
    CircularOrbit,
    SinusoidalBob,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [
        MotionFamily::Static,
        MotionFamily::LinearDrift,
        MotionFamily::CircularOrbit,
        MotionFamily::SinusoidalBob,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MotionFamily::Static => "static",
            MotionFamily::LinearDrift => "linear_drift",
            MotionFamily::CircularOrbit => "circular_orbit",
            MotionFamily::SinusoidalBob => "sinusoidal_bob",
        }
    }

    fn phrase(&self) -> &'static str {
        match self {
            MotionFamily::Static => "static",
            MotionFamily::LinearDrift => "linear drift",
            MotionFamily::CircularOrbit => "circular orbit",
            MotionFamily::SinusoidalBob => "sinusoidal bob",
        }
    }
}

impl fmt::Display for MotionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MotionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionFamily::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown motion family `{s}`")))
    }
}

/// Seeded attribute ranges. Scale ranges are fractions of `bounds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeRanges {
    pub color: (f64, f64),
    pub color_jitter: f64,
    pub scale: (f64, f64),
    pub opacity: (f64, f64),
    pub object_radius: (f64, f64),
}

impl Default for AttributeRanges {
    fn default() -> Self {
        Self {
            color: (0.25, 1.0),
            color_jitter: 0.08,
            scale: (0.05, 0.1),
            opacity: (0.6, 0.95),
            object_radius: (0.12, 0.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub num_objects: usize,
    pub gaussians_per_object: usize,
    pub motion_family: MotionFamily,
    /// Half-extent of the world cube.
    pub bounds: f64,
    pub num_frames: usize,
    pub num_views: usize,
    /// Polynomial deformation degree D.
    pub degree: usize,
    pub image_size: usize,
    pub ranges: AttributeRanges,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_objects: 2,
            gaussians_per_object: 32,
            motion_family: MotionFamily::LinearDrift,
            bounds: 1.0,
            num_frames: 8,
            num_views: 4,
            degree: 2,
            image_size: 64,
            ranges: AttributeRanges::default(),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.num_objects >= 1, "num_objects must be >= 1");
        ensure_config!(self.gaussians_per_object >= 1, "gaussians_per_object must be >= 1");
        ensure_config!(self.bounds > 0.0, "bounds must be positive");
        ensure_config!(self.num_frames >= 1, "num_frames must be >= 1");
        ensure_config!(self.num_views >= 1, "num_views must be >= 1");
        ensure_config!(self.image_size >= 1, "image_size must be >= 1");
        if self.motion_family == MotionFamily::CircularOrbit || self.motion_family == MotionFamily::SinusoidalBob {
            ensure_config!(self.degree >= 1, "{} motion needs degree >= 1", self.motion_family);
        }
        if self.motion_family == MotionFamily::LinearDrift {
            ensure_config!(self.degree >= 1, "linear drift needs degree >= 1");
        }
        Ok(())
    }

    pub fn num_gaussians(&self) -> usize {
        self.num_objects * self.gaussians_per_object
    }
}

/// Least-squares fit of `offset(t) ≈ Σ_{d=1..D} c_d t^d` over
/// [`FIT_SAMPLES`] uniform times on `[0, 1]`.
pub fn fit_polynomial(degree: usize, offset: impl Fn(f64) -> f64) -> Vec<f64> {
    if degree == 0 {
        return Vec::new();
    }
    let times: Vec<f64> = (0..FIT_SAMPLES).map(|i| i as f64 / (FIT_SAMPLES - 1) as f64).collect();
    let basis = DMatrix::from_fn(FIT_SAMPLES, degree, |i, d| times[i].powi(d as i32 + 1));
    let y = DVector::from_iterator(FIT_SAMPLES, times.iter().map(|&t| offset(t)));
    let svd = basis.svd(true, true);
    let c = svd.solve(&y, 1e-12).expect("SVD with both factors computed");
    c.iter().copied().collect()
}

fn motion_coefficients(spec: &SyntheticSceneSpec, r: &mut impl Rng) -> [Vec<f64>; 3] {
    let b = spec.bounds;
    let d = spec.degree;
    let zeros = || vec![0.0; d];
    match spec.motion_family {
        MotionFamily::Static => [zeros(), zeros(), zeros()],
        MotionFamily::LinearDrift => {
            let dir = rng::normal_vec(r, 3);
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let speed = r.random_range(0.2 * b..0.5 * b);
            let mut out = [zeros(), zeros(), zeros()];
            for a in 0..3 {
                out[a][0] = speed * dir[a] / n;
            }
            out
        }
        MotionFamily::CircularOrbit => {
            let radius = r.random_range(0.15 * b..0.35 * b);
            let phase = r.random_range(0.0..2.0 * PI);
            [
                fit_polynomial(d, |t| radius * ((2.0 * PI * t + phase).cos() - phase.cos())),
                zeros(),
                fit_polynomial(d, |t| radius * ((2.0 * PI * t + phase).sin() - phase.sin())),
            ]
        }
        MotionFamily::SinusoidalBob => {
            let amp = r.random_range(0.1 * b..0.3 * b);
            [zeros(), fit_polynomial(d, |t| amp * (2.0 * PI * t).sin()), zeros()]
        }
    }
}

/// Generates the scene described by `spec`. Pure in `spec`.
pub fn synth_scene(spec: &SyntheticSceneSpec) -> Result<Gaussian4DScene> {
    spec.validate()?;
    let mut r = rng::derive(spec.seed, "scene_synth");
    let b = spec.bounds;
    let rg = spec.ranges;
    let k = spec.num_gaussians();
    let d = spec.degree;
    let (mut pos, mut scl, mut rot, mut opa, mut col, mut def) = (
        Vec::with_capacity(k * 3),
        Vec::with_capacity(k * 3),
        Vec::with_capacity(k * 4),
        Vec::with_capacity(k),
        Vec::with_capacity(k * 3),
        Vec::with_capacity(k * 3 * d),
    );
    for _ in 0..spec.num_objects {
        let centre: Vec<f64> = (0..3).map(|_| r.random_range(-0.5 * b..0.5 * b)).collect();
        let radius = r.random_range(rg.object_radius.0 * b..rg.object_radius.1 * b);
        let base: Vec<f64> = (0..3).map(|_| r.random_range(rg.color.0..rg.color.1)).collect();
        let motion = motion_coefficients(spec, &mut r);
        for _ in 0..spec.gaussians_per_object {
            let offset = loop {
                let o: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                if o.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break o;
                }
            };
            for a in 0..3 {
                pos.push((centre[a] + radius * offset[a]).clamp(-b, b));
            }
            for _ in 0..3 {
                scl.push(r.random_range(rg.scale.0 * b..rg.scale.1 * b));
            }
            let q = rng::normal_vec(&mut r, 4);
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            rot.extend(q.iter().map(|v| v / qn));
            opa.push(r.random_range(rg.opacity.0..rg.opacity.1));
            for a in 0..3 {
                let j = r.random_range(-rg.color_jitter..=rg.color_jitter);
                col.push((base[a] + j).clamp(0.0, 1.0));
            }
            for axis in &motion {
                def.extend_from_slice(axis);
            }
        }
    }
    let dev = Device::Cpu;
    let t = |v: Vec<f64>, shape: &[usize]| rng::from_f64(v, shape, DType::F32, &dev);
    Ok(Gaussian4DScene {
        positions: t(pos, &[k, 3])?,
        scales: t(scl, &[k, 3])?,
        rotations: t(rot, &[k, 4])?,
        opacities: t(opa, &[k])?,
        colors: t(col, &[k, 3])?,
        deform: t(def, &[k, 3, d])?,
    })
}

fn number_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

/// Templated description, e.g. `"three objects, circular orbit"`.
pub fn caption(spec: &SyntheticSceneSpec) -> String {
    let noun = if spec.num_objects == 1 { "object" } else { "objects" };
    format!("{} {}, {}", number_word(spec.num_objects), noun, spec.motion_family.phrase())
}

/// `num_views` cameras on a ring of radius `3 * bounds`, slightly elevated,
/// all looking at the origin.
pub fn default_cameras(spec: &SyntheticSceneSpec) -> Vec<Camera> {
    ring_cameras(spec.num_views, spec.bounds, spec.image_size)
}

pub fn ring_cameras(views: usize, bounds: f64, size: usize) -> Vec<Camera> {
    let dist = 3.0 * bounds;
    let elev: f64 = 0.35;
    (0..views)
        .map(|v| {
            let az = 2.0 * PI * v as f64 / views as f64;
            let eye = [
                dist * elev.cos() * az.sin(),
                -dist * elev.sin(),
                -dist * elev.cos() * az.cos(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], 1.1 * size as f64, size, size)
        })
        .collect()
}

/// Normalized time of frame `f` in an `frames`-long sequence.
pub fn frame_time(f: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        f as f64 / (frames - 1) as f64
    }
}

/// Renders `[F, H, W, 3]`; frame `f` is seen by camera `f mod V`.
pub fn render_prompt_sequence(scene: &Gaussian4DScene, cameras: &[Camera], frames: usize) -> Result<Tensor> {
    ensure_config!(!cameras.is_empty(), "render_prompt_sequence needs at least one camera");
    ensure_config!(frames >= 1, "frames must be >= 1");
    let imgs = (0..frames)
        .map(|f| render(scene, &cameras[f % cameras.len()], frame_time(f, frames)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&imgs, 0)?)
}

/// Renders every camera at one time: `[V, H, W, 3]`.
pub fn render_views(scene: &Gaussian4DScene, cameras: &[Camera], t: f64) -> Result<Tensor> {
    ensure_config!(!cameras.is_empty(), "render_views needs at least one camera");
    let imgs = cameras.iter().map(|c| render(scene, c, t)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&imgs, 0)?)
}

#[derive(Debug, Clone)]
pub struct GroundTruthSample {
    pub spec: SyntheticSceneSpec,
    pub scene: Gaussian4DScene,
    pub caption: String,
    pub cameras: Vec<Camera>,
    /// Prompt sequence from the first camera, `[F, H, W, 3]`.
    pub frames: Tensor,
    /// All cameras at `t = 0`, `[V, H, W, 3]`.
    pub views: Tensor,
}

pub fn generate_sample(spec: &SyntheticSceneSpec) -> Result<GroundTruthSample> {
    let scene = synth_scene(spec)?;
    let cameras = default_cameras(spec);
    let frames = render_prompt_sequence(&scene, &cameras[..1], spec.num_frames)?;
    let views = render_views(&scene, &cameras, 0.0)?;
    Ok(GroundTruthSample {
        spec: spec.clone(),
        caption: caption(spec),
        scene,
        cameras,
        frames,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{max_abs_diff, to_f64_vec};

    fn spec(motion: MotionFamily) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            motion_family: motion,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn static_scene_has_zero_deformation() {
        let s = synth_scene(&spec(MotionFamily::Static)).unwrap();
        assert!(to_f64_vec(&s.deform).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_and_bounds() {
        let s = synth_scene(&spec(MotionFamily::CircularOrbit)).unwrap();
        assert_eq!(s.len(), 64);
        assert!(to_f64_vec(&s.positions).unwrap().iter().all(|v| v.abs() <= 1.0));
        s.validate().unwrap();
    }

    #[test]
    fn deterministic() {
        for m in MotionFamily::ALL {
            let a = synth_scene(&spec(m)).unwrap();
            let b = synth_scene(&spec(m)).unwrap();
            assert_eq!(to_f64_vec(&a.positions).unwrap(), to_f64_vec(&b.positions).unwrap());
            assert_eq!(to_f64_vec(&a.deform).unwrap(), to_f64_vec(&b.deform).unwrap());
            assert_eq!(to_f64_vec(&a.colors).unwrap(), to_f64_vec(&b.colors).unwrap());
        }
    }

    #[test]
    fn linear_drift_uses_only_first_order_terms() {
        let s = synth_scene(&spec(MotionFamily::LinearDrift)).unwrap();
        let d = to_f64_vec(&s.deform).unwrap();
        assert!(d.chunks(2).all(|c| c[1] == 0.0));
        assert!(d.chunks(2).any(|c| c[0] != 0.0));
    }

    #[test]
    fn deformed_positions_stay_in_double_cube() {
        for m in MotionFamily::ALL {
            for seed in 0..8 {
                let s = synth_scene(&SyntheticSceneSpec { seed, ..spec(m) }).unwrap();
                for i in 0..=64 {
                    let p = to_f64_vec(&s.positions_at(i as f64 / 64.0).unwrap()).unwrap();
                    assert!(p.iter().all(|v| v.abs() <= 2.0), "{m} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn polynomial_fit_recovers_polynomials() {
        let c = fit_polynomial(2, |t| 0.3 * t - 0.7 * t * t);
        assert!((c[0] - 0.3).abs() < 1e-10 && (c[1] + 0.7).abs() < 1e-10);
    }

    #[test]
    fn captions() {
        let one = SyntheticSceneSpec { num_objects: 1, ..spec(MotionFamily::Static) };
        assert_eq!(caption(&one), "one object, static");
        let three = SyntheticSceneSpec { num_objects: 3, ..spec(MotionFamily::CircularOrbit) };
        assert!(caption(&three).contains("circular"));
        assert_eq!(caption(&three), caption(&three.clone()));
    }

    #[test]
    fn motion_family_parsing() {
        assert_eq!("sinusoidal_bob".parse::<MotionFamily>().unwrap(), MotionFamily::SinusoidalBob);
        assert!(matches!("spiral".parse::<MotionFamily>(), Err(Error::Config(_))));
        assert!(serde_json::from_str::<SyntheticSceneSpec>(r#"{"motion_family":"spiral"}"#).is_err());
    }

    #[test]
    fn static_sequence_frames_match() {
        let sp = spec(MotionFamily::Static);
        let s = synth_scene(&sp).unwrap();
        let cams = default_cameras(&sp);
        let seq = render_prompt_sequence(&s, &cams[..1], 2).unwrap();
        assert_eq!(max_abs_diff(&seq.get(0).unwrap(), &seq.get(1).unwrap()).unwrap(), 0.0);
        let single = render_prompt_sequence(&s, &cams[..1], 1).unwrap();
        let canon = render(&s, &cams[0], 0.0).unwrap();
        assert_eq!(max_abs_diff(&single.get(0).unwrap(), &canon).unwrap(), 0.0);
        assert!(render_prompt_sequence(&s, &[], 2).is_err());
        let px = to_f64_vec(&seq).unwrap();
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn drift_along_x_moves_centroid_right() {
        // Single object drifting along +x seen by a camera whose right axis
        // is world +x.
        let sp = SyntheticSceneSpec { num_objects: 1, ..spec(MotionFamily::Static) };
        let mut s = synth_scene(&sp).unwrap();
        let k = s.len();
        let mut def = vec![0.0f64; k * 3 * 2];
        for i in 0..k {
            def[i * 6] = 0.5;
        }
        s.deform = rng::from_f64(def, &[k, 3, 2], DType::F32, &Device::Cpu).unwrap();
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 35.0, 32, 32);
        assert!(cam.rotation[0][0] > 0.99);
        let f = 6;
        let seq = render_prompt_sequence(&s, &[cam.clone()], f).unwrap();
        let mut prev = f64::MIN;
        for i in 0..f {
            // Ground-truth centroid column from projected positions.
            let (uv, _) = cam.project(&s.positions_at(frame_time(i, f)).unwrap()).unwrap();
            let cols: Vec<f64> = to_f64_vec(&uv.narrow(1, 0, 1).unwrap()).unwrap();
            let c = cols.iter().sum::<f64>() / cols.len() as f64;
            assert!(c >= prev);
            prev = c;
            // Rendered intensity-weighted column agrees in direction.
            let img = seq.get(i).unwrap().sum(2).unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
            let (mut m, mut w) = (0.0, 0.0);
            for row in &img {
                for (col, v) in row.iter().enumerate() {
                    m += col as f64 * v;
                    w += v;
                }
            }
            assert!(w > 0.0 && (m / w).is_finite());
        }
    }
}
