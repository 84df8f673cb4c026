//! `.st4d.json` scene files: a versioned JSON manifest of row-major nested
//! lists with 32-bit float values.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::gaussians4d::Gaussian4DScene;
use crate::nn::layers::to_f64_vec;
use crate::{Error, Result};

pub const SCENE_EXTENSION: &str = ".st4d.json";
pub const SCENE_VERSION: u64 = 1;

fn rows<const N: usize>(t: &Tensor) -> Result<Vec<[f32; N]>> {
    Ok(to_f64_vec(t)?
        .chunks(N)
        .map(|c| std::array::from_fn(|i| c[i] as f32))
        .collect())
}

/// Field order of the written manifest.
#[derive(Serialize)]
struct SceneFile {
    version: u64,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    positions: Vec<[f32; 3]>,
    scales: Vec<[f32; 3]>,
    rotations: Vec<[f32; 4]>,
    opacities: Vec<f32>,
    colors: Vec<[f32; 3]>,
    deform: Vec<Vec<Vec<f32>>>,
}

/// Serializes to the manifest text, byte-stable for identical scenes.
pub fn scene_to_json(scene: &Gaussian4DScene) -> Result<String> {
    let k = scene.len();
    let d = scene.degree();
    let deform: Vec<Vec<Vec<f32>>> = to_f64_vec(&scene.deform)?
        .chunks(3 * d.max(1))
        .take(k)
        .map(|g| {
            (0..3)
                .map(|a| (0..d).map(|i| g[a * d + i] as f32).collect())
                .collect()
        })
        .collect();
    let deform = if d == 0 { vec![vec![vec![]; 3]; k] } else { deform };
    let opacities: Vec<f32> = to_f64_vec(&scene.opacities)?.into_iter().map(|v| v as f32).collect();
    let file = SceneFile {
        version: SCENE_VERSION,
        k,
        d,
        positions: rows::<3>(&scene.positions)?,
        scales: rows::<3>(&scene.scales)?,
        rotations: rows::<4>(&scene.rotations)?,
        opacities,
        colors: rows::<3>(&scene.colors)?,
        deform,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_scene(scene: &Gaussian4DScene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)?)?;
    Ok(())
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str) -> Result<T> {
    let v = obj
        .get(name)
        .ok_or_else(|| Error::parse(name, "missing field"))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::parse(name, e.to_string()))
}

fn check_len(name: &str, got: usize, k: usize) -> Result<()> {
    if got != k {
        return Err(Error::parse(name, format!("has {got} entries but K = {k}")));
    }
    Ok(())
}

/// Parses manifest text into an f32 scene on the CPU.
pub fn scene_from_json(text: &str) -> Result<Gaussian4DScene> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::parse("<document>", e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::parse("<document>", "top level must be an object"))?;
    let version: u64 = field(obj, "version")?;
    if version != SCENE_VERSION {
        return Err(Error::parse("version", format!("unsupported version {version}")));
    }
    let k: usize = field(obj, "K")?;
    let d: usize = field(obj, "D")?;
    if k == 0 {
        return Err(Error::parse("K", "scene must contain at least one Gaussian"));
    }
    let positions: Vec<[f32; 3]> = field(obj, "positions")?;
    let scales: Vec<[f32; 3]> = field(obj, "scales")?;
    let rotations: Vec<[f32; 4]> = field(obj, "rotations")?;
    let opacities: Vec<f32> = field(obj, "opacities")?;
    let colors: Vec<[f32; 3]> = field(obj, "colors")?;
    let deform: Vec<Vec<Vec<f32>>> = field(obj, "deform")?;
    check_len("positions", positions.len(), k)?;
    check_len("scales", scales.len(), k)?;
    check_len("rotations", rotations.len(), k)?;
    check_len("opacities", opacities.len(), k)?;
    check_len("colors", colors.len(), k)?;
    check_len("deform", deform.len(), k)?;
    for (i, g) in deform.iter().enumerate() {
        if g.len() != 3 || g.iter().any(|a| a.len() != d) {
            return Err(Error::parse("deform", format!("entry {i} is not 3 x D = 3 x {d}")));
        }
    }
    let dev = Device::Cpu;
    let flat = |v: Vec<f32>, shape: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, &dev)?) };
    let scene = Gaussian4DScene {
        positions: flat(positions.concat(), &[k, 3])?,
        scales: flat(scales.concat(), &[k, 3])?,
        rotations: flat(rotations.concat(), &[k, 4])?,
        opacities: flat(opacities, &[k])?,
        colors: flat(colors.concat(), &[k, 3])?,
        deform: flat(deform.into_iter().flatten().flatten().collect(), &[k, 3, d])?,
    };
    debug_assert_eq!(scene.dtype(), DType::F32);
    Ok(scene)
}

pub fn load_scene(path: &Path) -> Result<Gaussian4DScene> {
    let text = std::fs::read_to_string(path)?;
    scene_from_json(&text)
}
