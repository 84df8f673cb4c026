//! Run configuration: every hyperparameter of the pipeline, serialized as
//! nested JSON and addressable as flat dotted keys (`graph.nodes`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cgdit::DiffusionConfig;
use crate::cognition_graph::GraphConfig;
use crate::foundation::FoundationConfig;
use crate::latent_codec::CodecConfig;
use crate::scene_synth::SyntheticSceneSpec;
use crate::training::{LossWeights, TeacherConfig, TrainConfig};
use crate::world_model::WorldModelConfig;
use crate::{ensure_config, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic training scenes; scene `i` uses seed `scene.seed + i`.
    pub num_scenes: usize,
    /// Template for every scene; motion families cycle across scenes.
    pub scene: SyntheticSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_scenes: 8, scene: SyntheticSceneSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub horizon: usize,
    pub fps: u32,
    pub sample_steps: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { horizon: 8, fps: 8, sample_steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub f_score_tau: f64,
    pub smoothness_times: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { f_score_tau: 0.05, smoothness_times: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Artifact root; empty means `$ST4D_HOME`, falling back to `./st4d_runs`.
    pub home: String,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { home: String::new() }
    }
}

impl PathConfig {
    pub fn resolve_home(&self) -> PathBuf {
        if !self.home.is_empty() {
            return PathBuf::from(&self.home);
        }
        match std::env::var("ST4D_HOME") {
            Ok(h) if !h.is_empty() => PathBuf::from(h),
            _ => PathBuf::from("st4d_runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Compute precision: "f32" or "f64".
    pub dtype: String,
    pub paths: PathConfig,
    pub data: DataConfig,
    pub foundation: FoundationConfig,
    pub graph: GraphConfig,
    pub world: WorldModelConfig,
    pub codec: CodecConfig,
    pub diffusion: DiffusionConfig,
    pub teacher: TeacherConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: "f32".into(),
            paths: PathConfig::default(),
            data: DataConfig::default(),
            foundation: FoundationConfig::default(),
            graph: GraphConfig::default(),
            world: WorldModelConfig::default(),
            codec: CodecConfig::default(),
            diffusion: DiffusionConfig::default(),
            teacher: TeacherConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn lookup_mut<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    Some(cur)
}

impl RunConfig {
    pub fn dtype(&self) -> Result<candle_core::DType> {
        match self.dtype.as_str() {
            "f32" => Ok(candle_core::DType::F32),
            "f64" => Ok(candle_core::DType::F64),
            other => Err(Error::config(format!("dtype must be f32 or f64, got '{other}'"))),
        }
    }

    /// Every key with its current value, sorted.
    pub fn flat(&self) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        flatten_into("", &serde_json::to_value(self)?, &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Parses a config file; missing keys take their defaults and unknown
    /// keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides. Values parse as JSON when possible
    /// and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let slot = lookup_mut(&mut root, key).ok_or_else(|| Error::config(format!("unknown config key '{key}'")))?;
            if slot.is_object() {
                return Err(Error::config(format!("'{key}' is a section, not a key")));
            }
            let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            *slot = parsed;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dtype()?;
        self.data.scene.validate()?;
        self.foundation.validate()?;
        self.graph.validate()?;
        self.codec.validate()?;
        self.diffusion.validate()?;
        ensure_config!(self.data.num_scenes >= 1, "data.num_scenes must be at least 1");
        ensure_config!(
            self.foundation.image_size == self.data.scene.image_size,
            "foundation.image_size {} differs from data.scene.image_size {}",
            self.foundation.image_size,
            self.data.scene.image_size
        );
        ensure_config!(self.graph.d == self.foundation.d, "graph.d must equal foundation.d");
        ensure_config!(self.diffusion.cond_dim == self.graph.d, "diffusion.cond_dim must equal graph.d");
        ensure_config!(
            self.diffusion.latent_dim == self.codec.latent_dim,
            "diffusion.latent_dim must equal codec.latent_dim"
        );
        ensure_config!(
            self.diffusion.tokens == self.codec.num_tokens(),
            "diffusion.tokens {} must equal the codec token count {}",
            self.diffusion.tokens,
            self.codec.num_tokens()
        );
        ensure_config!(self.codec.degree == self.data.scene.degree, "codec.degree must equal data.scene.degree");
        ensure_config!(self.codec.bounds == self.data.scene.bounds, "codec.bounds must equal data.scene.bounds");
        ensure_config!(
            self.codec.gaussians == self.data.scene.num_gaussians(),
            "codec.gaussians {} must equal objects x gaussians_per_object = {}",
            self.codec.gaussians,
            self.data.scene.num_gaussians()
        );
        ensure_config!(
            self.generate.horizon >= 1 && self.generate.horizon <= self.diffusion.max_cond_frames,
            "generate.horizon must be in 1..={}",
            self.diffusion.max_cond_frames
        );
        ensure_config!(
            self.train.horizon >= 1 && self.train.horizon <= self.diffusion.max_cond_frames,
            "train.horizon must be in 1..={}",
            self.diffusion.max_cond_frames
        );
        ensure_config!(self.generate.fps >= 1, "generate.fps must be positive");
        self.loss.validate()?;
        self.train.validate()?;
        self.teacher.validate()?;
        Ok(())
    }

    /// A small configuration that trains end to end in minutes on a CPU.
    pub fn small() -> Self {
        let mut c = RunConfig::default();
        c.data.num_scenes = 4;
        c.data.scene.image_size = 32;
        c.data.scene.gaussians_per_object = 16;
        c.data.scene.num_frames = 4;
        c.data.scene.num_views = 2;
        c.foundation.image_size = 32;
        c.foundation.d = 32;
        c.foundation.d_a = 16;
        c.foundation.logical_tokens = 4;
        c.foundation.text_table = 256;
        c.graph.nodes = 32;
        c.graph.d = 32;
        c.graph.d_e = 16;
        c.graph.pe_dim = 24;
        c.graph.edge_hidden = 32;
        c.graph.msg_hidden = 32;
        c.world.slots = 8;
        c.world.d_s = 32;
        c.codec.gaussians = 32;
        c.codec.latent_dim = 16;
        c.codec.conv_channels = [16, 32, 32];
        c.codec.width = 32;
        c.diffusion.width = 64;
        c.diffusion.blocks = 2;
        c.diffusion.latent_dim = 16;
        c.diffusion.cond_dim = 32;
        c.teacher.channels = 16;
        c.generate.horizon = 4;
        c.generate.sample_steps = 50;
        c.train.horizon = 2;
        c
    }
}
