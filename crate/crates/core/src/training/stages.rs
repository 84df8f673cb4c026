//! Dataset plumbing, teacher pre-training and the three training stages.
//!
//! Stage 1 trains the predictor on semantic states with the action path
//! fixed, then the graph state path with the predictor fixed, and then
//! pre-trains the codec, the diffusion transformer and the text adapter.
//! Stage 2 aligns pixels with score distillation. Stage 3 fine-tunes
//! everything on the joint objective.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::losses::{loss_sds, loss_st, loss_total};
use super::teacher::{teacher_loss, ToyTeacher};
use crate::cgdit::{fm_loss, ConditioningSequence};
use crate::cognition_graph::GraphKind;
use crate::config::RunConfig;
use crate::latent_codec::Sampling;
use crate::model::{prefix, Prompt, St4dModel};
use crate::nn::layers::scalar;
use crate::nn::{rng, LrSchedule, ParamStore, Trainer};
use crate::scene_synth::{
    default_cameras, frame_time, generate_sample, load_scene, render_prompt_sequence, render_views, save_scene,
    GroundTruthSample, MotionFamily, SyntheticSceneSpec, SCENE_EXTENSION,
};
use crate::gaussians4d::render;
use crate::world_model::{loss_wm, WorldState};
use crate::{ensure_config, Error, Result};

pub const DATA_DIR: &str = "data";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOG_DIR: &str = "logs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEACHER: &str = "teacher";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    spec: SyntheticSceneSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    scenes: Vec<ManifestEntry>,
}

/// Ground-truth training samples in the model precision.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<GroundTruthSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn get(&self, step: usize) -> &GroundTruthSample {
        &self.samples[step % self.samples.len()]
    }
}

pub fn checkpoint_dir(home: &Path, name: &str) -> PathBuf {
    home.join(CHECKPOINT_DIR).join(name)
}

/// Scene specs of the configured dataset: seeds count up from the template
/// seed and motion families cycle.
pub fn dataset_specs(cfg: &RunConfig) -> Vec<SyntheticSceneSpec> {
    (0..cfg.data.num_scenes)
        .map(|i| SyntheticSceneSpec {
            seed: cfg.data.scene.seed + i as u64,
            motion_family: MotionFamily::ALL[i % MotionFamily::ALL.len()],
            ..cfg.data.scene.clone()
        })
        .collect()
}

fn to_dtype(s: GroundTruthSample, dtype: DType) -> Result<GroundTruthSample> {
    Ok(GroundTruthSample {
        scene: s.scene.to_dtype(dtype)?,
        frames: s.frames.to_dtype(dtype)?,
        views: s.views.to_dtype(dtype)?,
        ..s
    })
}

/// Synthesizes the dataset under `home/data` and writes its manifest.
pub fn save_dataset(home: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let dir = home.join(DATA_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for (i, spec) in dataset_specs(cfg).into_iter().enumerate() {
        let sample = generate_sample(&spec)?;
        let file = format!("scene_{i:03}{SCENE_EXTENSION}");
        save_scene(&sample.scene, &dir.join(&file))?;
        entries.push(ManifestEntry { file, spec });
        samples.push(to_dtype(sample, cfg.dtype()?)?);
    }
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&Manifest { scenes: entries })?)?;
    Ok(Dataset { samples })
}

/// Reads the dataset written by [`save_dataset`], re-rendering prompts
/// from the stored scenes.
pub fn load_dataset(home: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let dir = home.join(DATA_DIR);
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        Error::config(format!("no dataset at {}; run `st4d synth` first", dir.display()))
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    ensure_config!(!manifest.scenes.is_empty(), "dataset manifest lists no scenes");
    let mut samples = Vec::with_capacity(manifest.scenes.len());
    for entry in manifest.scenes {
        let spec = entry.spec;
        ensure_config!(
            spec.image_size == cfg.foundation.image_size,
            "dataset images are {}px, config expects {}px",
            spec.image_size,
            cfg.foundation.image_size
        );
        let scene = load_scene(&dir.join(&entry.file))?;
        let cameras = default_cameras(&spec);
        let frames = render_prompt_sequence(&scene, &cameras[..1], spec.num_frames)?;
        let views = render_views(&scene, &cameras, 0.0)?;
        let sample = GroundTruthSample {
            caption: crate::scene_synth::caption(&spec),
            spec,
            scene,
            cameras,
            frames,
            views,
        };
        samples.push(to_dtype(sample, cfg.dtype()?)?);
    }
    Ok(Dataset { samples })
}

/// Summary of one optimization phase.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseReport {
    pub phase: String,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Largest gradient norm seen on any frozen parameter.
    pub max_frozen_grad_norm: f64,
    pub frozen_elements: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub phases: Vec<PhaseReport>,
    pub checkpoint: PathBuf,
}

impl StageReport {
    pub fn max_frozen_grad_norm(&self) -> f64 {
        self.phases.iter().map(|p| p.max_frozen_grad_norm).fold(0.0, f64::max)
    }
}

struct JsonlLog {
    out: BufWriter<File>,
}

impl JsonlLog {
    fn create(home: &Path, name: &str) -> Result<Self> {
        let dir = home.join(LOG_DIR);
        std::fs::create_dir_all(&dir)?;
        Ok(Self { out: BufWriter::new(File::create(dir.join(format!("{name}.jsonl")))?) })
    }

    fn write(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.out, "{value}")?;
        Ok(())
    }
}

/// Named loss components of one step, all scalars.
type Parts = Vec<(&'static str, Tensor)>;

struct Phase<'a> {
    stage: &'a str,
    name: &'a str,
    steps: usize,
    lr: f64,
    trainable: &'a [&'a str],
    /// Prefixes frozen even though they sit under a trainable prefix.
    also_frozen: &'a [&'a str],
}

/// Runs one phase: sets the freeze pattern, rebuilds the optimizer over
/// the trainable set, and audits frozen gradients after every step.
fn run_phase(
    model: &St4dModel,
    extra_frozen: Option<&ParamStore>,
    phase: Phase<'_>,
    log: &mut JsonlLog,
    mut step_fn: impl FnMut(usize) -> Result<(Tensor, Parts)>,
) -> Result<PhaseReport> {
    let store = &model.store;
    store.freeze_all_except(phase.trainable);
    for p in phase.also_frozen {
        store.set_frozen(p, true);
    }
    let tc = &model.cfg.train;
    let schedule = LrSchedule::new(phase.lr, tc.warmup.min(phase.steps / 2), phase.steps);
    let mut trainer = Trainer::new(store.trainable_vars(), schedule, tc.weight_decay)?.with_clip(tc.grad_clip);
    let mut report = PhaseReport {
        phase: phase.name.to_string(),
        steps: phase.steps,
        first_loss: f64::NAN,
        final_loss: f64::NAN,
        max_frozen_grad_norm: 0.0,
        frozen_elements: store.frozen_elements() + extra_frozen.map_or(0, |s| s.num_elements("")),
    };
    for step in 0..phase.steps {
        let (loss, parts) = step_fn(step)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{} {} loss is {value} at step {step}", phase.stage, phase.name)));
        }
        let lr = trainer.lr();
        let grads = trainer.backward_step(&loss)?;
        let mut frozen = store.frozen_grad_norm(&grads)?;
        if let Some(s) = extra_frozen {
            frozen = frozen.hypot(s.grad_norm(&grads, "")?);
        }
        report.max_frozen_grad_norm = report.max_frozen_grad_norm.max(frozen);
        if step == 0 {
            report.first_loss = value;
        }
        report.final_loss = value;
        let mut entry = json!({
            "step": step,
            "stage": phase.stage,
            "phase": phase.name,
            "loss": value,
            "lr": lr,
            "frozen_grad_norm": frozen,
        });
        for (k, t) in parts {
            entry[k] = json!(scalar(&t)?);
        }
        log.write(entry)?;
    }
    store.unfreeze_all();
    Ok(report)
}

fn meta(cfg: &RunConfig, stage: &str, step: usize) -> CheckpointMeta {
    CheckpointMeta { stage: stage.into(), step, seed: cfg.seed, config: cfg.clone() }
}

fn images_prompt(s: &GroundTruthSample) -> Prompt {
    Prompt::Images { frames: s.frames.clone(), views: s.views.clone(), text: s.caption.clone() }
}

/// Predictor loss over a per-frame state sequence: every prefix predicts
/// the next state; targets are detached; slots of all frames form the
/// regularized batch.
fn world_loss(model: &St4dModel, states: &[WorldState], action_tokens: &Tensor) -> Result<Tensor> {
    ensure_config!(states.len() >= 2, "world-model training needs at least 2 frames");
    let w = &model.world;
    let a = w.pool_action(action_tokens)?;
    let conditioned: Vec<WorldState> = states
        .iter()
        .enumerate()
        .map(|(f, s)| w.adaln_condition(&WorldState { slots: s.slots.clone(), time_index: f }, &a))
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(states.len() - 1);
    for f in 0..states.len() - 1 {
        preds.push(w.predict_next(&conditioned[..=f])?.slots);
    }
    let targets: Vec<Tensor> = states[1..].iter().map(|s| s.slots.clone()).collect();
    let rows: Vec<Tensor> = states.iter().map(|s| s.slots.clone()).collect();
    loss_wm(&Tensor::stack(&preds, 0)?, &Tensor::stack(&targets, 0)?, &Tensor::cat(&rows, 0)?, w.config().alpha)
}

/// States distilled from per-frame semantic tokens.
fn semantic_states(model: &St4dModel, semantic: &Tensor) -> Result<Vec<WorldState>> {
    (0..semantic.dims()[0]).map(|f| model.world.distill_nodes(&semantic.get(f)?)).collect()
}

/// States distilled from per-frame fused graphs; each frame serves as its
/// own single view.
fn graph_states(model: &St4dModel, s: &GroundTruthSample) -> Result<Vec<WorldState>> {
    let f = s.frames.dims()[0];
    (0..f)
        .map(|i| {
            let frame = s.frames.narrow(0, i, 1)?;
            let (_, graphs) = model.encode_images(&frame, &frame, &s.caption)?;
            model.world.distill_state(&graphs.fused)
        })
        .collect()
}

fn render_times(n: usize) -> Vec<f64> {
    (0..n).map(|i| frame_time(i, n)).collect()
}

/// Teacher pre-training on renders of every scene, camera and frame time.
pub fn train_teacher(cfg: &RunConfig, home: &Path) -> Result<StageReport> {
    let data = load_dataset(home, cfg)?;
    let store = ParamStore::cpu(cfg.seed ^ rng::fnv1a64(TEACHER.as_bytes()), cfg.dtype()?);
    let teacher = ToyTeacher::new(&store.builder(TEACHER), &cfg.teacher)?;
    let mut pool = Vec::new();
    for s in &data.samples {
        let times = render_times(s.spec.num_frames);
        for cam in &s.cameras {
            for &t in &times {
                pool.push((render(&s.scene, cam, t)?, s.caption.clone()));
            }
        }
    }
    let tc = &cfg.teacher;
    let mut trainer = Trainer::new(store.trainable_vars(), LrSchedule::new(tc.lr, tc.steps / 10, tc.steps), 0.0)?;
    let mut r = rng::derive(cfg.seed, "teacher");
    let mut log = JsonlLog::create(home, TEACHER)?;
    let mut report = PhaseReport {
        phase: "denoise".into(),
        steps: tc.steps,
        first_loss: f64::NAN,
        final_loss: f64::NAN,
        max_frozen_grad_norm: 0.0,
        frozen_elements: 0,
    };
    for step in 0..tc.steps {
        // One caption per batch: images share the conditioning text.
        let anchor = rand::Rng::random_range(&mut r, 0..pool.len());
        let caption = pool[anchor].1.clone();
        let same: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].1 == caption).collect();
        let batch: Vec<Tensor> = (0..tc.batch)
            .map(|_| pool[same[rand::Rng::random_range(&mut r, 0..same.len())]].0.clone())
            .collect();
        let loss = teacher_loss(&teacher, &Tensor::stack(&batch, 0)?, &caption, &mut r)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("teacher loss is {value} at step {step}")));
        }
        let lr = trainer.lr();
        trainer.backward_step(&loss)?;
        if step == 0 {
            report.first_loss = value;
        }
        report.final_loss = value;
        log.write(json!({"step": step, "stage": TEACHER, "phase": "denoise", "loss": value, "lr": lr}))?;
    }
    let dir = checkpoint_dir(home, TEACHER);
    save_checkpoint(&dir, &store, &meta(cfg, TEACHER, tc.steps))?;
    Ok(StageReport { stage: TEACHER.into(), phases: vec![report], checkpoint: dir })
}

/// Loads the frozen teacher checkpoint.
pub fn load_teacher(cfg: &RunConfig, home: &Path) -> Result<(ParamStore, ToyTeacher)> {
    let dir = checkpoint_dir(home, TEACHER);
    if !dir.join(super::checkpoint::META_FILE).exists() {
        return Err(Error::config(format!(
            "missing teacher checkpoint at {}; run `st4d train-teacher` first",
            dir.display()
        )));
    }
    let store = ParamStore::cpu(0, cfg.dtype()?);
    let teacher = ToyTeacher::new(&store.builder(TEACHER), &cfg.teacher)?;
    load_checkpoint(&dir, &store)?;
    store.set_frozen("", true);
    Ok((store, teacher))
}

/// Builds the model and loads the named stage checkpoint.
pub fn load_model(cfg: &RunConfig, home: &Path, stage: &str) -> Result<St4dModel> {
    let model = St4dModel::new(cfg)?;
    let dir = checkpoint_dir(home, stage);
    if !dir.join(super::checkpoint::META_FILE).exists() {
        return Err(Error::config(format!(
            "missing {stage} checkpoint at {}; run the preceding training stage first",
            dir.display()
        )));
    }
    load_checkpoint(&dir, &model.store)?;
    Ok(model)
}

/// Diffusion conditioning of every sample, detached.
fn conditions(model: &St4dModel, data: &Dataset, horizon: usize) -> Result<Vec<ConditioningSequence>> {
    data.samples
        .iter()
        .map(|s| Ok(model.conditioning(&images_prompt(s), horizon)?.2.detach()))
        .collect()
}

pub fn train_stage1(cfg: &RunConfig, home: &Path) -> Result<StageReport> {
    let data = load_dataset(home, cfg)?;
    let model = St4dModel::new(cfg)?;
    let steps = cfg.train.steps;
    let mut log = JsonlLog::create(home, "stage1")?;
    let mut phases = Vec::new();
    let stage = "stage1";

    phases.push(run_phase(
        &model,
        None,
        Phase {
            stage,
            name: "predictor",
            steps,
            lr: cfg.train.lr,
            trainable: &["foundation.semantic", prefix::WORLD_STATE, prefix::WORLD_ADALN, prefix::WORLD_PREDICTOR],
            also_frozen: &[],
        },
        &mut log,
        |step| {
            let s = data.get(step);
            let semantic = model.foundation.encode_semantic(&s.frames)?;
            let action = model.foundation.encode_action(&s.frames)?;
            let loss = world_loss(&model, &semantic_states(&model, &semantic)?, &action)?;
            Ok((loss, vec![]))
        },
    )?);

    phases.push(run_phase(
        &model,
        None,
        Phase {
            stage,
            name: "state",
            steps,
            lr: cfg.train.lr,
            trainable: &[prefix::FOUNDATION, prefix::GRAPH, prefix::WORLD_STATE],
            also_frozen: &[prefix::ACTION_ENCODER],
        },
        &mut log,
        |step| {
            let s = data.get(step);
            let action = model.foundation.encode_action(&s.frames)?;
            let loss = world_loss(&model, &graph_states(&model, s)?, &action)?;
            Ok((loss, vec![]))
        },
    )?);

    let mut codec_rng = rng::derive(cfg.seed, "stage1.codec");
    phases.push(run_phase(
        &model,
        None,
        Phase { stage, name: "codec", steps, lr: cfg.train.pretrain_lr, trainable: &[prefix::CODEC], also_frozen: &[] },
        &mut log,
        |step| Ok((model.codec.loss(&data.get(step).scene, Sampling::Train(&mut codec_rng))?, vec![])),
    )?);

    let conds = conditions(&model, &data, cfg.train.horizon)?;
    let latents: Vec<Tensor> = data
        .samples
        .iter()
        .map(|s| {
            let z = model.codec.encode_eval(&s.scene)?.mean.detach().unsqueeze(0)?;
            Ok(z.repeat((cfg.train.fm_repeats, 1, 1))?)
        })
        .collect::<Result<_>>()?;
    let mut fm_rng = rng::derive(cfg.seed, "stage1.dit");
    phases.push(run_phase(
        &model,
        None,
        Phase { stage, name: "diffusion", steps, lr: cfg.train.pretrain_lr, trainable: &[prefix::DIT], also_frozen: &[] },
        &mut log,
        |step| {
            let i = step % data.len();
            Ok((fm_loss(&model.dit, &latents[i], Some(&conds[i]), &mut fm_rng)?, vec![]))
        },
    )?);

    let targets: Vec<(Tensor, Tensor)> = data
        .samples
        .iter()
        .map(|s| {
            let (g, _) = model.prompt_graph(&images_prompt(s))?;
            Ok((g.nodes.detach(), g.logical.detach()))
        })
        .collect::<Result<_>>()?;
    phases.push(run_phase(
        &model,
        None,
        Phase {
            stage,
            name: "text_adapter",
            steps,
            lr: cfg.train.pretrain_lr,
            trainable: &[prefix::TEXT_ADAPTER],
            also_frozen: &[],
        },
        &mut log,
        |step| {
            let i = step % data.len();
            let g = model.text_graph(&data.samples[i].caption)?;
            let nodes = (&g.nodes - &targets[i].0)?.sqr()?.mean_all()?;
            let logical = (&g.logical - &targets[i].1)?.sqr()?.mean_all()?;
            Ok(((&nodes + &logical)?, vec![("nodes_mse", nodes), ("logical_mse", logical)]))
        },
    )?);

    let dir = checkpoint_dir(home, stage);
    save_checkpoint(&dir, &model.store, &meta(cfg, stage, 5 * steps))?;
    Ok(StageReport { stage: stage.into(), phases, checkpoint: dir })
}

fn sds_range(cfg: &RunConfig) -> (usize, usize) {
    let last = cfg.teacher.timesteps - 1;
    (cfg.train.sds_t_min.min(last), cfg.train.sds_t_max.min(last))
}

/// Renders `scene` from the first `render_views` cameras at one seeded
/// frame time: `[V, H, W, 3]`.
fn sds_renders(
    cfg: &RunConfig,
    scene: &crate::gaussians4d::Gaussian4DScene,
    s: &GroundTruthSample,
    r: &mut impl rand::Rng,
) -> Result<Tensor> {
    let times = render_times(cfg.train.render_times);
    let t = times[r.random_range(0..times.len())];
    let v = cfg.train.render_views.min(s.cameras.len());
    let imgs = s.cameras[..v].iter().map(|c| render(scene, c, t)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&imgs, 0)?)
}

pub fn train_stage2(cfg: &RunConfig, home: &Path) -> Result<StageReport> {
    let data = load_dataset(home, cfg)?;
    let (teacher_store, teacher) = load_teacher(cfg, home)?;
    let model = load_model(cfg, home, "stage1")?;
    let conds = conditions(&model, &data, cfg.train.horizon)?;
    let mut log = JsonlLog::create(home, "stage2")?;
    let mut r = rng::derive(cfg.seed, "stage2");
    let stage = "stage2";
    let phase = run_phase(
        &model,
        Some(&teacher_store),
        Phase {
            stage,
            name: "sds",
            steps: cfg.train.steps,
            lr: cfg.train.lr,
            trainable: &[prefix::DIT, prefix::CODEC_DECODER],
            also_frozen: &[],
        },
        &mut log,
        |step| {
            let i = step % data.len();
            let s = &data.samples[i];
            let z = model.sample_latent(&conds[i], cfg.train.sample_steps, true, &mut r)?;
            let scene = model.decode(&z)?;
            let imgs = sds_renders(cfg, &scene, s, &mut r)?;
            let sds = loss_sds(&imgs, &teacher, &s.caption, sds_range(cfg), cfg.loss.sds_weight, &mut r)?;
            let value = Tensor::new(sds.value, imgs.device())?;
            Ok(((&sds.loss * cfg.loss.lambda2)?, vec![("sds", value)]))
        },
    )?;
    let dir = checkpoint_dir(home, stage);
    save_checkpoint(&dir, &model.store, &meta(cfg, stage, cfg.train.steps))?;
    Ok(StageReport { stage: stage.into(), phases: vec![phase], checkpoint: dir })
}

pub fn train_stage3(cfg: &RunConfig, home: &Path) -> Result<StageReport> {
    let data = load_dataset(home, cfg)?;
    let (teacher_store, teacher) = load_teacher(cfg, home)?;
    let model = load_model(cfg, home, "stage2")?;
    let mut log = JsonlLog::create(home, "stage3")?;
    let mut r = rng::derive(cfg.seed, "stage3");
    let times = render_times(cfg.train.render_times);
    let stage = "stage3";
    let phase = run_phase(
        &model,
        Some(&teacher_store),
        Phase { stage, name: "joint", steps: cfg.train.steps, lr: cfg.train.lr, trainable: &[""], also_frozen: &[] },
        &mut log,
        |step| {
            let s = data.get(step);
            let (bundle, graphs) = model.encode_images(&s.frames, &s.views, &s.caption)?;
            debug_assert_eq!(graphs.fused.kind, GraphKind::Fused);
            let wm = world_loss(&model, &semantic_states(&model, &bundle.semantic)?, &bundle.action)?;
            let future = model.rollout(&graphs.fused, &bundle.action, cfg.train.horizon)?;
            let cond = model.dit.condition(&future)?;
            let z = model.sample_latent(&cond, cfg.train.sample_steps, true, &mut r)?;
            let pred = model.decode(&z)?;
            let imgs = sds_renders(cfg, &pred, s, &mut r)?;
            let sds = loss_sds(&imgs, &teacher, &s.caption, sds_range(cfg), cfg.loss.sds_weight, &mut r)?;
            let v = cfg.train.render_views.min(s.cameras.len());
            let st = loss_st(&pred, &s.scene, &s.cameras[..v], &times, &cfg.loss)?;
            let total = loss_total(&wm, &sds.loss, &st.loss, &cfg.loss)?;
            let sds_value = Tensor::new(sds.value, imgs.device())?;
            Ok((
                total,
                vec![
                    ("wm", wm),
                    ("sds", sds_value),
                    ("st", st.loss),
                    ("chamfer", st.chamfer),
                    ("smoothness", st.smoothness),
                    ("render", st.render),
                ],
            ))
        },
    )?;
    let dir = checkpoint_dir(home, stage);
    save_checkpoint(&dir, &model.store, &meta(cfg, stage, cfg.train.steps))?;
    Ok(StageReport { stage: stage.into(), phases: vec![phase], checkpoint: dir })
}

/// The most trained model checkpoint available under `home`.
pub fn latest_model(cfg: &RunConfig, home: &Path) -> Result<(St4dModel, String)> {
    for stage in ["stage3", "stage2", "stage1"] {
        if checkpoint_dir(home, stage).join(super::checkpoint::META_FILE).exists() {
            return Ok((load_model(cfg, home, stage)?, stage.to_string()));
        }
    }
    Err(Error::config(format!(
        "no model checkpoint under {}; run `st4d train --stage 1` first",
        home.join(CHECKPOINT_DIR).display()
    )))
}
