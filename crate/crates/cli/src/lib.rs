//! The `st4d` command line: one verb per pipeline capability, a JSON run
//! configuration with dotted `--key=value` overrides, and artifact I/O
//! rooted at `$ST4D_HOME`.

use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use clap::{Parser, Subcommand};
use serde::Serialize;

use st4d_core::cognition_graph::export::{to_dot, to_json};
use st4d_core::config::RunConfig;
use st4d_core::gaussians4d::export::{load_png, save_gif, save_png};
use st4d_core::gaussians4d::{chamfer, f_score, render, temporal_smoothness, Gaussian4DScene};
use st4d_core::model::{Generation, Prompt, St4dModel};
use st4d_core::nn::layers::scalar;
use st4d_core::nn::rng;
use st4d_core::scene_synth::{
    frame_time, load_scene, render_prompt_sequence, render_views, ring_cameras, save_scene, SCENE_EXTENSION,
};
use st4d_core::training::stages::{self, latest_model, StageReport};
use st4d_core::Error;

/// A failed command and its process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    /// 2 configuration, 3 data or parse, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) => 2,
                Error::Parse { .. } | Error::Io(_) | Error::Json(_) | Error::Image(_) => 3,
                Error::Numerical(_) => 4,
                Error::Tensor(_) => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "st4d", version, about = "Cognition-graph guided 4D Gaussian scene generation")]
pub struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact root; overrides `paths.home` and `$ST4D_HOME`.
    #[arg(long, global = true)]
    pub home: Option<PathBuf>,
    /// Start from the small CPU preset instead of the full defaults.
    #[arg(long, global = true)]
    pub small: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the training scenes into `<home>/data`.
    Synth,
    /// Pre-train the toy image diffusion teacher used for score distillation.
    TrainTeacher,
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
    },
    /// Generate a 4D scene from a caption, a PNG sequence or a scene file.
    Generate {
        /// Text prompt (caption).
        #[arg(long)]
        prompt: Option<String>,
        /// Directory of PNG frames, read in name order.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Scene file whose renders serve as the image prompt.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Output directory; defaults to `<home>/generated`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a scene file to per-frame PNGs and a GIF.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames rendered across `t ∈ [0, 1]`; defaults to `generate.horizon`.
        #[arg(long)]
        frames: Option<usize>,
        /// Camera index on the default ring.
        #[arg(long, default_value_t = 0)]
        camera: usize,
    },
    /// Score a predicted scene against a ground-truth scene.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Metrics file; defaults to `metrics.json` beside the prediction.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the fused cognition graph of a prompt as DOT and JSON.
    InspectGraph {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Splits `--dotted.key=value` arguments naming configuration keys from
/// the rest of the command line.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let keys: Vec<String> = RunConfig::default()
        .flat()
        .map(|f| f.into_iter().map(|(k, _)| k).collect())
        .unwrap_or_default();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if keys.iter().any(|key| key == k) {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
            if k.contains('.') {
                // Dotted but unknown: let config validation report it.
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(a.clone());
    }
    (rest, overrides)
}

/// Resolves the effective configuration: preset, file, overrides, home.
pub fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if cli.small => RunConfig::small(),
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if let Some(h) = &cli.home {
        cfg.paths.home = h.display().to_string();
    }
    Ok(cfg)
}

/// Entry point used by the binary; `args[0]` is the program name.
pub fn run(args: &[String]) -> CliResult<()> {
    let (rest, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.render().to_string()));
        }
    };
    let cfg = resolve_config(&cli, &overrides)?;
    let home = cfg.paths.resolve_home();
    match &cli.command {
        Command::Synth => {
            let data = stages::save_dataset(&home, &cfg)?;
            println!("wrote {} scenes to {}", data.len(), home.join(stages::DATA_DIR).display());
        }
        Command::TrainTeacher => print_report(&stages::train_teacher(&cfg, &home)?)?,
        Command::Train { stage } => {
            let report = match stage {
                1 => stages::train_stage1(&cfg, &home)?,
                2 => stages::train_stage2(&cfg, &home)?,
                _ => stages::train_stage3(&cfg, &home)?,
            };
            print_report(&report)?;
        }
        Command::Generate { prompt, images, scene, out } => {
            let prompt = read_prompt(&cfg, prompt.as_deref(), images.as_deref(), scene.as_deref())?;
            let out = out.clone().unwrap_or_else(|| home.join("generated"));
            let written = run_generate(&cfg, &home, &prompt, &out)?;
            println!("{}", serde_json::to_string_pretty(&written)?);
        }
        Command::Render { scene, out, frames, camera } => {
            let s = load_scene(scene)?;
            let n = frames.unwrap_or(cfg.generate.horizon);
            let files = render_sequence(&cfg, &s, out, n, *camera)?;
            println!("wrote {} frames to {}", files.len(), out.display());
        }
        Command::Eval { pred, gt, out } => {
            let metrics = run_eval(&cfg, &load_scene(pred)?, &load_scene(gt)?)?;
            let text = serde_json::to_string_pretty(&metrics)?;
            let path = out.clone().unwrap_or_else(|| pred.with_file_name("metrics.json"));
            std::fs::write(&path, &text)?;
            println!("{text}");
        }
        Command::InspectGraph { prompt, images, scene, out } => {
            let prompt = read_prompt(&cfg, prompt.as_deref(), images.as_deref(), scene.as_deref())?;
            let model = match latest_model(&cfg, &home) {
                Ok((m, _)) => m,
                Err(_) => {
                    log::warn!("no checkpoint under {}; inspecting an untrained model", home.display());
                    St4dModel::new(&cfg)?
                }
            };
            let (g, _) = model.prompt_graph(&prompt)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("graph.dot"), to_dot(&g)?)?;
            std::fs::write(out.join("graph.json"), serde_json::to_string_pretty(&to_json(&g)?)?)?;
            println!("wrote graph.dot and graph.json to {}", out.display());
        }
    }
    Ok(())
}

fn print_report(report: &StageReport) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

/// Builds a prompt from exactly one of the three sources.
pub fn read_prompt(
    cfg: &RunConfig,
    text: Option<&str>,
    images: Option<&Path>,
    scene: Option<&Path>,
) -> CliResult<Prompt> {
    let dtype = cfg.dtype()?;
    match (text, images, scene) {
        (Some(t), None, None) => Ok(Prompt::Text(t.to_string())),
        (caption, Some(dir), None) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::config(format!("cannot read image directory {}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::config(format!("no PNG frames in {}", dir.display())).into());
            }
            let frames: Vec<Tensor> = files.iter().map(|p| load_png(p)).collect::<Result<_, _>>()?;
            let frames = Tensor::stack(&frames, 0).map_err(Error::from)?.to_dtype(dtype).map_err(Error::from)?;
            let views = frames.narrow(0, 0, 1).map_err(Error::from)?;
            Ok(Prompt::Images { frames, views, text: caption.unwrap_or_default().to_string() })
        }
        (caption, None, Some(path)) => {
            let s = load_scene(path)?.to_dtype(dtype)?;
            let spec = &cfg.data.scene;
            let cams = ring_cameras(spec.num_views, spec.bounds, spec.image_size);
            let frames = render_prompt_sequence(&s, &cams[..1], spec.num_frames)?;
            let views = render_views(&s, &cams, 0.0)?;
            Ok(Prompt::Images { frames, views, text: caption.unwrap_or_default().to_string() })
        }
        (None, None, None) => Err(Error::config("give one of --prompt, --images or --scene").into()),
        _ => Err(Error::config("--images and --scene are mutually exclusive").into()),
    }
}

/// Files written by one generation.
#[derive(Debug, Clone, Serialize)]
pub struct GenerateOutput {
    pub checkpoint: String,
    pub scene: PathBuf,
    pub frames: Vec<PathBuf>,
    pub gif: PathBuf,
    pub graph: PathBuf,
}

/// Runs the pipeline from the latest checkpoint and writes the scene,
/// `generate.horizon` frames, a GIF and the conditioning graph.
pub fn run_generate(cfg: &RunConfig, home: &Path, prompt: &Prompt, out: &Path) -> CliResult<GenerateOutput> {
    let (model, checkpoint) = latest_model(cfg, home)?;
    let mut r = rng::derive(cfg.seed, "generate");
    let Generation { graph, scene, .. } =
        model.generate(prompt, cfg.generate.horizon, cfg.generate.sample_steps, &mut r)?;
    scene.validate()?;
    std::fs::create_dir_all(out)?;
    let scene_path = out.join(format!("scene{SCENE_EXTENSION}"));
    save_scene(&scene, &scene_path)?;
    let frames = render_sequence(cfg, &scene, out, cfg.generate.horizon, 0)?;
    let graph_path = out.join("graph.json");
    std::fs::write(&graph_path, serde_json::to_string_pretty(&to_json(&graph)?)?)?;
    Ok(GenerateOutput { checkpoint, scene: scene_path, gif: out.join("animation.gif"), frames, graph: graph_path })
}

/// Renders `frames` PNGs across `t ∈ [0, 1]` plus `animation.gif`.
pub fn render_sequence(
    cfg: &RunConfig,
    scene: &Gaussian4DScene,
    out: &Path,
    frames: usize,
    camera: usize,
) -> CliResult<Vec<PathBuf>> {
    if frames == 0 {
        return Err(Error::config("need at least one frame").into());
    }
    let spec = &cfg.data.scene;
    let cams = ring_cameras(spec.num_views, spec.bounds, spec.image_size);
    let cam = cams
        .get(camera)
        .ok_or_else(|| Error::config(format!("camera {camera} out of range; the ring has {}", cams.len())))?;
    std::fs::create_dir_all(out)?;
    let mut images = Vec::with_capacity(frames);
    let mut files = Vec::with_capacity(frames);
    for f in 0..frames {
        let img = render(scene, cam, frame_time(f, frames))?;
        let path = out.join(format!("frame_{f:03}.png"));
        save_png(&img, &path)?;
        files.push(path);
        images.push(img);
    }
    save_gif(&images, cfg.generate.fps, &out.join("animation.gif"))?;
    Ok(files)
}

/// Metrics of a predicted scene against ground truth.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct Metrics {
    /// Squared Chamfer distance of canonical positions.
    pub chamfer: f64,
    pub f_score: f64,
    pub f_score_tau: f64,
    /// Smoothness of the prediction over `eval.smoothness_times` uniform times.
    pub temporal_smoothness: f64,
    /// Pixel MSE per frame from the first ring camera.
    pub per_frame_pixel_mse: Vec<f64>,
}

pub fn run_eval(cfg: &RunConfig, pred: &Gaussian4DScene, gt: &Gaussian4DScene) -> CliResult<Metrics> {
    let pred = pred.to_dtype(candle_core::DType::F64)?;
    let gt = gt.to_dtype(candle_core::DType::F64)?;
    let tau = cfg.eval.f_score_tau;
    let n = cfg.eval.smoothness_times;
    let times: Vec<f64> = (0..n).map(|i| frame_time(i, n)).collect();
    let spec = &cfg.data.scene;
    let cam = &ring_cameras(spec.num_views, spec.bounds, spec.image_size)[0];
    let frames = spec.num_frames;
    let mut per_frame = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = frame_time(f, frames);
        let d = (render(&pred, cam, t)? - render(&gt, cam, t)?).map_err(Error::from)?;
        per_frame.push(scalar(&d.sqr().map_err(Error::from)?.mean_all().map_err(Error::from)?)?);
    }
    Ok(Metrics {
        chamfer: scalar(&chamfer(&pred.positions, &gt.positions)?)?,
        f_score: f_score(&pred.positions, &gt.positions, tau)?,
        f_score_tau: tau,
        temporal_smoothness: scalar(&temporal_smoothness(&pred, &times)?)?,
        per_frame_pixel_mse: per_frame,
    })
}
