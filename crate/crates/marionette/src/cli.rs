//! Command-line pipeline: dataset generation, the three trainings,
//! end-to-end animation, evaluation, plotting, and ablation presets.
//!
//! One command is one process. Every command resolves a [`RunConfig`]
//! (TOML file + flag overrides), validates it, writes a resolved-config
//! snapshot under `<out_dir>/configs/`, and is bit-deterministic for a
//! fixed seed, so reruns can be compared by output hashes.
//!
//! Exit codes: 0 success, 2 validation error, 3 missing prerequisite,
//! 4 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::animator::{
    self, constant_gaze, train_animator, AnimatorModel, AnimatorTrainConfig, AnimatorLogRow,
};
use crate::diffusion::{train_pose, CfgMode, PoseDiffusion, PoseTrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::expression::{
    train_stage1, train_stage2, ExpressionPipeline, Stage1Model, Stage1TrainConfig, Stage2LogRow,
    Stage2Model, Stage2TrainConfig,
};
use crate::metrics::{self, EvalClip, MetricReport};
use crate::plot::{self, Series};
use crate::render::{render_face, train_estimators, EstimatorTrainConfig, FaceEstimators};
use crate::rng::derive_seed;
use crate::types::{FrameImage, GazeDirection};
use crate::world::{Dataset, SyntheticClip, World, WorldSpec};

/// Top-level run configuration: one human-readable TOML file with nested
/// sections, unknown keys rejected. Every field has a default, so an empty
/// file (or no file) is a valid desk-scale reference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// All artifacts land under this directory.
    pub out_dir: PathBuf,
    /// Classifier-free guidance weight used for sampling, in (0, 1].
    pub gamma: f64,
    /// Number of clips held out (from the end of the dataset) for
    /// evaluation; the rest train.
    pub eval_clips: usize,
    /// Seed for inference-time sampling (pose noise, expression noise).
    pub seed: u64,
    pub world: WorldSpec,
    pub estimators: EstimatorTrainConfig,
    pub pose: PoseTrainConfig,
    pub stage1: Stage1TrainConfig,
    pub stage2: Stage2TrainConfig,
    pub animator: AnimatorTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/demo"),
            gamma: 0.4,
            eval_clips: 4,
            seed: 4096,
            world: WorldSpec::default(),
            estimators: EstimatorTrainConfig::default(),
            pose: PoseTrainConfig::default(),
            stage1: Stage1TrainConfig::default(),
            stage2: Stage2TrainConfig::default(),
            animator: AnimatorTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = toml::from_str(&text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::validation(format!(
                "gamma {} must lie in (0, 1]",
                self.gamma
            )));
        }
        if self.eval_clips == 0 || self.eval_clips >= self.world.num_clips {
            return Err(Error::validation(format!(
                "eval_clips {} must leave at least one training clip of {}",
                self.eval_clips, self.world.num_clips
            )));
        }
        if self.pose.diffusion.audio_dim != self.world.audio_dim {
            return Err(Error::validation(format!(
                "pose audio_dim {} != world audio_dim {}",
                self.pose.diffusion.audio_dim, self.world.audio_dim
            )));
        }
        if self.stage1.arch.audio_dim != self.world.audio_dim {
            return Err(Error::validation(format!(
                "stage1 audio_dim {} != world audio_dim {}",
                self.stage1.arch.audio_dim, self.world.audio_dim
            )));
        }
        if self.stage2.arch.phi_dim != self.stage1.arch.phi_dim {
            return Err(Error::validation(format!(
                "stage2 phi_dim {} != stage1 phi_dim {}",
                self.stage2.arch.phi_dim, self.stage1.arch.phi_dim
            )));
        }
        Ok(())
    }
}

/// Canonical artifact locations for one run directory. Ablation runs use
/// their own root but share the parent run's dataset.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self { root: out_dir.to_path_buf(), data: out_dir.join("data") }
    }

    fn ablation(out_dir: &Path, preset: &str) -> Self {
        Self { root: out_dir.join("ablations").join(preset), data: out_dir.join("data") }
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join("manifest.json")
    }
    pub fn pose_ckpt(&self) -> PathBuf {
        self.root.join("pose.ckpt")
    }
    pub fn estimators_ckpt(&self) -> PathBuf {
        self.root.join("estimators.ckpt")
    }
    pub fn stage1_ckpt(&self) -> PathBuf {
        self.root.join("stage1.ckpt")
    }
    pub fn stage2_ckpt(&self) -> PathBuf {
        self.root.join("stage2.ckpt")
    }
    pub fn animator_ckpt(&self) -> PathBuf {
        self.root.join("animator.ckpt")
    }
    pub fn loss_csv(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_loss.csv"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    fn snapshot(&self, command: &str, config: &RunConfig) -> Result<()> {
        let dir = self.root.join("configs");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let text = toml::to_string_pretty(config)
            .map_err(|e| Error::validation(format!("config serialization: {e}")))?;
        let path = dir.join(format!("{command}.toml"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn require(&self, path: &Path, produced_by: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::missing(format!(
                "{} not found — run `marionette {produced_by}` first",
                path.display()
            )))
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "marionette",
    version,
    about = "Audio-driven talking-head motion generation on a synthetic world"
)]
pub struct Cli {
    /// Run-configuration TOML file (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset (clip CSVs, source frames, manifest).
    #[command(name = "gen-data")]
    GenData(GenDataArgs),
    /// Train the diffusion head-pose generator.
    #[command(name = "train-pose")]
    TrainPose(TrainPoseArgs),
    /// Train expression stage 1 (frame-wise lip distillation).
    #[command(name = "train-expr1")]
    TrainExpr1(TrainArgs),
    /// Train expression stage 2 (temporal eye-motion generator).
    #[command(name = "train-expr2")]
    TrainExpr2(TrainArgs),
    /// Train the face animator (and the estimators it is graded by).
    #[command(name = "train-animator")]
    TrainAnimator(TrainArgs),
    /// Run the full pipeline on one clip: sample poses, predict
    /// expressions, render frames.
    #[command(name = "animate")]
    Animate(AnimateArgs),
    /// Evaluate generated motion against held-out clips.
    #[command(name = "eval")]
    Eval(EvalArgs),
    /// Emit the standard figure set for a finished run.
    #[command(name = "plot")]
    Plot,
    /// Retrain one component with a named ablation preset.
    #[command(name = "ablate")]
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Overwrite an existing non-empty dataset directory.
    #[arg(long)]
    pub force: bool,
    /// Override the configured clip count.
    #[arg(long)]
    pub clips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainPoseArgs {
    /// Override the configured optimization step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance training mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Noise schedule as `steps:beta_start:beta_end`, e.g. `50:1e-4:0.05`.
    #[arg(long)]
    pub schedule: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Separate,
    Shared,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Override the configured optimization step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    /// Dataset clip supplying the source frame, start state, and the
    /// expression-driving audio.
    #[arg(long, default_value_t = 0)]
    pub clip: usize,
    /// Optional second clip whose audio drives the head pose instead,
    /// for multi-modal driving. Defaults to `--clip`.
    #[arg(long)]
    pub pose_clip: Option<usize>,
    /// Driving gaze yaw as a fraction of pi in [-0.5, 0.5]; defaults to
    /// the gaze recovered from the source frame.
    #[arg(long, allow_negative_numbers = true)]
    pub gaze_yaw: Option<f64>,
    /// Driving gaze pitch as a fraction of pi in [-0.5, 0.5]; defaults to
    /// the gaze recovered from the source frame.
    #[arg(long, allow_negative_numbers = true)]
    pub gaze_pitch: Option<f64>,
    /// Override the configured guidance weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Truncate the driving audio to this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Override the configured sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output subdirectory name under the run directory.
    #[arg(long, default_value = "animate")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Override the configured guidance weight.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    /// Override the ablated component's optimization step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Ablation presets, each flipping exactly one design toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Denoiser without self-attention sublayers.
    WoAttention,
    /// Stage 2 chained through an untrained (random, frozen) stage 1.
    WoStage1,
    /// Stage 1 trained without the eye-feature input; no stage 2.
    WoStage2,
    /// Stage 1 regressed onto ground-truth mouths instead of the teacher.
    WoDistill,
    /// Animator reconstruction loss without the mouth/eye mask weighting.
    WoMask,
    /// Stage 2 without the eye-feature discriminator.
    WoDeye,
    /// Stage 2 without the temporal expression discriminator.
    WoDte,
    /// Stage 2 without the temporal eye-feature discriminator.
    WoDtf,
    /// Stage 2 without the SSIM term.
    WoSsim,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::WoAttention => "wo-attention",
            Preset::WoStage1 => "wo-stage1",
            Preset::WoStage2 => "wo-stage2",
            Preset::WoDistill => "wo-distill",
            Preset::WoMask => "wo-mask",
            Preset::WoDeye => "wo-deye",
            Preset::WoDte => "wo-dte",
            Preset::WoDtf => "wo-dtf",
            Preset::WoSsim => "wo-ssim",
        }
    }
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Run one parsed command to completion. Kept separate from [`main`] so
/// tests can drive commands in-process.
pub fn run(cli: Cli) -> Result<()> {
    let mut config =
        match &cli.config { Some(p) => RunConfig::load(p)?, None => RunConfig::default() };
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    config.validate()?;
    match cli.command {
        Command::GenData(args) => cmd_gen_data(config, &args),
        Command::TrainPose(args) => cmd_train_pose(config, &args),
        Command::TrainExpr1(args) => cmd_train_expr1(config, &args),
        Command::TrainExpr2(args) => cmd_train_expr2(config, &args),
        Command::TrainAnimator(args) => cmd_train_animator(config, &args),
        Command::Animate(args) => cmd_animate(config, &args),
        Command::Eval(args) => cmd_eval(config, &args),
        Command::Plot => cmd_plot(config),
        Command::Ablate(args) => cmd_ablate(config, &args),
    }
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(mut config: RunConfig, args: &GenDataArgs) -> Result<()> {
    if let Some(clips) = args.clips {
        if clips == 0 {
            return Err(Error::validation("empty dataset: --clips must be at least 1"));
        }
        config.world.num_clips = clips;
        if config.eval_clips >= clips {
            config.eval_clips = (clips - 1).max(1).min(config.eval_clips);
        }
    }
    config.validate()?;
    let paths = RunPaths::new(&config.out_dir);
    let non_empty =
        paths.data.is_dir() && paths.data.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !args.force {
            return Err(Error::validation(format!(
                "dataset directory {} is not empty; pass --force to regenerate",
                paths.data.display()
            )));
        }
        std::fs::remove_dir_all(&paths.data).map_err(|e| Error::io(&paths.data, e))?;
    }
    paths.snapshot("gen-data", &config)?;

    let dataset = Dataset::generate(config.world.clone(), &paths.data)?;
    let mut manifest_clips = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let clip = dataset.load_clip(i)?;
        let frame = render_face(
            &dataset.world.basis,
            &clip.meta.identity,
            clip.pose.data.row(0),
            clip.expr.data.row(0),
            clip.gaze.direction(0),
        );
        let dir = &dataset.clip_dirs[i];
        plot::save_frame_png(&dir.join("source.png"), &frame.image)?;
        let rel = dir.file_name().unwrap().to_string_lossy().to_string();
        let mut files: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().to_string())
            .collect();
        files.sort();
        manifest_clips.push(serde_json::json!({ "index": i, "dir": rel, "files": files }));
    }
    let manifest = serde_json::json!({
        "generator_version": dataset.load_clip(0)?.meta.generator_version,
        "num_clips": dataset.len(),
        "frames_per_clip": config.world.frames_per_clip,
        "fps": config.world.fps,
        "seed": config.world.seed,
        "clips": manifest_clips,
    });
    let path = paths.manifest();
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!(
        "generated {} clips x {} frames under {}",
        dataset.len(),
        config.world.frames_per_clip,
        paths.data.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared plumbing for the training commands

fn open_dataset(paths: &RunPaths) -> Result<Dataset> {
    if !paths.data.join("world.json").exists() {
        return Err(Error::missing(format!(
            "dataset at {} not found — run `marionette gen-data` first",
            paths.data.display()
        )));
    }
    Dataset::open(&paths.data)
}

/// Training clips come from the front of the dataset, evaluation clips
/// from the back; the two never overlap.
fn split_clips(config: &RunConfig, dataset: &Dataset) -> Result<(Vec<SyntheticClip>, Vec<SyntheticClip>)> {
    let all = dataset.load_all()?;
    if config.eval_clips >= all.len() {
        return Err(Error::validation(format!(
            "eval_clips {} leaves no training clips of {}",
            config.eval_clips,
            all.len()
        )));
    }
    let split = all.len() - config.eval_clips;
    let mut train = all;
    let eval = train.split_off(split);
    Ok((train, eval))
}

fn write_csv(path: &Path, header: &str, rows: Vec<String>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut text = String::with_capacity(rows.len() * 24 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_pose_loss(path: &Path, logs: &[TrainLog]) -> Result<()> {
    let header = if logs.len() > 1 { "step,conditional,unconditional" } else { "step,conditional" };
    let rows = logs[0]
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut line = format!("{},{}", r.step, r.loss);
            if let Some(second) = logs.get(1) {
                line.push_str(&format!(",{}", second[i].loss));
            }
            line
        })
        .collect();
    write_csv(path, header, rows)
}

fn write_stage2_loss(path: &Path, log: &[Stage2LogRow]) -> Result<()> {
    let rows = log
        .iter()
        .map(|r| format!("{},{},{},{},{},{}", r.step, r.gen, r.d_eye, r.d_te, r.d_tf, r.diversity))
        .collect();
    write_csv(path, "step,gen,d_eye,d_te,d_tf,diversity", rows)
}

fn write_animator_loss(path: &Path, log: &[AnimatorLogRow]) -> Result<()> {
    let rows =
        log.iter().map(|r| format!("{},{},{},{},{}", r.step, r.gen, r.rec, r.gaze, r.disc)).collect();
    write_csv(path, "step,gen,rec,gaze,disc", rows)
}

/// Parse a loss CSV back into (column names, numeric rows).
fn read_loss_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::validation(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        rows.push(row.map_err(|e| Error::validation(format!("{}: {e}", path.display())))?);
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// train-pose / train-expr1 / train-expr2 / train-animator

fn cmd_train_pose(mut config: RunConfig, args: &TrainPoseArgs) -> Result<()> {
    if let Some(steps) = args.steps {
        config.pose.steps = steps;
    }
    if let Some(mode) = args.mode {
        config.pose.diffusion.mode = match mode {
            ModeArg::Separate => CfgMode::Separate,
            ModeArg::Shared => CfgMode::SharedDropout,
        };
    }
    if let Some(spec) = &args.schedule {
        config.pose.diffusion.schedule = parse_schedule(spec)?;
    }
    let paths = RunPaths::new(&config.out_dir);
    let dataset = open_dataset(&paths)?;
    let (train, _) = split_clips(&config, &dataset)?;
    paths.snapshot("train-pose", &config)?;

    let (model, logs) = train_pose(&train, &config.pose)?;
    model.save(&paths.pose_ckpt())?;
    write_pose_loss(&paths.loss_csv("pose"), &logs)?;
    let last = logs[0].last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pose model trained for {} steps on {} clips (final loss {last:.4}) -> {}",
        config.pose.steps,
        train.len(),
        paths.pose_ckpt().display()
    );
    Ok(())
}

fn parse_schedule(spec: &str) -> Result<crate::diffusion::ScheduleConfig> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::validation(format!(
            "schedule `{spec}` must be steps:beta_start:beta_end"
        )));
    }
    let steps = parts[0]
        .parse()
        .map_err(|e| Error::validation(format!("schedule steps `{}`: {e}", parts[0])))?;
    let beta_start = parts[1]
        .parse()
        .map_err(|e| Error::validation(format!("schedule beta_start `{}`: {e}", parts[1])))?;
    let beta_end = parts[2]
        .parse()
        .map_err(|e| Error::validation(format!("schedule beta_end `{}`: {e}", parts[2])))?;
    Ok(crate::diffusion::ScheduleConfig { steps, beta_start, beta_end })
}

fn cmd_train_expr1(mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(steps) = args.steps {
        config.stage1.steps = steps;
    }
    let paths = RunPaths::new(&config.out_dir);
    let dataset = open_dataset(&paths)?;
    let (train, _) = split_clips(&config, &dataset)?;
    paths.snapshot("train-expr1", &config)?;

    let (model, log) = train_stage1(&dataset.world, &train, &config.stage1)?;
    model.save(&paths.stage1_ckpt())?;
    let rows = log.iter().map(|r| format!("{},{}", r.step, r.loss)).collect();
    write_csv(&paths.loss_csv("stage1"), "step,loss", rows)?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "stage 1 trained for {} steps on {} clips (final loss {last:.4}) -> {}",
        config.stage1.steps,
        train.len(),
        paths.stage1_ckpt().display()
    );
    Ok(())
}

fn cmd_train_expr2(mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(steps) = args.steps {
        config.stage2.steps = steps;
    }
    let paths = RunPaths::new(&config.out_dir);
    let dataset = open_dataset(&paths)?;
    let (train, _) = split_clips(&config, &dataset)?;
    paths.require(&paths.stage1_ckpt(), "train-expr1")?;
    paths.snapshot("train-expr2", &config)?;

    let stage1 = Stage1Model::load(&paths.stage1_ckpt())?;
    let (model, log) = train_stage2(&dataset.world, &train, &stage1, &config.stage2)?;
    model.save(&paths.stage2_ckpt())?;
    write_stage2_loss(&paths.loss_csv("stage2"), &log)?;
    let last = log.last().map(|r| r.gen).unwrap_or(f64::NAN);
    println!(
        "stage 2 trained for {} steps on {} clips (final generator loss {last:.4}) -> {}",
        config.stage2.steps,
        train.len(),
        paths.stage2_ckpt().display()
    );
    Ok(())
}

/// Load the frozen estimators, training them first if no checkpoint
/// exists. A freshly trained estimator must clear its accuracy gate,
/// otherwise everything graded by it would be meaningless.
fn load_or_train_estimators(
    config: &RunConfig,
    paths: &RunPaths,
    world: &World,
) -> Result<FaceEstimators> {
    let path = paths.estimators_ckpt();
    if path.exists() {
        return FaceEstimators::load(&path);
    }
    println!("training face estimators ({} samples)...", config.estimators.samples);
    let (model, report) = train_estimators(world, &config.estimators)?;
    if !report.meets_thresholds() {
        return Err(Error::divergence(format!(
            "estimator accuracy gate failed: gaze MAE {:.4}, scalar MAE {:.4}, pose MAE {:.4}",
            report.gaze_mae, report.scalar_mae, report.pose_mae
        )));
    }
    model.save(&path)?;
    let report_path = paths.root.join("estimators.json");
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    println!(
        "estimators ready (gaze MAE {:.4}, scalar MAE {:.4}) -> {}",
        report.gaze_mae,
        report.scalar_mae,
        path.display()
    );
    Ok(model)
}

fn cmd_train_animator(mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(steps) = args.steps {
        config.animator.steps = steps;
    }
    let paths = RunPaths::new(&config.out_dir);
    let dataset = open_dataset(&paths)?;
    let (train, _) = split_clips(&config, &dataset)?;
    paths.snapshot("train-animator", &config)?;

    let estimators = load_or_train_estimators(&config, &paths, &dataset.world)?;
    let (model, log) = train_animator(&dataset.world.basis, &train, &estimators, &config.animator)?;
    model.save(&paths.animator_ckpt())?;
    write_animator_loss(&paths.loss_csv("animator"), &log)?;
    let report = model.codebook.report(&model.params);
    let last = log.last().map(|r| r.rec).unwrap_or(f64::NAN);
    println!(
        "animator trained for {} steps on {} clips (final rec {last:.4}, codebook off-diag {:.2e}) -> {}",
        config.animator.steps,
        train.len(),
        report.max_off_diag,
        paths.animator_ckpt().display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// animate

fn cmd_animate(config: RunConfig, args: &AnimateArgs) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    let dataset = open_dataset(&paths)?;
    paths.require(&paths.pose_ckpt(), "train-pose")?;
    paths.require(&paths.stage1_ckpt(), "train-expr1")?;
    paths.require(&paths.animator_ckpt(), "train-animator")?;
    if args.clip >= dataset.len() || args.pose_clip.map_or(false, |c| c >= dataset.len()) {
        return Err(Error::validation(format!(
            "clip index out of range: dataset has {} clips",
            dataset.len()
        )));
    }
    for axis in [args.gaze_yaw, args.gaze_pitch].into_iter().flatten() {
        if !(-0.5..=0.5).contains(&axis) {
            return Err(Error::validation(format!(
                "gaze component {axis} outside [-0.5, 0.5] (fraction of pi)"
            )));
        }
    }
    let gamma = args.gamma.unwrap_or(config.gamma);
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::validation(format!("gamma {gamma} must lie in (0, 1]")));
    }
    paths.snapshot("animate", &config)?;

    let clip = dataset.load_clip(args.clip)?;
    let pose_source = match args.pose_clip {
        Some(i) => dataset.load_clip(i)?,
        None => clip.clone(),
    };
    let mut audio = clip.audio.clone();
    let mut pose_audio = pose_source.audio.clone();
    if pose_audio.frames() != audio.frames() {
        return Err(Error::validation(format!(
            "pose-driving audio has {} frames but expression audio has {}",
            pose_audio.frames(),
            audio.frames()
        )));
    }
    if (pose_audio.fps - audio.fps).abs() > 1e-12 {
        return Err(Error::validation("driving audio streams disagree on fps"));
    }
    if let Some(n) = args.frames {
        if n == 0 || n > audio.frames() {
            return Err(Error::validation(format!(
                "--frames {n} outside 1..={}",
                audio.frames()
            )));
        }
        audio.data = audio.data.slice(ndarray::s![..n, ..]).to_owned();
        pose_audio.data = pose_audio.data.slice(ndarray::s![..n, ..]).to_owned();
    }

    let pose_model = PoseDiffusion::load(&paths.pose_ckpt())?;
    let stage1 = Stage1Model::load(&paths.stage1_ckpt())?;
    let stage2 = if paths.stage2_ckpt().exists() {
        Some(Stage2Model::load(&paths.stage2_ckpt())?)
    } else {
        None
    };
    let pipeline = ExpressionPipeline { stage1, stage2 };
    let animator = AnimatorModel::load(&paths.animator_ckpt())?;

    // Source frame: the chosen clip's first frame.
    let source = render_face(
        &dataset.world.basis,
        &clip.meta.identity,
        clip.pose.data.row(0),
        clip.expr.data.row(0),
        clip.gaze.direction(0),
    );

    // Default driving gaze: whatever the estimator reads off the source.
    let (yaw, pitch) = match (args.gaze_yaw, args.gaze_pitch) {
        (Some(y), Some(p)) => (y, p),
        (y, p) => {
            paths.require(&paths.estimators_ckpt(), "train-animator")?;
            let estimators = FaceEstimators::load(&paths.estimators_ckpt())?;
            let (gaze, _, _) = estimators.estimate(&source.image.pixels);
            (
                y.unwrap_or(gaze[0].clamp(-0.5, 0.5)),
                p.unwrap_or(gaze[1].clamp(-0.5, 0.5)),
            )
        }
    };

    let seed = args.seed.unwrap_or(config.seed);
    let pose = pose_model.sample(
        &pose_audio,
        pose_source.pose.data.row(0),
        gamma,
        derive_seed(seed, "animate.pose"),
    )?;
    let (expr, eye) =
        pipeline.infer(&audio, clip.expr.data.row(0), derive_seed(seed, "animate.expr"));
    let gaze = constant_gaze(audio.fps, audio.frames(), GazeDirection { yaw, pitch });
    let frames = animator.animate(&source.image, &pose, &expr, &gaze)?;

    let out = paths.root.join(&args.name);
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    pose.save_csv(&out.join("pose.csv"))?;
    expr.save_csv(&out.join("expr.csv"))?;
    eye.save_csv(&out.join("eye.csv"))?;
    gaze.save_csv(&out.join("gaze.csv"))?;
    plot::save_frame_png(&out.join("source.png"), &source.image)?;
    for (t, frame) in frames.iter().enumerate() {
        plot::save_frame_png(&frames_dir.join(format!("frame_{t:04}.png")), frame)?;
    }
    let summary = serde_json::json!({
        "clip": args.clip,
        "pose_clip": args.pose_clip.unwrap_or(args.clip),
        "frames": frames.len(),
        "gamma": gamma,
        "seed": seed,
        "gaze_yaw": yaw,
        "gaze_pitch": pitch,
        "stage2": pipeline.stage2.is_some(),
    });
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    println!("animated {} frames -> {}", frames.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Sample and score the held-out clips: generated pose via the diffusion
/// sampler, generated expressions via the two-stage pipeline, references
/// straight from the world.
fn eval_metrics(
    world: &World,
    eval_clips: &[SyntheticClip],
    pose_model: &PoseDiffusion,
    pipeline: &ExpressionPipeline,
    gamma: f64,
    seed: u64,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(eval_clips.len());
    for (i, clip) in eval_clips.iter().enumerate() {
        let pose = pose_model.sample(
            &clip.audio,
            clip.pose.data.row(0),
            gamma,
            derive_seed(seed, &format!("eval.pose.{i}")),
        )?;
        let (expr, _) = pipeline.infer(
            &clip.audio,
            clip.expr.data.row(0),
            derive_seed(seed, &format!("eval.expr.{i}")),
        );
        rows.push(EvalClip {
            pose_generated: pose,
            pose_reference: clip.pose.clone(),
            expr_generated: expr,
            expr_reference: clip.expr.clone(),
            envelope: clip.meta.envelope.clone(),
        });
    }
    metrics::evaluate(&world.basis, &rows)
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(report)? + "\n";
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let txt_path = dir.join("metrics.txt");
    std::fs::write(&txt_path, report.table()).map_err(|e| Error::io(&txt_path, e))
}

fn cmd_eval(config: RunConfig, args: &EvalArgs) -> Result<()> {
    let gamma = args.gamma.unwrap_or(config.gamma);
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::validation(format!("gamma {gamma} must lie in (0, 1]")));
    }
    let paths = RunPaths::new(&config.out_dir);
    let dataset = open_dataset(&paths)?;
    let (_, eval) = split_clips(&config, &dataset)?;
    paths.require(&paths.pose_ckpt(), "train-pose")?;
    paths.require(&paths.stage1_ckpt(), "train-expr1")?;
    paths.snapshot("eval", &config)?;

    let pose_model = PoseDiffusion::load(&paths.pose_ckpt())?;
    let stage1 = Stage1Model::load(&paths.stage1_ckpt())?;
    let stage2 = if paths.stage2_ckpt().exists() {
        Some(Stage2Model::load(&paths.stage2_ckpt())?)
    } else {
        None
    };
    let pipeline = ExpressionPipeline { stage1, stage2 };
    let report = eval_metrics(&dataset.world, &eval, &pose_model, &pipeline, gamma, config.seed)?;
    write_report(&paths.eval_dir(), &report)?;
    print!("{}", report.table());
    println!("report -> {}", paths.eval_dir().join("metrics.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// plot

fn normalized(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        values.iter().map(|v| v / max).collect()
    } else {
        values.to_vec()
    }
}

fn cmd_plot(config: RunConfig) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    let dataset_ok = paths.data.join("world.json").exists();
    let mut missing: Vec<String> = Vec::new();
    if !dataset_ok {
        missing.push(format!("{} (run `marionette gen-data`)", paths.data.display()));
    }
    for (file, cmd) in [
        (paths.loss_csv("pose"), "train-pose"),
        (paths.loss_csv("stage1"), "train-expr1"),
        (paths.loss_csv("stage2"), "train-expr2"),
        (paths.loss_csv("animator"), "train-animator"),
        (paths.pose_ckpt(), "train-pose"),
        (paths.stage1_ckpt(), "train-expr1"),
        (paths.stage2_ckpt(), "train-expr2"),
        (paths.animator_ckpt(), "train-animator"),
    ] {
        if !file.exists() {
            missing.push(format!("{} (run `marionette {cmd}`)", file.display()));
        }
    }
    if !missing.is_empty() {
        return Err(Error::missing(format!("plot inputs missing:\n  {}", missing.join("\n  "))));
    }
    paths.snapshot("plot", &config)?;

    let dataset = open_dataset(&paths)?;
    let (_, eval) = split_clips(&config, &dataset)?;
    let plots = paths.plots_dir();
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut emitted: Vec<PathBuf> = Vec::new();

    // Loss curves, one chart per trained component.
    for stage in ["pose", "stage1", "stage2", "animator"] {
        let (header, rows) = read_loss_csv(&paths.loss_csv(stage))?;
        let series: Vec<Series> = header
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, name)| {
                Series::new(
                    name.clone(),
                    rows.iter().map(|r| (r[0], r[c])).collect::<Vec<_>>(),
                )
            })
            .collect();
        let path = plots.join(format!("loss_{stage}.png"));
        plot::line_chart(&path, &series)?;
        emitted.push(path);
    }

    // Generated pose speed against the driving loudness envelope.
    let pose_model = PoseDiffusion::load(&paths.pose_ckpt())?;
    let clip = &eval[0];
    let sampled = pose_model.sample(
        &clip.audio,
        clip.pose.data.row(0),
        config.gamma,
        derive_seed(config.seed, "plot.pose"),
    )?;
    let env = normalized(&clip.meta.envelope);
    let gen_speed = normalized(&metrics::head_speed(&sampled));
    let ref_speed = normalized(&metrics::head_speed(&clip.pose));
    let path = plots.join("pose_vs_envelope.png");
    plot::line_chart(
        &path,
        &[
            Series::from_values("audio envelope", &env),
            Series::from_values("generated head speed", &gen_speed),
            Series::from_values("reference head speed", &ref_speed),
        ],
    )?;
    emitted.push(path);

    // Blink raster: reference and generated eye openness, interleaved.
    let stage1 = Stage1Model::load(&paths.stage1_ckpt())?;
    let stage2 = Some(Stage2Model::load(&paths.stage2_ckpt())?);
    let pipeline = ExpressionPipeline { stage1, stage2 };
    let mut rows = Vec::new();
    for (i, clip) in eval.iter().take(4).enumerate() {
        let (expr, _) = pipeline.infer(
            &clip.audio,
            clip.expr.data.row(0),
            derive_seed(config.seed, &format!("plot.blink.{i}")),
        );
        let gen: Vec<f64> = (0..expr.frames())
            .map(|t| {
                let lm = dataset.world.basis.reconstruct(&expr.data.row(t));
                dataset.world.basis.blink_ratio(&lm.points)
            })
            .collect();
        rows.push(clip.meta.blink_openness.clone());
        rows.push(gen);
    }
    let path = plots.join("blink_raster.png");
    plot::blink_raster(&path, &rows)?;
    emitted.push(path);

    // Motion interpolation strip: decode z_R + lambda*eta toward the frame
    // of the first eval clip where the head strays furthest from its start.
    let animator = AnimatorModel::load(&paths.animator_ckpt())?;
    let clip = &eval[0];
    let source = render_face(
        &dataset.world.basis,
        &clip.meta.identity,
        clip.pose.data.row(0),
        clip.expr.data.row(0),
        clip.gaze.direction(0),
    )
    .image;
    let z_r = animator.encode_identity(&source);
    let rows = animator::drive_rows(&clip.pose, &clip.expr, &clip.gaze);
    let pose_drift = |t: usize| {
        (&clip.pose.data.row(t) - &clip.pose.data.row(0)).mapv(f64::abs).sum()
    };
    let target_t = (0..clip.frames())
        .max_by(|&a, &b| pose_drift(a).partial_cmp(&pose_drift(b)).unwrap())
        .unwrap();
    let window = animator::window_at(&rows, target_t, animator.arch.window_radius);
    let rho = animator.driving_feature(&window);
    let (_, eta, _) = animator.navigate(&z_r, &rho);
    let strip: Vec<FrameImage> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&l| animator.decode_latent(&(&z_r + &(&eta * l))))
        .collect();
    let path = plots.join("interpolation.png");
    plot::image_strip(&path, &strip)?;
    emitted.push(path);

    for p in &emitted {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

fn cmd_ablate(config: RunConfig, args: &AblateArgs) -> Result<()> {
    let parent = RunPaths::new(&config.out_dir);
    let paths = RunPaths::ablation(&config.out_dir, args.preset.name());
    let dataset = open_dataset(&parent)?;
    let (train, eval) = split_clips(&config, &dataset)?;
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;

    match args.preset {
        Preset::WoAttention => {
            let mut cfg = config.pose.clone();
            cfg.diffusion.use_attention = false;
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            let mut snapshot = config.clone();
            snapshot.pose = cfg.clone();
            paths.snapshot("ablate", &snapshot)?;
            let (model, logs) = train_pose(&train, &cfg)?;
            model.save(&paths.pose_ckpt())?;
            write_pose_loss(&paths.loss_csv("pose"), &logs)?;
            // Expressions are unaffected; grade with the parent run's
            // expression checkpoints.
            parent.require(&parent.stage1_ckpt(), "train-expr1")?;
            let stage1 = Stage1Model::load(&parent.stage1_ckpt())?;
            let stage2 = if parent.stage2_ckpt().exists() {
                Some(Stage2Model::load(&parent.stage2_ckpt())?)
            } else {
                None
            };
            let pipeline = ExpressionPipeline { stage1, stage2 };
            let report =
                eval_metrics(&dataset.world, &eval, &model, &pipeline, config.gamma, config.seed)?;
            write_report(&paths.eval_dir(), &report)?;
            println!("{}", report.table());
        }
        Preset::WoStage2 => {
            let mut cfg = config.stage1.clone();
            cfg.arch.use_eye_input = false;
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            let mut snapshot = config.clone();
            snapshot.stage1 = cfg.clone();
            paths.snapshot("ablate", &snapshot)?;
            let (model, log) = train_stage1(&dataset.world, &train, &cfg)?;
            model.save(&paths.stage1_ckpt())?;
            let rows = log.iter().map(|r| format!("{},{}", r.step, r.loss)).collect();
            write_csv(&paths.loss_csv("stage1"), "step,loss", rows)?;
            let report = ablation_expr_eval(&config, &parent, &dataset, &eval, model, None)?;
            write_report(&paths.eval_dir(), &report)?;
            println!("{}", report.table());
        }
        Preset::WoDistill => {
            let mut cfg = config.stage1.clone();
            cfg.distill = false;
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            let mut snapshot = config.clone();
            snapshot.stage1 = cfg.clone();
            paths.snapshot("ablate", &snapshot)?;
            let (model, log) = train_stage1(&dataset.world, &train, &cfg)?;
            model.save(&paths.stage1_ckpt())?;
            let rows = log.iter().map(|r| format!("{},{}", r.step, r.loss)).collect();
            write_csv(&paths.loss_csv("stage1"), "step,loss", rows)?;
            let report = ablation_expr_eval(&config, &parent, &dataset, &eval, model, None)?;
            write_report(&paths.eval_dir(), &report)?;
            println!("{}", report.table());
        }
        Preset::WoStage1 => {
            // Skip stage-1 pretraining: chain stage 2 through a frozen
            // random stage 1 with the same architecture.
            let mut cfg = config.stage2.clone();
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            let mut snapshot = config.clone();
            snapshot.stage2 = cfg.clone();
            paths.snapshot("ablate", &snapshot)?;
            let stage1 = Stage1Model::new(config.stage1.arch.clone(), config.stage1.seed);
            stage1.save(&paths.stage1_ckpt())?;
            let (model, log) = train_stage2(&dataset.world, &train, &stage1, &cfg)?;
            model.save(&paths.stage2_ckpt())?;
            write_stage2_loss(&paths.loss_csv("stage2"), &log)?;
            let report =
                ablation_expr_eval(&config, &parent, &dataset, &eval, stage1, Some(model))?;
            write_report(&paths.eval_dir(), &report)?;
            println!("{}", report.table());
        }
        Preset::WoDeye | Preset::WoDte | Preset::WoDtf | Preset::WoSsim => {
            let mut cfg = config.stage2.clone();
            match args.preset {
                Preset::WoDeye => cfg.use_d_eye = false,
                Preset::WoDte => cfg.use_d_te = false,
                Preset::WoDtf => cfg.use_d_tf = false,
                Preset::WoSsim => cfg.lambda_ssim = 0.0,
                _ => unreachable!(),
            }
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            let mut snapshot = config.clone();
            snapshot.stage2 = cfg.clone();
            paths.snapshot("ablate", &snapshot)?;
            parent.require(&parent.stage1_ckpt(), "train-expr1")?;
            let stage1 = Stage1Model::load(&parent.stage1_ckpt())?;
            let (model, log) = train_stage2(&dataset.world, &train, &stage1, &cfg)?;
            model.save(&paths.stage2_ckpt())?;
            write_stage2_loss(&paths.loss_csv("stage2"), &log)?;
            let report =
                ablation_expr_eval(&config, &parent, &dataset, &eval, stage1, Some(model))?;
            write_report(&paths.eval_dir(), &report)?;
            println!("{}", report.table());
        }
        Preset::WoMask => {
            let mut cfg = config.animator.clone();
            cfg.use_mask = false;
            if let Some(steps) = args.steps {
                cfg.steps = steps;
            }
            let mut snapshot = config.clone();
            snapshot.animator = cfg.clone();
            paths.snapshot("ablate", &snapshot)?;
            let estimators = load_or_train_estimators(&config, &parent, &dataset.world)?;
            let (model, log) =
                train_animator(&dataset.world.basis, &train, &estimators, &cfg)?;
            model.save(&paths.animator_ckpt())?;
            write_animator_loss(&paths.loss_csv("animator"), &log)?;
            let report = model.codebook.report(&model.params);
            let summary = serde_json::json!({
                "preset": args.preset.name(),
                "codebook_max_off_diag": report.max_off_diag,
                "codebook_max_norm_error": report.max_norm_error,
                "final": log.last().map(|r| serde_json::json!({
                    "gen": r.gen, "rec": r.rec, "gaze": r.gaze, "disc": r.disc,
                })),
            });
            let path = paths.root.join("report.json");
            let text = serde_json::to_string_pretty(&summary)? + "\n";
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    println!("ablation `{}` -> {}", args.preset.name(), paths.root.display());
    Ok(())
}

/// Grade an expression-side ablation: ablated stage 1/2 where given, the
/// parent run's pose model for the shared pose stream.
fn ablation_expr_eval(
    config: &RunConfig,
    parent: &RunPaths,
    dataset: &Dataset,
    eval: &[SyntheticClip],
    stage1: Stage1Model,
    stage2: Option<Stage2Model>,
) -> Result<MetricReport> {
    parent.require(&parent.pose_ckpt(), "train-pose")?;
    let pose_model = PoseDiffusion::load(&parent.pose_ckpt())?;
    let pipeline = ExpressionPipeline { stage1, stage2 };
    eval_metrics(&dataset.world, eval, &pose_model, &pipeline, config.gamma, config.seed)
}

// ---------------------------------------------------------------------------
// output hashing (determinism checks)

/// SHA-256 over a directory tree: relative paths and file bytes, visited
/// in sorted order. Two equal trees hash equally on any machine.
pub fn hash_tree(root: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, hasher: &mut Sha256) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if path.is_dir() {
                hasher.update(rel.as_bytes());
                hasher.update([b'/']);
                walk(root, &path, hasher)?;
            } else {
                hasher.update(rel.as_bytes());
                hasher.update([0]);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                hasher.update((bytes.len() as u64).to_le_bytes());
                hasher.update(&bytes);
            }
        }
        Ok(())
    }
    let mut hasher = Sha256::new();
    walk(root, root, &mut hasher)?;
    Ok(format!("{:x}", hasher.finalize()))
}

/// Convenience wrapper used by tests and examples: run one command line
/// in-process, as `marionette <args...>` would.
pub fn run_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::validation(format!("argument parsing: {e}")))?;
    run(cli)
}
