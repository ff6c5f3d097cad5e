//! The `hiersoc` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hiersoc_core::imitation::{expert_windows, ABLATION_TAGS};
use hiersoc_core::stats::{clip_poses, motion_intensity_many, pose_diversity};
use hiersoc_core::synth::{synth_clips, Behavior};

use crate::checkpoint::{load_model, load_trainer, save_trainer};
use crate::clipfile::{load_clip, save_clip};
use crate::config::{parse_horizons, Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::report::ReportTable;
use crate::run;

/// Pose diversity thresholds reported by `stats`, in mm.
pub const DIVERSITY_THRESHOLDS_MM: [f64; 2] = [50.0, 100.0];

#[derive(Debug, Parser)]
#[command(name = "hiersoc", version, about = "Level-k imitation learning for multi-person motion prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic clips as MPC1 files.
    Synth(SynthArgs),
    /// Pose diversity and motion intensity of clips, as JSON.
    Stats(StatsArgs),
    /// Train a model on clips and write a checkpoint.
    Train(TrainArgs),
    /// Error table of a checkpoint against clips.
    Eval(EvalArgs),
    /// Predict the future of one clip.
    Predict(PredictArgs),
    /// Train and evaluate every ablation.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of reasoning levels K.
    #[arg(long = "k")]
    pub levels: Option<usize>,
    /// GAIL weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Ablation tag, a to h.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Comma-separated horizons in ms.
    #[arg(long)]
    pub horizons: Option<String>,
    /// Expected clip frame rate.
    #[arg(long)]
    pub fps: Option<f64>,
}

impl Common {
    /// Defaults, then the config file, then flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides()?)?;
        Ok(cfg)
    }

    fn overrides(&self) -> Result<Overrides> {
        if let Some(a) = &self.ablation {
            if !ABLATION_TAGS.contains(&a.as_str()) {
                return Err(Error::Config(format!("unknown ablation {a:?}, expected one of a..h")));
            }
        }
        Ok(Overrides {
            seed: self.seed,
            levels: self.levels,
            lambda: self.lambda,
            ablation: self.ablation.clone(),
            horizons_ms: self.horizons.as_deref().map(parse_horizons).transpose()?,
            fps: self.fps,
            steps: None,
        })
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// constant-velocity, circular or pursuit-evade.
    #[arg(long)]
    pub behavior: Option<String>,
    #[arg(long)]
    pub persons: Option<usize>,
    #[arg(long)]
    pub joints: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub speed: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Output JSON file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    pub clips: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    pub clips: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated horizons in ms.
    #[arg(long)]
    pub horizons: Option<String>,
    /// Expected clip frame rate.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Add one row per reasoning level.
    #[arg(long)]
    pub per_level: bool,
    /// Frames between evaluation windows.
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
    /// Output file; `.csv` writes CSV, anything else JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    pub clips: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Predicted clip to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Reasoning level to roll out; the top level by default.
    #[arg(long)]
    pub level: Option<usize>,
    pub clip: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output table; `.csv` writes CSV, anything else JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Comma-separated subset of ablation tags.
    #[arg(long)]
    pub tags: Option<String>,
    pub clips: Vec<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command),
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(Error::Config(e.to_string().trim_end().to_string())),
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Stats(a) => {
            let report = cmd_stats(&a.clips)?;
            emit(a.out.as_deref(), &serde_json::to_string_pretty(&report).expect("json"))
        }
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let table = cmd_eval(&a)?;
            emit_table(a.out.as_deref(), &table)
        }
        Command::Predict(a) => cmd_predict(&a),
        Command::Sweep(a) => {
            let table = cmd_sweep(&a)?;
            emit_table(a.out.as_deref(), &table)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, format!("{text}\n")).map_err(|e| Error::Io(format!("writing {}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit_table(out: Option<&Path>, table: &ReportTable) -> Result<()> {
    print!("{}", table.render());
    match out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => fs::write(p, table.to_csv())
            .map_err(|e| Error::Io(format!("writing {}: {e}", p.display()))),
        Some(p) => emit(Some(p), &table.to_json()),
        None => Ok(()),
    }
}

fn parse_behavior(s: &str) -> Result<Behavior> {
    match s {
        "constant-velocity" => Ok(Behavior::ConstantVelocity),
        "circular" => Ok(Behavior::Circular),
        "pursuit-evade" => Ok(Behavior::PursuitEvade),
        _ => Err(Error::Config(format!("unknown behavior {s:?}"))),
    }
}

/// Writes `count` clips as `clip_0000.mpc`, ... and returns their paths.
pub fn cmd_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = a.common.run_config()?.synth;
    if let Some(b) = &a.behavior {
        cfg.behavior = parse_behavior(b)?;
    }
    cfg.persons = a.persons.unwrap_or(cfg.persons);
    cfg.joints = a.joints.unwrap_or(cfg.joints);
    cfg.duration_frames = a.frames.unwrap_or(cfg.duration_frames);
    cfg.speed_mm_s = a.speed.unwrap_or(cfg.speed_mm_s);
    if let Some(f) = a.common.fps {
        cfg.fps = f;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let clips = synth_clips(&cfg, a.count)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io(format!("creating {}: {e}", a.out.display())))?;
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let path = a.out.join(format!("clip_{i:04}.mpc"));
            save_clip(c, &path)?;
            Ok(path)
        })
        .collect()
}

/// Diversity at 50 and 100 mm and per-joint intensity of all clips.
pub fn cmd_stats(paths: &[PathBuf]) -> Result<serde_json::Value> {
    let clips = run::load_clips(paths)?;
    let sk = clips[0].skeleton();
    let poses = clip_poses(&clips);
    let mut diversity = serde_json::Map::new();
    for t in DIVERSITY_THRESHOLDS_MM {
        diversity.insert(format!("{t}"), json!(pose_diversity(&poses, sk, t)?));
    }
    let intensity = motion_intensity_many(&clips)?;
    let per_joint: serde_json::Map<_, _> = sk
        .joint_names()
        .iter()
        .zip(&intensity.per_joint)
        .map(|(n, v)| (n.clone(), json!(v)))
        .collect();
    Ok(json!({
        "clips": clips.len(),
        "poses": poses.len(),
        "fps": sk.fps(),
        "diversity": diversity,
        "intensity_mm_s": {"per_joint": per_joint, "mean": intensity.mean},
    }))
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

/// Trains (or resumes), writes the checkpoint and returns the final table.
pub fn cmd_train(a: &TrainArgs) -> Result<ReportTable> {
    let mut cfg = a.common.run_config()?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let clips = run::load_clips(&a.clips)?;
    let fps = run::clip_fps(&cfg, &clips)?;
    let joints = clips[0].joint_count();
    cfg.validate(joints)?;
    hiersoc_core::metrics::horizon_frames(&cfg.eval.horizons_ms, fps, cfg.mdp.future_frames)
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = load_trainer(p)?;
            if *t.model.config() != cfg.model(joints) {
                return Err(Error::Config("resumed checkpoint's model differs from the run config".into()));
            }
            t.config.steps = cfg.train.steps;
            t
        }
        None => run::new_trainer(&cfg, joints)?,
    };
    let windows = run::windows(&cfg, &clips)?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let file = fs::File::create(&log_path).map_err(|e| Error::Io(format!("creating {}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    run::train(&cfg, &mut trainer, &windows, fps, Some(&mut log))?;
    let table = run::eval_table(&trainer.model, &windows, &cfg.eval.horizons_ms, fps, false)?;
    writeln!(log, "{}", json!({"event": "final", "step": trainer.step, "table": table}))?;
    log.flush()?;
    save_trainer(&trainer, &a.out)?;
    print!("{}", table.render());
    Ok(table)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<ReportTable> {
    let model = load_model(&a.checkpoint)?;
    let clips = run::load_clips(&a.clips)?;
    let fps = clips[0].skeleton().fps();
    if let Some(want) = a.fps {
        if (want - fps).abs() > 1e-9 {
            return Err(Error::Config(format!("--fps {want} but clips are recorded at {fps}")));
        }
    }
    if clips[0].joint_count() != model.config().joints {
        return Err(Error::Data(format!(
            "clips have {} joints, checkpoint expects {}",
            clips[0].joint_count(),
            model.config().joints
        )));
    }
    if a.stride == 0 {
        return Err(Error::Config("--stride must be positive".into()));
    }
    let horizons = match &a.horizons {
        Some(h) => parse_horizons(h)?,
        None => hiersoc_core::metrics::DEFAULT_HORIZONS_MS.to_vec(),
    };
    let mdp = model.config().mdp;
    hiersoc_core::metrics::horizon_frames(&horizons, fps, mdp.future_frames)
        .map_err(|e| Error::Config(e.to_string()))?;
    let windows = expert_windows(&clips, &mdp, a.stride)?;
    run::eval_table(&model, &windows, &horizons, fps, a.per_level)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let clip = load_clip(&a.clip)?;
    let cfg = model.config();
    if clip.frame_count() < cfg.mdp.history_frames {
        return Err(Error::Data(format!(
            "history has {} frames, the model needs {}",
            clip.frame_count(),
            cfg.mdp.history_frames
        )));
    }
    if clip.joint_count() != cfg.joints {
        return Err(Error::Data(format!("clip has {} joints, checkpoint expects {}", clip.joint_count(), cfg.joints)));
    }
    let level = a.level.unwrap_or(model.levels());
    if level > model.levels() {
        return Err(Error::Config(format!("--level {level} exceeds K = {}", model.levels())));
    }
    let history = clip.tail(cfg.mdp.history_frames)?;
    let pred = model.rollout_level(&[&history], level)?.remove(0);
    save_clip(&pred, &a.out)
}

/// Trains every requested ablation from the same config and seed and
/// evaluates each on the training windows.
pub fn cmd_sweep(a: &SweepArgs) -> Result<ReportTable> {
    if a.common.ablation.is_some() {
        return Err(Error::Config("sweep runs every ablation; drop --ablation".into()));
    }
    let tags: Vec<String> = match &a.tags {
        Some(t) => t.split(',').map(|s| s.trim().to_string()).collect(),
        None => ABLATION_TAGS.iter().map(|s| s.to_string()).collect(),
    };
    let clips = run::load_clips(&a.clips)?;
    let base = a.common.run_config()?;
    let fps = run::clip_fps(&base, &clips)?;
    let joints = clips[0].joint_count();
    let mut table = ReportTable::default();
    for tag in &tags {
        let mut common = a.common.clone();
        common.ablation = Some(tag.clone());
        let mut cfg = common.run_config()?;
        if let Some(s) = a.steps {
            cfg.train.steps = s;
        }
        let mut trainer = run::new_trainer(&cfg, joints)?;
        let windows = run::windows(&cfg, &clips)?;
        run::train(&cfg, &mut trainer, &windows, fps, None)?;
        if table.rows.is_empty() {
            let mdp = cfg.mdp;
            let frozen = hiersoc_core::metrics::evaluate(
                hiersoc_core::metrics::frozen_predictor(mdp.future_frames),
                &windows,
                &mdp,
                &cfg.eval.horizons_ms,
                fps,
            )?;
            table.push("Frozen", frozen)?;
        }
        let k = trainer.model.levels();
        let rep = run::evaluate_level(&trainer.model, &windows, k, &cfg.eval.horizons_ms, fps)?;
        table.push(format!("({tag})"), rep)?;
    }
    Ok(table)
}
