//! Training and evaluation runs over clip files.

use std::io::Write;
use std::path::Path;
use std::thread;

use serde_json::json;

use hiersoc_core::imitation::{expert_windows, StepRecord, Trainer};
use hiersoc_core::metrics::{evaluate, frozen_predictor, ErrorReport};
use hiersoc_core::motion::MultiPersonClip;
use hiersoc_core::policy::HierarchicalPolicy;

use crate::clipfile::load_clip;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::ReportTable;

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "HIERSOC_THREADS";

pub fn worker_threads() -> usize {
    let avail = thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail.max(n)),
        _ => avail,
    }
}

/// Loads clips and checks they share agent count, skeleton and frame rate.
pub fn load_clips<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<MultiPersonClip>> {
    if paths.is_empty() {
        return Err(Error::Data("no clip files given".into()));
    }
    let clips = paths.iter().map(load_clip).collect::<Result<Vec<_>>>()?;
    check_clips(&clips)?;
    Ok(clips)
}

pub fn check_clips(clips: &[MultiPersonClip]) -> Result<()> {
    let first = clips.first().ok_or_else(|| Error::Data("no clips".into()))?;
    for c in clips {
        if c.person_count() != first.person_count() || c.skeleton() != first.skeleton() {
            return Err(Error::Data("clips must share agent count, skeleton and fps".into()));
        }
    }
    Ok(())
}

/// Frame rate of the clips, checked against the configured rate if any.
pub fn clip_fps(cfg: &RunConfig, clips: &[MultiPersonClip]) -> Result<f64> {
    let fps = clips[0].skeleton().fps();
    if let Some(want) = cfg.eval.fps {
        if (want - fps).abs() > 1e-9 {
            return Err(Error::Config(format!("configured fps {want} but clips are recorded at {fps}")));
        }
    }
    Ok(fps)
}

pub fn windows(cfg: &RunConfig, clips: &[MultiPersonClip]) -> Result<Vec<MultiPersonClip>> {
    Ok(expert_windows(clips, &cfg.mdp, cfg.data.window_stride)?)
}

/// Rolls out `level` for every history, splitting the batch across threads.
pub fn parallel_rollout(
    model: &HierarchicalPolicy,
    histories: &[&MultiPersonClip],
    level: usize,
    threads: usize,
) -> hiersoc_core::Result<Vec<MultiPersonClip>> {
    let threads = threads.clamp(1, histories.len().max(1));
    if threads == 1 {
        return model.rollout_level(histories, level);
    }
    let chunk = histories.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = histories
            .chunks(chunk)
            .map(|part| s.spawn(move || model.rollout_level(part, level)))
            .collect();
        let mut out = Vec::with_capacity(histories.len());
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate_level(
    model: &HierarchicalPolicy,
    windows: &[MultiPersonClip],
    level: usize,
    horizons_ms: &[u32],
    fps: f64,
) -> Result<ErrorReport> {
    let threads = worker_threads();
    let mdp = model.config().mdp;
    Ok(evaluate(|hs| parallel_rollout(model, hs, level, threads), windows, &mdp, horizons_ms, fps)?)
}

/// Frozen row, the model's level-K row and optionally one row per level.
pub fn eval_table(
    model: &HierarchicalPolicy,
    windows: &[MultiPersonClip],
    horizons_ms: &[u32],
    fps: f64,
    per_level: bool,
) -> Result<ReportTable> {
    let mdp = model.config().mdp;
    let mut table = ReportTable::default();
    let frozen = evaluate(frozen_predictor(mdp.future_frames), windows, &mdp, horizons_ms, fps)?;
    table.push("Frozen", frozen)?;
    let k = model.levels();
    table.push(format!("Ours (K={k})"), evaluate_level(model, windows, k, horizons_ms, fps)?)?;
    if per_level {
        if k == 0 {
            return Err(Error::Config("per-level evaluation needs K >= 1".into()));
        }
        for level in 1..=k {
            table.push(format!("Level-{level}"), evaluate_level(model, windows, level, horizons_ms, fps)?)?;
        }
    }
    Ok(table)
}

/// Builds a trainer from the run config for clips with `joints` joints.
pub fn new_trainer(cfg: &RunConfig, joints: usize) -> Result<Trainer> {
    cfg.validate(joints)?;
    Ok(Trainer::new(&cfg.model(joints), &cfg.discriminator, &cfg.train, &cfg.weights)?)
}

fn log_line(log: &mut Option<&mut dyn Write>, value: serde_json::Value) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{value}")?;
    }
    Ok(())
}

/// Trains until `cfg.train.steps` total steps, writing JSON lines to `log`.
///
/// The first record echoes the effective configuration; then one record
/// per step and, every `eval.every` steps, an evaluation record.
pub fn train(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    windows: &[MultiPersonClip],
    fps: f64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    log_line(
        &mut log,
        json!({"event": "config", "config": cfg, "start_step": trainer.step, "windows": windows.len()}),
    )?;
    let mut records = Vec::new();
    while trainer.step < cfg.train.steps {
        let rec = trainer.train_step(windows).map_err(|e| match e {
            hiersoc_core::Error::NonFinite(m) => Error::Numerical(m),
            other => other.into(),
        })?;
        log_line(&mut log, json!({"event": "step", "record": rec}))?;
        records.push(rec);
        if cfg.eval.every > 0 && trainer.step % cfg.eval.every == 0 {
            let k = trainer.model.levels();
            let rep = evaluate_level(&trainer.model, windows, k, &cfg.eval.horizons_ms, fps)?;
            log_line(&mut log, json!({"event": "eval", "step": trainer.step, "report": rep}))?;
        }
    }
    Ok(records)
}
