//! Prediction error metrics and the horizon-grid evaluation protocol.
//!
//! The error reported for a horizon of `h` frames is the error AT future
//! frame `h` (index `h - 1` of the predicted clip), not a running mean over
//! frames up to `h`. Horizons convert from milliseconds as
//! `h = floor(ms * fps / 1000 + 0.5)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::motion::{frozen_predict, MdpConfig, MultiPersonClip};
use crate::policy::HierarchicalPolicy;

pub const DEFAULT_HORIZONS_MS: [u32; 4] = [400, 600, 800, 1000];

/// Frames after the last observed frame corresponding to `ms`.
pub fn horizon_frame(ms: u32, fps: f64) -> usize {
    libm::floor(ms as f64 * fps / 1000.0 + 0.5) as usize
}

fn check_pair(pred: &MultiPersonClip, gt: &MultiPersonClip, frame: usize) -> Result<()> {
    if pred.person_count() != gt.person_count() || pred.joint_count() != gt.joint_count() {
        bail!(
            Shape,
            "prediction has {}x{} persons x joints, ground truth {}x{}",
            pred.person_count(),
            pred.joint_count(),
            gt.person_count(),
            gt.joint_count()
        );
    }
    if frame >= pred.frame_count() || frame >= gt.frame_count() {
        bail!(Index, "frame {frame} outside {} / {} frames", pred.frame_count(), gt.frame_count());
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Mean Euclidean joint error over all persons and joints at `frame` (0-based).
pub fn mpjpe(pred: &MultiPersonClip, gt: &MultiPersonClip, frame: usize) -> Result<f64> {
    check_pair(pred, gt, frame)?;
    let mut sum = 0.0;
    for p in 0..pred.person_count() {
        for (a, b) in pred.pose(p, frame).chunks_exact(3).zip(gt.pose(p, frame).chunks_exact(3)) {
            sum += dist(a, b);
        }
    }
    Ok(sum / (pred.person_count() * pred.joint_count()) as f64)
}

/// MPJPE after subtracting each pose's own root joint.
pub fn local_error(pred: &MultiPersonClip, gt: &MultiPersonClip, frame: usize) -> Result<f64> {
    check_pair(pred, gt, frame)?;
    let mut sum = 0.0;
    for p in 0..pred.person_count() {
        let (rp, rg) = (pred.root(p, frame), gt.root(p, frame));
        for (a, b) in pred.pose(p, frame).chunks_exact(3).zip(gt.pose(p, frame).chunks_exact(3)) {
            let d: [f64; 3] = core::array::from_fn(|k| (a[k] - rp[k]) - (b[k] - rg[k]));
            sum += dist(&d, &[0.0; 3]);
        }
    }
    Ok(sum / (pred.person_count() * pred.joint_count()) as f64)
}

/// Mean Euclidean error of the root joint over persons.
pub fn root_error(pred: &MultiPersonClip, gt: &MultiPersonClip, frame: usize) -> Result<f64> {
    check_pair(pred, gt, frame)?;
    let sum: f64 = (0..pred.person_count())
        .map(|p| dist(&pred.root(p, frame), &gt.root(p, frame)))
        .sum();
    Ok(sum / pred.person_count() as f64)
}

/// Global, local and root errors (mm) at each horizon.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ErrorReport {
    pub horizons_ms: Vec<u32>,
    pub global_mm: Vec<f64>,
    pub local_mm: Vec<f64>,
    pub root_mm: Vec<f64>,
}

impl ErrorReport {
    /// Mean global error over the horizon grid.
    pub fn mean_global(&self) -> f64 {
        self.global_mm.iter().sum::<f64>() / self.global_mm.len() as f64
    }
}

/// Checks a horizon grid and returns the frame of each horizon.
pub fn horizon_frames(horizons_ms: &[u32], fps: f64, future_frames: usize) -> Result<Vec<usize>> {
    if horizons_ms.is_empty() {
        bail!(Argument, "no evaluation horizons");
    }
    if horizons_ms.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Argument, "horizons must be strictly ascending");
    }
    horizons_ms
        .iter()
        .map(|&ms| {
            let h = horizon_frame(ms, fps);
            if h == 0 || h > future_frames {
                bail!(
                    Argument,
                    "horizon {ms} ms is frame {h} at {fps} fps, outside 1..={future_frames}"
                );
            }
            Ok(h)
        })
        .collect()
}

/// Averages the three metrics over evaluation windows of `T + T'` frames.
///
/// `predict` receives the `T`-frame histories of a batch and returns one
/// `T'`-frame prediction per history.
pub fn evaluate<F>(
    mut predict: F,
    windows: &[MultiPersonClip],
    mdp: &MdpConfig,
    horizons_ms: &[u32],
    fps: f64,
) -> Result<ErrorReport>
where
    F: FnMut(&[&MultiPersonClip]) -> Result<Vec<MultiPersonClip>>,
{
    mdp.validate()?;
    let frames = horizon_frames(horizons_ms, fps, mdp.future_frames)?;
    if windows.is_empty() {
        bail!(Empty, "no evaluation windows");
    }
    let mut histories = Vec::with_capacity(windows.len());
    let mut truths = Vec::with_capacity(windows.len());
    for w in windows {
        if w.frame_count() != mdp.window_len() {
            bail!(Shape, "evaluation window has {} frames, expected {}", w.frame_count(), mdp.window_len());
        }
        histories.push(w.window(0, mdp.history_frames)?);
        truths.push(w.window(mdp.history_frames, mdp.future_frames)?);
    }
    let refs: Vec<&MultiPersonClip> = histories.iter().collect();
    let preds = predict(&refs)?;
    if preds.len() != windows.len() {
        bail!(Shape, "{} predictions for {} windows", preds.len(), windows.len());
    }
    let n = frames.len();
    let (mut global, mut local, mut root) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (pred, gt) in preds.iter().zip(&truths) {
        if pred.frame_count() != mdp.future_frames {
            bail!(Shape, "prediction has {} frames, expected {}", pred.frame_count(), mdp.future_frames);
        }
        for (i, &h) in frames.iter().enumerate() {
            global[i] += mpjpe(pred, gt, h - 1)?;
            local[i] += local_error(pred, gt, h - 1)?;
            root[i] += root_error(pred, gt, h - 1)?;
        }
    }
    let count = windows.len() as f64;
    let avg = |v: Vec<f64>| v.into_iter().map(|x| x / count).collect();
    Ok(ErrorReport {
        horizons_ms: horizons_ms.to_vec(),
        global_mm: avg(global),
        local_mm: avg(local),
        root_mm: avg(root),
    })
}

/// The Frozen baseline as a batch predictor.
pub fn frozen_predictor(future_frames: usize) -> impl FnMut(&[&MultiPersonClip]) -> Result<Vec<MultiPersonClip>> {
    move |hs| hs.iter().map(|h| frozen_predict(h, future_frames)).collect()
}

/// Trajectory-only baseline: roots continue at their last observed
/// velocity while each agent keeps its last local pose.
pub fn trajectory_only_predict(history: &MultiPersonClip, future_frames: usize) -> Result<MultiPersonClip> {
    if history.frame_count() < 2 {
        bail!(Argument, "trajectory extrapolation needs two history frames");
    }
    let last = history.frame_count() - 1;
    let frozen = frozen_predict(history, future_frames)?;
    MultiPersonClip::from_fn(history.skeleton().clone(), history.person_count(), future_frames, |p, t, j| {
        let (r1, r0) = (history.root(p, last), history.root(p, last - 1));
        let x = frozen.joint(p, t, j);
        core::array::from_fn(|k| x[k] + (r1[k] - r0[k]) * (t + 1) as f64)
    })
}

/// One report per level `1..=K`, executing that level's action at every step.
pub fn evaluate_levels(
    model: &HierarchicalPolicy,
    windows: &[MultiPersonClip],
    horizons_ms: &[u32],
    fps: f64,
) -> Result<Vec<ErrorReport>> {
    let k = model.levels();
    if k == 0 {
        bail!(Argument, "per-level evaluation needs K >= 1");
    }
    let mdp = model.config().mdp.clone();
    (1..=k)
        .map(|level| evaluate(|hs| model.rollout_level(hs, level), windows, &mdp, horizons_ms, fps))
        .collect()
}

/// Evaluates the model's level-K rollout.
pub fn evaluate_model(
    model: &HierarchicalPolicy,
    windows: &[MultiPersonClip],
    horizons_ms: &[u32],
    fps: f64,
) -> Result<ErrorReport> {
    let mdp = model.config().mdp.clone();
    evaluate(|hs| model.rollout_level(hs, model.levels()), windows, &mdp, horizons_ms, fps)
}
