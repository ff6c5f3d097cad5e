//! Motion records and the multi-agent decision process over them.
//!
//! A prediction window of `T'` future frames is split into `L` steps of
//! `m = T' / L` frames. At step `i` the state is the motion of all agents up
//! to frame `T + (i - 1) * m`; each agent acts with `m` per-frame joint
//! velocities and the next state is obtained by integrating those velocities
//! from the last known frame:
//!
//! ```text
//! x[last + s] = x[last] + v[0] + ... + v[s - 1],   s = 1..=m
//! ```
//!
//! Integration is done as the running recurrence `x[t + 1] = x[t] + v[t]`, so
//! velocities taken by [`velocities_from_positions`] from float32-valued
//! positions reproduce those positions exactly.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{bail, Result};

/// Joint names used by [`Skeleton::default_body`] for the 15-joint layout.
pub const BODY15: [&str; 15] = [
    "pelvis",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

/// Order in which [`BODY15`] joints are kept when a smaller skeleton is requested.
const BODY15_PRIORITY: [usize; 15] = [0, 2, 5, 8, 11, 14, 1, 4, 7, 10, 13, 3, 6, 9, 12];

pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Skeleton {
    joint_names: Vec<String>,
    root_index: usize,
    fps: f64,
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, root_index: usize, fps: f64) -> Result<Self> {
        if joint_names.is_empty() {
            bail!(Argument, "skeleton needs at least one joint");
        }
        if root_index >= joint_names.len() {
            bail!(
                Index,
                "root index {root_index} with {} joints",
                joint_names.len()
            );
        }
        if !(fps.is_finite() && fps > 0.0) {
            bail!(Argument, "fps must be positive, got {fps}");
        }
        for (i, a) in joint_names.iter().enumerate() {
            if joint_names[..i].contains(a) {
                bail!(Argument, "duplicate joint name {a:?}");
            }
        }
        Ok(Self {
            joint_names,
            root_index,
            fps,
        })
    }

    /// Body layout with `joints` joints rooted at the pelvis.
    ///
    /// Up to 15 joints are drawn from [`BODY15`] (pelvis, head, wrists and
    /// ankles first); larger counts append generic `joint_<k>` markers.
    pub fn default_body(joints: usize, fps: f64) -> Result<Self> {
        if joints == 0 {
            bail!(Argument, "skeleton needs at least one joint");
        }
        let mut keep: Vec<usize> = BODY15_PRIORITY[..joints.min(15)].to_vec();
        keep.sort_unstable();
        let mut names: Vec<String> = keep.iter().map(|&i| BODY15[i].to_string()).collect();
        for k in 15..joints {
            names.push(format!("joint_{k}"));
        }
        Self::new(names, 0, fps)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn with_fps(&self, fps: f64) -> Result<Self> {
        Self::new(self.joint_names.clone(), self.root_index, fps)
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::default_body(15, DEFAULT_FPS).expect("valid default skeleton")
    }
}

/// Joint positions of `P` persons over `T` frames, millimetres, laid out
/// `[person][frame][joint][xyz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPersonClip {
    skeleton: Skeleton,
    persons: usize,
    frames: usize,
    positions: Vec<f64>,
}

impl MultiPersonClip {
    pub fn new(
        skeleton: Skeleton,
        persons: usize,
        frames: usize,
        positions: Vec<f64>,
    ) -> Result<Self> {
        if persons == 0 || frames == 0 {
            bail!(Argument, "clip needs P >= 1 and T >= 1, got P={persons} T={frames}");
        }
        let expected = persons * frames * skeleton.joint_count() * 3;
        if positions.len() != expected {
            bail!(
                Shape,
                "expected {persons}x{frames}x{}x3 = {expected} values, got {}",
                skeleton.joint_count(),
                positions.len()
            );
        }
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            bail!(NonFinite, "position value at flat index {i}");
        }
        Ok(Self {
            skeleton,
            persons,
            frames,
            positions,
        })
    }

    /// Builds a clip from per-person frame lists of flattened poses.
    pub fn from_fn(
        skeleton: Skeleton,
        persons: usize,
        frames: usize,
        mut f: impl FnMut(usize, usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let joints = skeleton.joint_count();
        let mut positions = Vec::with_capacity(persons * frames * joints * 3);
        for p in 0..persons {
            for t in 0..frames {
                for j in 0..joints {
                    positions.extend_from_slice(&f(p, t, j));
                }
            }
        }
        Self::new(skeleton, persons, frames, positions)
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn person_count(&self) -> usize {
        self.persons
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }

    fn pose_offset(&self, person: usize, frame: usize) -> usize {
        (person * self.frames + frame) * self.joint_count() * 3
    }

    /// Flattened `[J][3]` pose of one person at one frame.
    pub fn pose(&self, person: usize, frame: usize) -> &[f64] {
        let o = self.pose_offset(person, frame);
        &self.positions[o..o + self.joint_count() * 3]
    }

    pub fn joint(&self, person: usize, frame: usize, joint: usize) -> [f64; 3] {
        let o = self.pose_offset(person, frame) + joint * 3;
        [
            self.positions[o],
            self.positions[o + 1],
            self.positions[o + 2],
        ]
    }

    pub fn root(&self, person: usize, frame: usize) -> [f64; 3] {
        self.joint(person, frame, self.skeleton.root_index())
    }

    /// Frames `start..start + len` of every person.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            bail!(
                Index,
                "window {start}..{} outside clip of {} frames",
                start + len,
                self.frames
            );
        }
        let stride = self.joint_count() * 3;
        let mut positions = Vec::with_capacity(self.persons * len * stride);
        for p in 0..self.persons {
            let o = self.pose_offset(p, start);
            positions.extend_from_slice(&self.positions[o..o + len * stride]);
        }
        Ok(Self {
            skeleton: self.skeleton.clone(),
            persons: self.persons,
            frames: len,
            positions,
        })
    }

    /// Last `len` frames.
    pub fn tail(&self, len: usize) -> Result<Self> {
        if len > self.frames {
            bail!(Index, "tail of {len} frames from a {}-frame clip", self.frames);
        }
        self.window(self.frames - len, len)
    }

    /// Concatenates `other` after `self` along time.
    pub fn concat_frames(&self, other: &Self) -> Result<Self> {
        if other.persons != self.persons || other.joint_count() != self.joint_count() {
            bail!(
                Shape,
                "cannot append P={} J={} to P={} J={}",
                other.persons,
                other.joint_count(),
                self.persons,
                self.joint_count()
            );
        }
        let stride = self.joint_count() * 3;
        let frames = self.frames + other.frames;
        let mut positions = Vec::with_capacity(self.persons * frames * stride);
        for p in 0..self.persons {
            let a = self.pose_offset(p, 0);
            positions.extend_from_slice(&self.positions[a..a + self.frames * stride]);
            let b = other.pose_offset(p, 0);
            positions.extend_from_slice(&other.positions[b..b + other.frames * stride]);
        }
        Ok(Self {
            skeleton: self.skeleton.clone(),
            persons: self.persons,
            frames,
            positions,
        })
    }

    /// Reorders persons so that new person `i` is old person `order[i]`.
    pub fn permute_persons(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.persons {
            bail!(Shape, "permutation of length {} for {} persons", order.len(), self.persons);
        }
        let mut seen = vec![false; self.persons];
        for &o in order {
            if o >= self.persons || seen[o] {
                bail!(Argument, "not a permutation: {order:?}");
            }
            seen[o] = true;
        }
        let len = self.frames * self.joint_count() * 3;
        let mut positions = Vec::with_capacity(self.positions.len());
        for &o in order {
            positions.extend_from_slice(&self.positions[o * len..(o + 1) * len]);
        }
        Ok(Self {
            skeleton: self.skeleton.clone(),
            persons: self.persons,
            frames: self.frames,
            positions,
        })
    }
}

/// Horizon bookkeeping: `T` history frames, `T'` future frames in `L` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MdpConfig {
    pub history_frames: usize,
    pub future_frames: usize,
    pub steps: usize,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            history_frames: 25,
            future_frames: 25,
            steps: 5,
        }
    }
}

impl MdpConfig {
    pub fn new(history_frames: usize, future_frames: usize, steps: usize) -> Result<Self> {
        let cfg = Self {
            history_frames,
            future_frames,
            steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_frames < 2 {
            bail!(Argument, "history needs at least 2 frames, got {}", self.history_frames);
        }
        if self.future_frames == 0 || self.steps == 0 {
            bail!(Argument, "future frames and steps must be positive");
        }
        if self.future_frames % self.steps != 0 {
            bail!(
                Argument,
                "{} steps do not evenly divide {} future frames",
                self.steps,
                self.future_frames
            );
        }
        Ok(())
    }

    /// Frames per step, `m = T' / L`.
    pub fn step_len(&self) -> usize {
        self.future_frames / self.steps
    }

    pub fn window_len(&self) -> usize {
        self.history_frames + self.future_frames
    }
}

/// Aggregated motion of all agents up to the current decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpState {
    clip_prefix: MultiPersonClip,
    step_index: usize,
}

impl MdpState {
    /// First state of a rollout: the last `T` frames of `history`.
    ///
    /// Histories shorter than `T` are rejected.
    pub fn initial(history: &MultiPersonClip, config: &MdpConfig) -> Result<Self> {
        config.validate()?;
        if history.frame_count() < config.history_frames {
            bail!(
                Argument,
                "history has {} frames, need {}",
                history.frame_count(),
                config.history_frames
            );
        }
        Ok(Self {
            clip_prefix: history.tail(config.history_frames)?,
            step_index: 1,
        })
    }

    /// State at step `step_index` whose prefix is given directly.
    pub fn from_prefix(
        clip_prefix: MultiPersonClip,
        step_index: usize,
        config: &MdpConfig,
    ) -> Result<Self> {
        if step_index == 0 {
            bail!(Argument, "step index starts at 1");
        }
        let expected = config.history_frames + (step_index - 1) * config.step_len();
        if clip_prefix.frame_count() != expected {
            bail!(
                Shape,
                "state at step {step_index} needs {expected} frames, got {}",
                clip_prefix.frame_count()
            );
        }
        Ok(Self {
            clip_prefix,
            step_index,
        })
    }

    pub fn clip(&self) -> &MultiPersonClip {
        &self.clip_prefix
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn into_clip(self) -> MultiPersonClip {
        self.clip_prefix
    }
}

/// Per-frame joint velocities of one agent, `[m][J][3]` in mm per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentAction {
    frames: usize,
    joints: usize,
    velocities: Vec<f64>,
}

impl AgentAction {
    pub fn new(frames: usize, joints: usize, velocities: Vec<f64>) -> Result<Self> {
        if velocities.len() != frames * joints * 3 {
            bail!(
                Shape,
                "action of {frames}x{joints}x3 given {} values",
                velocities.len()
            );
        }
        if let Some(i) = velocities.iter().position(|v| !v.is_finite()) {
            bail!(NonFinite, "velocity value at flat index {i}");
        }
        Ok(Self {
            frames,
            joints,
            velocities,
        })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            velocities: vec![0.0; frames * joints * 3],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }
}

/// Actions of all `P` agents at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAction {
    pub actions: Vec<AgentAction>,
}

impl JointAction {
    pub fn new(actions: Vec<AgentAction>) -> Self {
        Self { actions }
    }

    pub fn zeros(persons: usize, frames: usize, joints: usize) -> Self {
        Self {
            actions: vec![AgentAction::zeros(frames, joints); persons],
        }
    }

    pub fn person_count(&self) -> usize {
        self.actions.len()
    }
}

/// Per-frame differences `v[t] = x[t + 1] - x[t]` of a flattened
/// `[m + 1][J][3]` position segment.
pub fn velocities_from_positions(segment: &[f64], joints: usize) -> Result<AgentAction> {
    let stride = joints * 3;
    if joints == 0 || segment.len() % stride != 0 || segment.len() / stride < 2 {
        bail!(
            Shape,
            "segment of {} values is not [m+1][{joints}][3] with m >= 1",
            segment.len()
        );
    }
    let frames = segment.len() / stride - 1;
    let velocities = segment[stride..]
        .iter()
        .zip(&segment[..frames * stride])
        .map(|(next, cur)| next - cur)
        .collect();
    AgentAction::new(frames, joints, velocities)
}

/// Advances `state` by one step, appending `m` integrated frames per agent.
pub fn apply_action(
    state: &MdpState,
    joint_action: &JointAction,
    config: &MdpConfig,
) -> Result<MdpState> {
    let clip = state.clip();
    let persons = clip.person_count();
    let joints = clip.joint_count();
    let m = config.step_len();
    if joint_action.person_count() != persons {
        bail!(
            Shape,
            "joint action for {} agents, state has {persons}",
            joint_action.person_count()
        );
    }
    for (p, a) in joint_action.actions.iter().enumerate() {
        if a.frame_count() != m || a.joint_count() != joints {
            bail!(
                Shape,
                "agent {p} action is {}x{}, expected {m}x{joints}",
                a.frame_count(),
                a.joint_count()
            );
        }
    }
    let stride = joints * 3;
    let old = clip.frame_count();
    let mut appended = Vec::with_capacity(persons * m * stride);
    for (p, a) in joint_action.actions.iter().enumerate() {
        let mut cur = clip.pose(p, old - 1).to_vec();
        for f in 0..m {
            let v = &a.velocities()[f * stride..(f + 1) * stride];
            for (c, dv) in cur.iter_mut().zip(v) {
                *c += dv;
            }
            appended.extend_from_slice(&cur);
        }
    }
    let tail = MultiPersonClip::new(clip.skeleton().clone(), persons, m, appended)?;
    Ok(MdpState {
        clip_prefix: clip.concat_frames(&tail)?,
        step_index: state.step_index() + 1,
    })
}

/// Subtracts the root joint from every joint of a flattened `[J][3]` pose.
pub fn root_align(pose: &[f64], skeleton: &Skeleton) -> Result<Vec<f64>> {
    let joints = skeleton.joint_count();
    if pose.len() != joints * 3 {
        bail!(Shape, "pose of {} values for {joints} joints", pose.len());
    }
    let r = skeleton.root_index() * 3;
    let root = [pose[r], pose[r + 1], pose[r + 2]];
    Ok(pose
        .chunks_exact(3)
        .flat_map(|j| [j[0] - root[0], j[1] - root[1], j[2] - root[2]])
        .collect())
}

/// Repeats the last history frame `future_frames` times for every person.
pub fn frozen_predict(history: &MultiPersonClip, future_frames: usize) -> Result<MultiPersonClip> {
    if future_frames == 0 {
        bail!(Argument, "future_frames must be positive");
    }
    let last = history.frame_count() - 1;
    let mut positions = Vec::with_capacity(
        history.person_count() * future_frames * history.joint_count() * 3,
    );
    for p in 0..history.person_count() {
        let pose = history.pose(p, last);
        for _ in 0..future_frames {
            positions.extend_from_slice(pose);
        }
    }
    MultiPersonClip::new(
        history.skeleton().clone(),
        history.person_count(),
        future_frames,
        positions,
    )
}
