//! Local-range and global-range state encoders.
//!
//! The local encoder sees one agent at a time: its last `W` poses, each
//! flattened to a token, centred on that agent's own last-frame root. The
//! global encoder sees the last `W` poses of every agent as one token set,
//! centred on the mean last-frame root of all agents. Both add sinusoidal
//! frame codes and mean-pool the final layer. Without person identity the
//! global feature does not depend on agent order.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{bail, Result};
use crate::motion::{MdpState, MultiPersonClip};
use crate::nn::{positional_encoding, tile_rows, Linear, TransformerEncoder};

/// Coordinates fed to the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CoordFrame {
    /// Positions relative to a fixed per-window reference point.
    #[default]
    Absolute,
    /// Every joint relative to the root of the same frame.
    RootRelative,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub window_frames: usize,
    pub use_person_identity: bool,
    /// Maximum agent count when `use_person_identity` is set.
    pub max_persons: usize,
    /// Millimetres to network units.
    pub input_scale: f64,
    pub coords: CoordFrame,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            model_dim: 128,
            window_frames: 25,
            use_person_identity: false,
            max_persons: 16,
            input_scale: 1e-3,
            coords: CoordFrame::Absolute,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.window_frames == 0 {
            bail!(Argument, "encoder layers, heads, model_dim and window_frames must be positive");
        }
        if self.model_dim % self.heads != 0 {
            bail!(Argument, "model_dim {} not divisible by {} heads", self.model_dim, self.heads);
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            bail!(Argument, "input_scale must be positive");
        }
        if self.use_person_identity && self.max_persons == 0 {
            bail!(Argument, "max_persons must be positive with person identity");
        }
        Ok(())
    }
}

/// The last `frames` frames of a batch of multi-agent states, millimetres,
/// laid out `[batch][person][frame][joint][xyz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionWindows {
    pub batch: usize,
    pub persons: usize,
    pub frames: usize,
    pub joints: usize,
    pub root_index: usize,
    pub data: Vec<f64>,
}

impl MotionWindows {
    pub fn from_clips(clips: &[&MultiPersonClip], frames: usize) -> Result<Self> {
        let Some(first) = clips.first() else {
            bail!(Empty, "no states to encode");
        };
        let (persons, joints) = (first.person_count(), first.joint_count());
        let mut data = Vec::with_capacity(clips.len() * persons * frames * joints * 3);
        for c in clips {
            if c.person_count() != persons || c.joint_count() != joints {
                bail!(Shape, "states in one batch must share P and J");
            }
            if c.frame_count() < frames {
                bail!(Argument, "state has {} frames, encoder window is {frames}", c.frame_count());
            }
            data.extend_from_slice(c.tail(frames)?.positions());
        }
        Ok(Self {
            batch: clips.len(),
            persons,
            frames,
            joints,
            root_index: first.skeleton().root_index(),
            data,
        })
    }

    pub fn from_states(states: &[&MdpState], frames: usize) -> Result<Self> {
        let clips: Vec<&MultiPersonClip> = states.iter().map(|s| s.clip()).collect();
        Self::from_clips(&clips, frames)
    }

    fn stride(&self) -> usize {
        self.joints * 3
    }

    pub fn pose(&self, b: usize, p: usize, t: usize) -> &[f64] {
        let o = ((b * self.persons + p) * self.frames + t) * self.stride();
        &self.data[o..o + self.stride()]
    }

    pub fn root(&self, b: usize, p: usize, t: usize) -> [f64; 3] {
        let pose = self.pose(b, p, t);
        let r = self.root_index * 3;
        [pose[r], pose[r + 1], pose[r + 2]]
    }

    /// Mean over agents of the last-frame root position of window `b`.
    pub fn centroid(&self, b: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in 0..self.persons {
            let r = self.root(b, p, self.frames - 1);
            for k in 0..3 {
                c[k] += r[k];
            }
        }
        c.map(|v| v / self.persons as f64)
    }

    /// Normalised pose rows `[batch * persons * frames, J * 3]` relative to
    /// `reference(b, p)` (or to each frame's root for [`CoordFrame::RootRelative`]).
    pub fn tokens(
        &self,
        coords: CoordFrame,
        scale: f64,
        reference: impl Fn(usize, usize) -> [f64; 3],
    ) -> Tensor {
        let stride = self.stride();
        let mut out = Vec::with_capacity(self.data.len());
        for b in 0..self.batch {
            for p in 0..self.persons {
                let fixed = reference(b, p);
                for t in 0..self.frames {
                    let c = match coords {
                        CoordFrame::Absolute => fixed,
                        CoordFrame::RootRelative => self.root(b, p, t),
                    };
                    for j in self.pose(b, p, t).chunks_exact(3) {
                        out.extend((0..3).map(|k| (j[k] - c[k]) * scale));
                    }
                }
            }
        }
        Tensor::new(self.batch * self.persons * self.frames, stride, out)
    }
}

/// Per-agent local features and the shared global feature for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures {
    /// `[P, d]`
    pub local: Tensor,
    /// `[1, d]`
    pub global: Tensor,
}

/// Feature variables for a batch of `B` states with `P` agents.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    /// `[B * P, d]`, rows ordered (state, agent).
    pub local: Var,
    /// `[B, d]`
    pub global: Var,
    pub batch: usize,
    pub persons: usize,
}

#[derive(Debug, Clone)]
pub struct StateEncoders {
    config: EncoderConfig,
    joints: usize,
    local_embed: Linear,
    local: TransformerEncoder,
    global_embed: Linear,
    global: TransformerEncoder,
    person_embed: Option<ParamId>,
}

impl StateEncoders {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        joints: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let local_embed = Linear::new(ps, &alloc::format!("{name}.local.embed"), joints * 3, d, rng);
        let local = TransformerEncoder::new(
            ps,
            &alloc::format!("{name}.local"),
            d,
            config.heads,
            config.layers,
            rng,
        );
        let global_embed = Linear::new(ps, &alloc::format!("{name}.global.embed"), joints * 3, d, rng);
        let global = TransformerEncoder::new(
            ps,
            &alloc::format!("{name}.global"),
            d,
            config.heads,
            config.layers,
            rng,
        );
        let person_embed = config.use_person_identity.then(|| {
            ps.add_normal(alloc::format!("{name}.global.person"), config.max_persons, d, 0.02, rng)
        });
        Ok(Self {
            config: config.clone(),
            joints,
            local_embed,
            local,
            global_embed,
            global,
            person_embed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Local and global token tensors for a batch of windows.
    pub fn tokens(&self, w: &MotionWindows) -> Result<(Tensor, Tensor)> {
        self.check(w)?;
        let scale = self.config.input_scale;
        let local = w.tokens(self.config.coords, scale, |b, p| w.root(b, p, w.frames - 1));
        let global = w.tokens(self.config.coords, scale, |b, _| w.centroid(b));
        Ok((local, global))
    }

    fn check(&self, w: &MotionWindows) -> Result<()> {
        if w.joints != self.joints {
            bail!(Shape, "encoder built for {} joints, got {}", self.joints, w.joints);
        }
        if w.frames != self.config.window_frames {
            bail!(Shape, "encoder window is {} frames, got {}", self.config.window_frames, w.frames);
        }
        if self.config.use_person_identity && w.persons > self.config.max_persons {
            bail!(Argument, "{} agents exceed max_persons {}", w.persons, self.config.max_persons);
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, w: &MotionWindows) -> Result<FeatureVars> {
        let (local, global) = self.tokens(w)?;
        let local = g.constant(local);
        let global = g.constant(global);
        self.forward_tokens(g, ps, local, global, w.batch, w.persons)
    }

    /// Encodes token tensors produced by [`StateEncoders::tokens`].
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        local_tokens: Var,
        global_tokens: Var,
        batch: usize,
        persons: usize,
    ) -> Result<FeatureVars> {
        let frames = self.config.window_frames;
        let d = self.config.model_dim;
        let pe = positional_encoding(frames, d, 0);
        let pe = g.constant(tile_rows(&pe, batch * persons));

        let x = self.local_embed.forward(g, ps, local_tokens);
        let x = g.add(x, pe);
        let x = self.local.forward(g, ps, x, batch * persons)?;
        let local = g.group_mean(x, frames);

        let y = self.global_embed.forward(g, ps, global_tokens);
        let mut y = g.add(y, pe);
        if let Some(id) = self.person_embed {
            let table = g.param(ps, id);
            let idx = (0..batch * persons * frames).map(|r| (r / frames) % persons).collect();
            let ids = g.gather(table, idx);
            y = g.add(y, ids);
        }
        let y = self.global.forward(g, ps, y, batch)?;
        let global = g.group_mean(y, persons * frames);
        Ok(FeatureVars {
            local,
            global,
            batch,
            persons,
        })
    }

    /// Local feature of one agent; only that agent's motion is read.
    pub fn encode_local(&self, ps: &ParamStore, state: &MdpState, agent: usize) -> Result<Vec<f64>> {
        let clip = state.clip();
        if agent >= clip.person_count() {
            bail!(Index, "agent {agent} of {}", clip.person_count());
        }
        let own = single_person(clip, agent)?;
        let w = MotionWindows::from_clips(&[&own], self.config.window_frames)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, ps, &w)?;
        Ok(g.value(f.local).data.clone())
    }

    pub fn encode_global(&self, ps: &ParamStore, state: &MdpState) -> Result<Vec<f64>> {
        Ok(self.encode_state(ps, state)?.global.data)
    }

    pub fn encode_state(&self, ps: &ParamStore, state: &MdpState) -> Result<StateFeatures> {
        let w = MotionWindows::from_states(&[state], self.config.window_frames)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, ps, &w)?;
        Ok(StateFeatures {
            local: g.value(f.local).clone(),
            global: g.value(f.global).clone(),
        })
    }
}

fn single_person(clip: &MultiPersonClip, agent: usize) -> Result<MultiPersonClip> {
    let len = clip.frame_count() * clip.joint_count() * 3;
    let data = clip.positions()[agent * len..(agent + 1) * len].to_vec();
    MultiPersonClip::new(clip.skeleton().clone(), 1, clip.frame_count(), data)
}

/// Row indices that regroup `[B * P, ..]` rows after permuting agents by `order`.
pub fn permuted_rows(batch: usize, order: &[usize]) -> Vec<usize> {
    let persons = order.len();
    let mut idx = vec![0; batch * persons];
    for b in 0..batch {
        for (p, &o) in order.iter().enumerate() {
            idx[b * persons + p] = b * persons + o;
        }
    }
    idx
}
