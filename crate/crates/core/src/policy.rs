//! Level-k policy stack and autoregressive rollout.
//!
//! Each policy network is a transformer decoder with `m` learned query tokens
//! per agent, one per future frame of the step. The level-0 network
//! cross-attends to the agent's local feature and the global feature. A
//! level-k network cross-attends to the agent's local feature and to one
//! token per (agent, frame) of the level-(k-1) joint action. An action token
//! embeds that agent's velocities, its last-frame root offset from the
//! querying agent and whether it is the querying agent itself.
//!
//! Velocities leave the output head in network units multiplied by
//! `output_scale`; dividing by the encoder `input_scale` converts them to
//! millimetres per frame.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::encoders::{EncoderConfig, FeatureVars, MotionWindows, StateEncoders, StateFeatures};
use crate::error::{bail, Result};
use crate::motion::{apply_action, AgentAction, JointAction, MdpConfig, MdpState, MultiPersonClip};
use crate::nn::{positional_encoding, tile_rows, Linear, TransformerDecoder};

/// Tag of the parameter store holding encoders and policies.
pub const MODEL_TAG: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PolicyStackConfig {
    /// Maximum reasoning depth `K`.
    pub levels: usize,
    pub share_levels: bool,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub model_dim: usize,
    pub output_scale: f64,
}

impl Default for PolicyStackConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            share_levels: true,
            decoder_layers: 3,
            decoder_heads: 8,
            model_dim: 128,
            output_scale: 0.01,
        }
    }
}

impl PolicyStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder_layers == 0 || self.decoder_heads == 0 || self.model_dim == 0 {
            bail!(Argument, "decoder layers, heads and model_dim must be positive");
        }
        if self.model_dim % self.decoder_heads != 0 {
            bail!(
                Argument,
                "model_dim {} not divisible by {} decoder heads",
                self.model_dim,
                self.decoder_heads
            );
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            bail!(Argument, "output_scale must be positive");
        }
        Ok(())
    }

    /// Number of distinct level-k (k >= 1) networks.
    pub fn higher_networks(&self) -> usize {
        match (self.levels, self.share_levels) {
            (0, _) => 0,
            (_, true) => 1,
            (k, false) => k,
        }
    }
}

/// Applies the reasoning-depth and weight-sharing changes of an ablation row.
pub fn build_ablation_policy(tag: &str, base: PolicyStackConfig) -> Result<PolicyStackConfig> {
    let (levels, share_levels) = match tag {
        "a" => (0, true),
        "b" => (1, true),
        "c" => (2, true),
        "d" => (4, true),
        "e" | "f" | "g" => (3, true),
        "h" => (3, false),
        other => bail!(Argument, "unknown ablation tag {other:?}"),
    };
    Ok(PolicyStackConfig {
        levels,
        share_levels,
        ..base
    })
}

/// Everything needed to rebuild a model's architecture.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub mdp: MdpConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyStackConfig,
    pub joints: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        self.encoder.validate()?;
        self.policy.validate()?;
        if self.encoder.model_dim != self.policy.model_dim {
            bail!(
                Argument,
                "encoder model_dim {} differs from policy model_dim {}",
                self.encoder.model_dim,
                self.policy.model_dim
            );
        }
        if self.encoder.window_frames > self.mdp.history_frames {
            bail!(
                Argument,
                "encoder window {} exceeds history of {} frames",
                self.encoder.window_frames,
                self.mdp.history_frames
            );
        }
        if self.joints == 0 {
            bail!(Argument, "joints must be positive");
        }
        Ok(())
    }

    /// Millimetres per frame represented by one unit of policy output.
    pub fn velocity_unit_mm(&self) -> f64 {
        self.policy.output_scale / self.encoder.input_scale
    }
}

/// Actions of every level for one state, level 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelActions {
    pub per_level: Vec<JointAction>,
}

impl LevelActions {
    pub fn final_action(&self) -> &JointAction {
        self.per_level.last().expect("at least level 0")
    }
}

#[derive(Debug, Clone)]
struct ActionEmbed {
    velocity: Linear,
    offset: Linear,
    relation: ParamId,
    state_type: ParamId,
}

#[derive(Debug, Clone)]
struct LevelNet {
    queries: ParamId,
    memory_type: Option<ParamId>,
    action: Option<ActionEmbed>,
    decoder: TransformerDecoder,
    head: Linear,
}

impl LevelNet {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &PolicyStackConfig,
        step_len: usize,
        joints: usize,
        conditioned: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.model_dim;
        let queries = ps.add_normal(format!("{name}.queries"), step_len, d, 1.0, rng);
        let (memory_type, action) = if conditioned {
            let action = ActionEmbed {
                velocity: Linear::new(ps, &format!("{name}.action.velocity"), joints * 3, d, rng),
                offset: Linear::new(ps, &format!("{name}.action.offset"), 3, d, rng),
                relation: ps.add_normal(format!("{name}.action.relation"), 2, d, 0.02, rng),
                state_type: ps.add_normal(format!("{name}.action.state_type"), 1, d, 0.02, rng),
            };
            (None, Some(action))
        } else {
            let mt = ps.add_normal(format!("{name}.memory_type"), 2, d, 0.02, rng);
            (Some(mt), None)
        };
        let decoder = TransformerDecoder::new(
            ps,
            &format!("{name}.decoder"),
            d,
            cfg.decoder_heads,
            cfg.decoder_layers,
            rng,
        );
        let head = Linear::new(ps, &format!("{name}.head"), d, joints * 3, rng);
        Self {
            queries,
            memory_type,
            action,
            decoder,
            head,
        }
    }

    fn decode(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        memory: Var,
        seqs: usize,
        step_len: usize,
        output_scale: f64,
    ) -> Result<Var> {
        let q = g.param(ps, self.queries);
        let q = g.gather(q, (0..seqs * step_len).map(|r| r % step_len).collect());
        let h = self.decoder.forward(g, ps, q, memory, seqs)?;
        let out = self.head.forward(g, ps, h);
        Ok(g.scale(out, output_scale))
    }
}

/// Root offsets `root[q] - root[p]` (network units) for every (state, p, q).
fn offsets(w: &MotionWindows, scale: f64) -> Tensor {
    let (b, n) = (w.batch, w.persons);
    let mut data = Vec::with_capacity(b * n * n * 3);
    for s in 0..b {
        for p in 0..n {
            let rp = w.root(s, p, w.frames - 1);
            for q in 0..n {
                let rq = w.root(s, q, w.frames - 1);
                data.extend((0..3).map(|k| (rq[k] - rp[k]) * scale));
            }
        }
    }
    Tensor::new(b * n * n, 3, data)
}

/// Policy outputs of every level for a batch of states, `[B * P * m, J * 3]`
/// each, rows ordered (state, agent, frame), in network velocity units.
#[derive(Debug, Clone)]
pub struct LevelVars {
    pub per_level: Vec<Var>,
    pub features: FeatureVars,
}

#[derive(Debug, Clone)]
pub struct HierarchicalPolicy {
    config: ModelConfig,
    pub params: ParamStore,
    encoders: StateEncoders,
    level0: LevelNet,
    higher: Vec<LevelNet>,
}

impl HierarchicalPolicy {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(MODEL_TAG);
        let encoders = StateEncoders::new(&mut ps, "encoder", &config.encoder, config.joints, &mut rng)?;
        let m = config.mdp.step_len();
        let level0 = LevelNet::new(&mut ps, "policy.level0", &config.policy, m, config.joints, false, &mut rng);
        let higher = (0..config.policy.higher_networks())
            .map(|i| {
                let name = if config.policy.share_levels {
                    "policy.levelk".into()
                } else {
                    format!("policy.level{}", i + 1)
                };
                LevelNet::new(&mut ps, &name, &config.policy, m, config.joints, true, &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            params: ps,
            encoders,
            level0,
            higher,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoders(&self) -> &StateEncoders {
        &self.encoders
    }

    pub fn levels(&self) -> usize {
        self.config.policy.levels
    }

    fn net_for(&self, level: usize) -> &LevelNet {
        if self.config.policy.share_levels {
            &self.higher[0]
        } else {
            &self.higher[level - 1]
        }
    }

    /// Scalar count of the level-1..K networks.
    pub fn higher_level_param_count(&self) -> usize {
        self.params.scalar_count_with_prefix("policy.levelk")
            + (1..=self.levels())
                .map(|k| self.params.scalar_count_with_prefix(&format!("policy.level{k}.")))
                .sum::<usize>()
    }

    fn level0_graph(&self, g: &mut Graph, ps: &ParamStore, f: &FeatureVars) -> Result<Var> {
        let (b, n) = (f.batch, f.persons);
        let both = g.concat_rows(&[f.local, f.global]);
        let mut idx = Vec::with_capacity(b * n * 2);
        for s in 0..b {
            for p in 0..n {
                idx.push(s * n + p);
                idx.push(b * n + s);
            }
        }
        let mem = g.gather(both, idx);
        let mt = g.param(ps, self.level0.memory_type.expect("level-0 memory types"));
        let mt = g.gather(mt, (0..b * n * 2).map(|r| r % 2).collect());
        let mem = g.add(mem, mt);
        self.level0.decode(
            g,
            ps,
            mem,
            b * n,
            self.config.mdp.step_len(),
            self.config.policy.output_scale,
        )
    }

    fn levelk_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        f: &FeatureVars,
        offsets: Var,
        prev: Var,
        level: usize,
    ) -> Result<Var> {
        let net = self.net_for(level);
        let emb = net.action.as_ref().expect("level-k action embedding");
        let (b, n, m) = (f.batch, f.persons, self.config.mdp.step_len());
        let d = self.config.policy.model_dim;

        let unscaled = g.scale(prev, 1.0 / self.config.policy.output_scale);
        let vel = emb.velocity.forward(g, ps, unscaled);
        let off = emb.offset.forward(g, ps, offsets);
        let rel = g.param(ps, emb.relation);
        let mut vel_idx = Vec::with_capacity(b * n * n * m);
        let mut off_idx = Vec::with_capacity(b * n * n * m);
        let mut rel_idx = Vec::with_capacity(b * n * n * m);
        for s in 0..b {
            for p in 0..n {
                for q in 0..n {
                    for t in 0..m {
                        vel_idx.push((s * n + q) * m + t);
                        off_idx.push((s * n + p) * n + q);
                        rel_idx.push(usize::from(p == q));
                    }
                }
            }
        }
        let tokens = g.gather(vel, vel_idx);
        let off = g.gather(off, off_idx);
        let tokens = g.add(tokens, off);
        let rel = g.gather(rel, rel_idx);
        let tokens = g.add(tokens, rel);
        let pe = g.constant(tile_rows(&positional_encoding(m, d, 0), b * n * n));
        let tokens = g.add(tokens, pe);

        let st = g.param(ps, emb.state_type);
        let st = g.gather(st, vec![0; b * n]);
        let state_tok = g.add(f.local, st);
        let all = g.concat_rows(&[state_tok, tokens]);
        let per = 1 + n * m;
        let mut idx = Vec::with_capacity(b * n * per);
        for sp in 0..b * n {
            idx.push(sp);
            idx.extend((0..n * m).map(|r| b * n + sp * n * m + r));
        }
        let mem = g.gather(all, idx);
        net.decode(g, ps, mem, b * n, m, self.config.policy.output_scale)
    }

    /// Builds the actions of every level `0..=max_level` for a batch of windows.
    pub fn forward_levels(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        w: &MotionWindows,
        max_level: usize,
    ) -> Result<LevelVars> {
        if max_level > self.levels() {
            bail!(Argument, "level {max_level} above K = {}", self.levels());
        }
        let features = self.encoders.forward(g, ps, w)?;
        let mut per_level = vec![self.level0_graph(g, ps, &features)?];
        if max_level > 0 {
            let off = g.constant(offsets(w, self.config.encoder.input_scale));
            for k in 1..=max_level {
                let prev = *per_level.last().expect("previous level");
                per_level.push(self.levelk_graph(g, ps, &features, off, prev, k)?);
            }
        }
        Ok(LevelVars {
            per_level,
            features,
        })
    }

    /// State features for one state, including per-agent root anchors.
    pub fn features(&self, state: &MdpState) -> Result<(StateFeatures, Vec<[f64; 3]>)> {
        let feats = self.encoders.encode_state(&self.params, state)?;
        let clip = state.clip();
        let last = clip.frame_count() - 1;
        let anchors = (0..clip.person_count()).map(|p| clip.root(p, last)).collect();
        Ok((feats, anchors))
    }

    fn check_features(&self, f: &StateFeatures) -> Result<()> {
        let d = self.config.policy.model_dim;
        if f.local.cols != d || f.global.cols != d || f.global.rows != 1 || f.local.rows == 0 {
            bail!(Shape, "features must be [P, {d}] and [1, {d}]");
        }
        Ok(())
    }

    fn feature_vars(&self, g: &mut Graph, f: &StateFeatures) -> FeatureVars {
        FeatureVars {
            local: g.constant(f.local.clone()),
            global: g.constant(f.global.clone()),
            batch: 1,
            persons: f.local.rows,
        }
    }

    /// Level-0 joint action from precomputed features.
    pub fn act_level0(&self, features: &StateFeatures) -> Result<JointAction> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let f = self.feature_vars(&mut g, features);
        let out = self.level0_graph(&mut g, &self.params, &f)?;
        self.to_joint_action(g.value(out), 1).map(|mut v| v.remove(0))
    }

    /// Level-`level` joint action given the level-(k-1) joint action and the
    /// agents' last-frame root positions (mm).
    pub fn act_levelk(
        &self,
        features: &StateFeatures,
        anchors: &[[f64; 3]],
        prev: &JointAction,
        level: usize,
    ) -> Result<JointAction> {
        self.check_features(features)?;
        if level == 0 || level > self.levels() {
            bail!(Argument, "level {level} outside 1..={}", self.levels());
        }
        let n = features.local.rows;
        if anchors.len() != n || prev.person_count() != n {
            bail!(Shape, "expected {n} anchors and agent actions");
        }
        let mut g = Graph::new();
        let f = self.feature_vars(&mut g, features);
        let prev = g.constant(self.from_joint_actions(&[prev])?);
        let w = MotionWindows {
            batch: 1,
            persons: n,
            frames: 1,
            joints: 1,
            root_index: 0,
            data: anchors.iter().flatten().copied().collect(),
        };
        let off = g.constant(offsets(&w, self.config.encoder.input_scale));
        let out = self.levelk_graph(&mut g, &self.params, &f, off, prev, level)?;
        self.to_joint_action(g.value(out), 1).map(|mut v| v.remove(0))
    }

    /// Actions of levels `0..=K` for one state.
    pub fn hierarchy_actions(&self, state: &MdpState) -> Result<LevelActions> {
        let w = MotionWindows::from_states(&[state], self.config.encoder.window_frames)?;
        let mut g = Graph::new();
        let lv = self.forward_levels(&mut g, &self.params, &w, self.levels())?;
        let per_level = lv
            .per_level
            .iter()
            .map(|&v| self.to_joint_action(g.value(v), 1).map(|mut a| a.remove(0)))
            .collect::<Result<_>>()?;
        Ok(LevelActions { per_level })
    }

    /// Converts a `[B * P * m, J * 3]` output in network units to joint actions in mm/frame.
    pub fn to_joint_action(&self, t: &Tensor, batch: usize) -> Result<Vec<JointAction>> {
        let m = self.config.mdp.step_len();
        let j = self.config.joints;
        if t.cols != j * 3 || t.rows % (batch * m) != 0 {
            bail!(Shape, "policy output {}x{} for batch {batch}", t.rows, t.cols);
        }
        let n = t.rows / (batch * m);
        let unit = 1.0 / self.config.encoder.input_scale;
        let per_agent = m * j * 3;
        (0..batch)
            .map(|s| {
                let actions = (0..n)
                    .map(|p| {
                        let o = (s * n + p) * per_agent;
                        let v = t.data[o..o + per_agent].iter().map(|x| x * unit).collect();
                        AgentAction::new(m, j, v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(JointAction::new(actions))
            })
            .collect()
    }

    /// Inverse of [`HierarchicalPolicy::to_joint_action`].
    pub fn from_joint_actions(&self, actions: &[&JointAction]) -> Result<Tensor> {
        let m = self.config.mdp.step_len();
        let j = self.config.joints;
        let scale = self.config.encoder.input_scale;
        let mut data = Vec::new();
        let mut rows = 0;
        for ja in actions {
            for a in &ja.actions {
                if a.frame_count() != m || a.joint_count() != j {
                    bail!(Shape, "action {}x{} for step {m}, {j} joints", a.frame_count(), a.joint_count());
                }
                data.extend(a.velocities().iter().map(|v| v * scale));
                rows += m;
            }
        }
        Ok(Tensor::new(rows, j * 3, data))
    }

    /// Predicts `T'` future frames for each history, executing the action of
    /// `level` (default `K`) at every step. Histories are batched together.
    pub fn rollout_level(&self, histories: &[&MultiPersonClip], level: usize) -> Result<Vec<MultiPersonClip>> {
        if level > self.levels() {
            bail!(Argument, "level {level} above K = {}", self.levels());
        }
        let mdp = &self.config.mdp;
        let mut states = histories
            .iter()
            .map(|h| MdpState::initial(h, mdp))
            .collect::<Result<Vec<_>>>()?;
        if states.is_empty() {
            return Ok(Vec::new());
        }
        for _ in 0..mdp.steps {
            let refs: Vec<&MdpState> = states.iter().collect();
            let w = MotionWindows::from_states(&refs, self.config.encoder.window_frames)?;
            let mut g = Graph::new();
            let lv = self.forward_levels(&mut g, &self.params, &w, level)?;
            let acts = self.to_joint_action(g.value(lv.per_level[level]), states.len())?;
            states = states
                .iter()
                .zip(&acts)
                .map(|(s, a)| apply_action(s, a, mdp))
                .collect::<Result<_>>()?;
        }
        states
            .into_iter()
            .map(|s| s.into_clip().tail(mdp.future_frames))
            .collect()
    }

    pub fn rollout(&self, history: &MultiPersonClip) -> Result<MultiPersonClip> {
        Ok(self.rollout_level(&[history], self.levels())?.remove(0))
    }

    /// Output head parameters `(weight, bias)` of the network executing `level`.
    pub fn head_params(&self, level: usize) -> (ParamId, ParamId) {
        let net = if level == 0 { &self.level0 } else { self.net_for(level) };
        (net.head.weight(), net.head.bias())
    }
}
