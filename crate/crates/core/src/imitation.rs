//! Behavioural cloning, the adversarial discriminator and the training loop.
//!
//! Discriminator convention: `D(s, a) = sigmoid(logit)` scores generated
//! pairs high and expert pairs low. The discriminator minimises
//! `-(E_policy[log D] + E_expert[log(1 - D)])` and the policy minimises
//! `BC + lambda * sum_k E_policy(k)[log D]`, differentiating through `D`
//! and the known transition directly.
//!
//! BC is computed on expert (teacher-forced) states in millimetres per
//! frame. Adversarial pairs are also built on expert states: one step of
//! each training window is drawn for the policy pairs and another,
//! independently, for the expert pairs.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_sigmoid, sigmoid, Graph, ParamStore, Tensor, Var};
use crate::encoders::{CoordFrame, MotionWindows};
use crate::error::{bail, Result};
use crate::motion::{JointAction, MdpConfig, MdpState, MultiPersonClip};
use crate::nn::{positional_encoding, tile_rows, Linear, TransformerEncoder};
use crate::policy::{build_ablation_policy, HierarchicalPolicy, ModelConfig, PolicyStackConfig, MODEL_TAG};

/// Tag of the discriminator parameter store.
pub const DISC_TAG: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// History frames shown to the discriminator before the action frames.
    pub window_frames: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            model_dim: 128,
            window_frames: 25,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.window_frames == 0 {
            bail!(Argument, "discriminator layers, heads, model_dim and window_frames must be positive");
        }
        if self.model_dim % self.heads != 0 {
            bail!(Argument, "model_dim {} not divisible by {} heads", self.model_dim, self.heads);
        }
        Ok(())
    }
}

/// Joint-motion discriminator over all agents: the last `W` history frames
/// followed by the `m` frames an action produces.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    joints: usize,
    step_len: usize,
    input_scale: f64,
    output_scale: f64,
    pub params: ParamStore,
    pos_embed: Linear,
    vel_embed: Linear,
    encoder: TransformerEncoder,
    head: Linear,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.window_frames > model.mdp.history_frames {
            bail!(
                Argument,
                "discriminator window {} exceeds history of {} frames",
                config.window_frames,
                model.mdp.history_frames
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(DISC_TAG);
        let (d, j3) = (config.model_dim, model.joints * 3);
        let pos_embed = Linear::new(&mut ps, "disc.pos_embed", j3, d, &mut rng);
        let vel_embed = Linear::new(&mut ps, "disc.vel_embed", j3, d, &mut rng);
        let encoder = TransformerEncoder::new(&mut ps, "disc.encoder", d, config.heads, config.layers, &mut rng);
        let head = Linear::new(&mut ps, "disc.head", d, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            joints: model.joints,
            step_len: model.mdp.step_len(),
            input_scale: model.encoder.input_scale,
            output_scale: model.policy.output_scale,
            params: ps,
            pos_embed,
            vel_embed,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Logits `[N, 1]` for `N` pairs. `hist` holds the last `W` frames of
    /// each pair's state; `actions` are `[N * P * m, J * 3]` velocities in
    /// network units, rows ordered (pair, agent, frame).
    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, hist: &MotionWindows, actions: Var) -> Result<Var> {
        let (n, p, w, m) = (hist.batch, hist.persons, hist.frames, self.step_len);
        if w != self.config.window_frames || hist.joints != self.joints {
            bail!(Shape, "discriminator expects {} frames of {} joints", self.config.window_frames, self.joints);
        }
        let av = g.value(actions);
        if av.rows != n * p * m || av.cols != self.joints * 3 {
            bail!(Shape, "actions {}x{} for {n} pairs of {p} agents", av.rows, av.cols);
        }
        let j3 = self.joints * 3;
        let pos = hist.tokens(CoordFrame::Absolute, self.input_scale, |b, _| hist.centroid(b));
        let mut vel = vec![0.0; pos.len()];
        let mut last = Vec::with_capacity(n * p * j3);
        for s in 0..n * p {
            for t in 0..w {
                let r = s * w + t;
                if t > 0 {
                    for c in 0..j3 {
                        vel[r * j3 + c] = (pos.data[r * j3 + c] - pos.data[(r - 1) * j3 + c]) / self.output_scale;
                    }
                }
            }
            last.extend_from_slice(pos.row(s * w + w - 1));
        }
        let hist_pos = g.constant(pos);
        let hist_vel = g.constant(Tensor::new(n * p * w, j3, vel));
        let last = g.constant(Tensor::new(n * p, j3, last));
        let last = g.gather(last, (0..n * p * m).map(|r| r / m).collect());
        let disp = g.group_cumsum(actions, m);
        let act_pos = g.add(last, disp);
        let act_vel = g.scale(actions, 1.0 / self.output_scale);

        let hp = self.pos_embed.forward(g, ps, hist_pos);
        let hv = self.vel_embed.forward(g, ps, hist_vel);
        let h = g.add(hp, hv);
        let ap = self.pos_embed.forward(g, ps, act_pos);
        let avv = self.vel_embed.forward(g, ps, act_vel);
        let a = g.add(ap, avv);
        let all = g.concat_rows(&[h, a]);
        let len = w + m;
        let mut idx = Vec::with_capacity(n * p * len);
        for s in 0..n * p {
            idx.extend((0..w).map(|t| s * w + t));
            idx.extend((0..m).map(|t| n * p * w + s * m + t));
        }
        let x = g.gather(all, idx);
        let pe = g.constant(tile_rows(&positional_encoding(len, self.config.model_dim, 0), n * p));
        let x = g.add(x, pe);
        let x = self.encoder.forward(g, ps, x, n)?;
        let pooled = g.group_mean(x, p * len);
        Ok(self.head.forward(g, ps, pooled))
    }

    /// `D(s, a)` in `(0, 1)`.
    pub fn score(&self, state: &MdpState, action: &JointAction) -> Result<f64> {
        let w = MotionWindows::from_states(&[state], self.config.window_frames)?;
        let mut g = Graph::new();
        let a = g.constant(actions_to_tensor(&[action], self.step_len, self.joints, self.input_scale)?);
        let z = self.logits(&mut g, &self.params, &w, a)?;
        // keep the score strictly inside the open interval
        Ok(sigmoid(g.scalar(z).clamp(-36.0, 36.0)))
    }
}

/// Velocities in mm/frame to network units, rows (action, agent, frame).
pub fn actions_to_tensor(actions: &[&JointAction], m: usize, joints: usize, input_scale: f64) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for ja in actions {
        for a in &ja.actions {
            if a.frame_count() != m || a.joint_count() != joints {
                bail!(Shape, "action {}x{} for step {m}, {joints} joints", a.frame_count(), a.joint_count());
            }
            data.extend(a.velocities().iter().map(|v| v * input_scale));
            rows += m;
        }
    }
    Ok(Tensor::new(rows, joints * 3, data))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub lambda: f64,
    pub enable_gail: bool,
    pub enable_mid_gail: bool,
    /// Explicit adversarial levels; derived from the flags when `None`.
    pub gail_levels: Option<Vec<usize>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            enable_gail: true,
            enable_mid_gail: true,
            gail_levels: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            bail!(Argument, "lambda must be finite and non-negative, got {}", self.lambda);
        }
        if let Some(ls) = &self.gail_levels {
            let lo = usize::from(levels > 0);
            if let Some(bad) = ls.iter().find(|&&k| k < lo || k > levels) {
                bail!(Argument, "GAIL level {bad} outside {lo}..={levels}");
            }
        }
        Ok(())
    }

    /// Levels whose actions receive an adversarial term, ascending.
    pub fn gail_levels(&self, levels: usize) -> Vec<usize> {
        if !self.enable_gail {
            return Vec::new();
        }
        if let Some(ls) = &self.gail_levels {
            let mut ls = ls.clone();
            ls.sort_unstable();
            ls.dedup();
            return ls;
        }
        match levels {
            0 => vec![0],
            k if !self.enable_mid_gail => vec![k],
            k => (1..=k).collect(),
        }
    }
}

/// Mean squared velocity error (mm/frame squared) over all entries.
pub fn bc_loss(pred: &[JointAction], expert: &[JointAction]) -> Result<f64> {
    if pred.len() != expert.len() || pred.is_empty() {
        bail!(Shape, "{} predicted vs {} expert joint actions", pred.len(), expert.len());
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in pred.iter().zip(expert) {
        if a.person_count() != b.person_count() {
            bail!(Shape, "agent count {} vs {}", a.person_count(), b.person_count());
        }
        for (x, y) in a.actions.iter().zip(&b.actions) {
            if x.frame_count() != y.frame_count() || x.joint_count() != y.joint_count() {
                bail!(Shape, "action shapes differ");
            }
            for (u, v) in x.velocities().iter().zip(y.velocities()) {
                sum += (u - v) * (u - v);
            }
            count += x.velocities().len();
        }
    }
    Ok(sum / count as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Discriminator objective from logits of policy and expert pairs.
pub fn disc_loss(policy_logits: &[f64], expert_logits: &[f64]) -> Result<f64> {
    if policy_logits.is_empty() || expert_logits.is_empty() {
        bail!(Empty, "discriminator loss needs policy and expert pairs");
    }
    let pol: Vec<f64> = policy_logits.iter().map(|&z| log_sigmoid(z)).collect();
    let exp: Vec<f64> = expert_logits.iter().map(|&z| log_sigmoid(-z)).collect();
    Ok(-(mean(&pol) + mean(&exp)))
}

/// Adversarial policy term: sum over levels of the mean `log D`.
pub fn gail_policy_loss(per_level_logits: &[Vec<f64>]) -> f64 {
    per_level_logits
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| mean(&l.iter().map(|&z| log_sigmoid(z)).collect::<Vec<_>>()))
        .sum()
}

pub fn combined_policy_loss(bc: f64, gail: f64, weights: &LossWeights) -> f64 {
    if weights.lambda == 0.0 {
        bc
    } else {
        bc + weights.lambda * gail
    }
}

pub const ABLATION_TAGS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

/// Stack configuration and loss weights of an ablation row, from defaults.
pub fn build_ablation(tag: &str) -> Result<(PolicyStackConfig, LossWeights)> {
    let policy = build_ablation_policy(tag, PolicyStackConfig::default())?;
    let weights = ablation_weights(tag, LossWeights::default())?;
    Ok((policy, weights))
}

/// Applies an ablation's loss-weight changes to `base`.
pub fn ablation_weights(tag: &str, base: LossWeights) -> Result<LossWeights> {
    Ok(match tag {
        "a" | "b" | "c" | "d" | "e" | "h" => base,
        "f" => LossWeights {
            enable_mid_gail: false,
            ..base
        },
        "g" => LossWeights {
            enable_gail: false,
            ..base
        },
        other => bail!(Argument, "unknown ablation tag {other:?}"),
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            grad_clip: 1.0,
            seed: 0,
            steps: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bail!(Argument, "learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            bail!(Argument, "invalid Adam moments");
        }
        if self.batch_size == 0 {
            bail!(Argument, "batch size must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            bail!(Argument, "grad_clip must be non-negative");
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).rows, store.get(id).cols))
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for (k, g) in grads[i].data.iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                p.data[k] -= self.lr * (m[k] / c1) / (libm::sqrt(v[k] / c2) + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm` (if positive);
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|t| &t.data).map(|g| g * g).sum());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|t| &mut t.data).for_each(|g| *g *= s);
    }
    norm
}

/// Sliding windows of `T + T'` frames with the given stride.
pub fn expert_windows(clips: &[MultiPersonClip], mdp: &MdpConfig, stride: usize) -> Result<Vec<MultiPersonClip>> {
    mdp.validate()?;
    if stride == 0 {
        bail!(Argument, "window stride must be positive");
    }
    let len = mdp.window_len();
    let mut out = Vec::new();
    for c in clips {
        let mut start = 0;
        while start + len <= c.frame_count() {
            out.push(c.window(start, len)?);
            start += stride;
        }
    }
    if out.is_empty() {
        bail!(Empty, "no clip holds a full window of {len} frames");
    }
    Ok(out)
}

/// Teacher-forced states of a batch of windows: `L` states per window.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub windows: usize,
    pub steps: usize,
    /// State prefixes, index `window * L + (step - 1)`.
    pub prefixes: Vec<MultiPersonClip>,
    /// Expert velocities `[B * L * P * m, J * 3]` in network units.
    pub expert: Tensor,
}

impl TeacherBatch {
    pub fn new(windows: &[&MultiPersonClip], mdp: &MdpConfig, input_scale: f64) -> Result<Self> {
        let Some(first) = windows.first() else {
            bail!(Empty, "empty training batch");
        };
        let (p, j) = (first.person_count(), first.joint_count());
        let m = mdp.step_len();
        let mut prefixes = Vec::with_capacity(windows.len() * mdp.steps);
        let mut expert = Vec::with_capacity(windows.len() * mdp.future_frames * p * j * 3);
        for w in windows {
            if w.frame_count() != mdp.window_len() || w.person_count() != p || w.joint_count() != j {
                bail!(Shape, "training windows must be {} frames with equal P and J", mdp.window_len());
            }
            for i in 0..mdp.steps {
                let end = mdp.history_frames + i * m;
                prefixes.push(w.window(0, end)?);
                for a in 0..p {
                    for t in end - 1..end - 1 + m {
                        let (x0, x1) = (w.pose(a, t), w.pose(a, t + 1));
                        expert.extend(x0.iter().zip(x1).map(|(u, v)| (v - u) * input_scale));
                    }
                }
            }
        }
        let rows = expert.len() / (j * 3);
        Ok(Self {
            windows: windows.len(),
            steps: mdp.steps,
            prefixes,
            expert: Tensor::new(rows, j * 3, expert),
        })
    }

    /// Action rows of state `s` in a `[states * P * m, ..]` tensor.
    fn rows(&self, states: &[usize], persons: usize, m: usize) -> Vec<usize> {
        let per = persons * m;
        states.iter().flat_map(|&s| s * per..(s + 1) * per).collect()
    }
}

/// Losses of one training step. `disc` is the discriminator loss before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: u64,
    pub bc: f64,
    pub gail: f64,
    pub disc: Option<f64>,
    pub combined: f64,
    pub grad_norm: f64,
}

const SAMPLE_STREAM: u64 = 0;
const GAIL_STREAM: u64 = 1;
const DISC_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Policy, discriminator and optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: HierarchicalPolicy,
    pub disc: Discriminator,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub model_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(
        model: &ModelConfig,
        disc: &DiscriminatorConfig,
        config: &TrainConfig,
        weights: &LossWeights,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate(model.policy.levels)?;
        let m = HierarchicalPolicy::new(model.clone(), config.seed)?;
        let d = Discriminator::new(disc, model, config.seed ^ DISC_SEED_SALT)?;
        Ok(Self {
            model_opt: Adam::new(&m.params, config),
            disc_opt: Adam::new(&d.params, config),
            model: m,
            disc: d,
            config: config.clone(),
            weights: weights.clone(),
            step: 0,
        })
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step * 2 + stream);
        rng
    }

    /// Window indices used by the next step: all of them in order when they
    /// fit in one batch, otherwise a seeded sample without replacement.
    pub fn batch_indices(&self, available: usize) -> Vec<usize> {
        if available <= self.config.batch_size {
            return (0..available).collect();
        }
        let mut rng = self.rng(SAMPLE_STREAM);
        let mut idx = sample(&mut rng, available, self.config.batch_size).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn train_step(&mut self, windows: &[MultiPersonClip]) -> Result<StepRecord> {
        let idx = self.batch_indices(windows.len());
        let batch: Vec<&MultiPersonClip> = idx.iter().map(|&i| &windows[i]).collect();
        self.train_on_batch(&batch)
    }

    /// One discriminator update followed by one policy and encoder update.
    pub fn train_on_batch(&mut self, batch: &[&MultiPersonClip]) -> Result<StepRecord> {
        let cfg = self.model.config().clone();
        let mdp = &cfg.mdp;
        let (k_max, m) = (cfg.policy.levels, mdp.step_len());
        let tb = TeacherBatch::new(batch, mdp, cfg.encoder.input_scale)?;
        let persons = batch[0].person_count();
        let prefix_refs: Vec<&MultiPersonClip> = tb.prefixes.iter().collect();
        let windows = MotionWindows::from_clips(&prefix_refs, cfg.encoder.window_frames)?;

        let mut g = Graph::training(&[MODEL_TAG]);
        let lv = self.model.forward_levels(&mut g, &self.model.params, &windows, k_max)?;
        let expert = g.constant(tb.expert.clone());
        let bc = g.mse(lv.per_level[k_max], expert);
        let s2 = cfg.encoder.input_scale * cfg.encoder.input_scale;
        let bc = g.scale(bc, 1.0 / s2);
        let bc_value = g.scalar(bc);
        if !bc_value.is_finite() {
            bail!(NonFinite, "BC loss is {bc_value} at step {}", self.step);
        }

        let levels = self.weights.gail_levels(k_max);
        let mut disc_value = None;
        let mut gail_value = 0.0;
        let mut loss = bc;
        if !levels.is_empty() {
            let mut rng = self.rng(GAIL_STREAM);
            let pol_states: Vec<usize> = (0..tb.windows).map(|b| b * tb.steps + rng.random_range(0..tb.steps)).collect();
            let exp_states: Vec<usize> = (0..tb.windows).map(|b| b * tb.steps + rng.random_range(0..tb.steps)).collect();
            let pol_rows = tb.rows(&pol_states, persons, m);
            let exp_rows = tb.rows(&exp_states, persons, m);
            let dw = self.disc.config().window_frames;
            let pol_hist_one = windows_for(&tb, &pol_states, dw)?;
            let exp_hist = windows_for(&tb, &exp_states, dw)?;

            // discriminator update on detached policy actions
            let mut pol_actions = Vec::new();
            for &k in &levels {
                pol_actions.extend(select_rows(g.value(lv.per_level[k]), &pol_rows).data);
            }
            let pol_hist = repeat_windows(&pol_hist_one, levels.len());
            let mut dg = Graph::training(&[DISC_TAG]);
            let pa = dg.constant(Tensor::new(pol_rows.len() * levels.len(), cfg.joints * 3, pol_actions));
            let ea = dg.constant(select_rows(&tb.expert, &exp_rows));
            let zp = self.disc.logits(&mut dg, &self.disc.params, &pol_hist, pa)?;
            let ze = self.disc.logits(&mut dg, &self.disc.params, &exp_hist, ea)?;
            let lp = dg.log_sigmoid(zp);
            let lp = dg.mean(lp);
            let ne = dg.scale(ze, -1.0);
            let le = dg.log_sigmoid(ne);
            let le = dg.mean(le);
            let sum = dg.add(lp, le);
            let dl = dg.scale(sum, -1.0);
            let dv = dg.scalar(dl);
            if !dv.is_finite() {
                bail!(NonFinite, "discriminator loss is {dv} at step {}", self.step);
            }
            let mut dgrads = dg.backward(dl).for_store(&self.disc.params);
            clip_grad_norm(&mut dgrads, self.config.grad_clip);
            self.disc_opt.step(&mut self.disc.params, &dgrads);
            disc_value = Some(dv);

            if self.weights.lambda != 0.0 {
                let mut gail = None;
                for &k in &levels {
                    let act = g.gather(lv.per_level[k], pol_rows.clone());
                    let z = self.disc.logits(&mut g, &self.disc.params, &pol_hist_one, act)?;
                    let l = g.log_sigmoid(z);
                    let l = g.mean(l);
                    gail = Some(match gail {
                        Some(acc) => g.add(acc, l),
                        None => l,
                    });
                }
                let gail = gail.expect("non-empty levels");
                gail_value = g.scalar(gail);
                let weighted = g.scale(gail, self.weights.lambda);
                loss = g.add(bc, weighted);
            }
        }

        let combined = g.scalar(loss);
        if !combined.is_finite() {
            bail!(NonFinite, "policy loss is {combined} at step {}", self.step);
        }
        let mut grads = g.backward(loss).for_store(&self.model.params);
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            bail!(NonFinite, "policy gradient norm is {grad_norm} at step {}", self.step);
        }
        self.model_opt.step(&mut self.model.params, &grads);
        let record = StepRecord {
            step: self.step,
            bc: bc_value,
            gail: gail_value,
            disc: disc_value,
            combined,
            grad_norm,
        };
        self.step += 1;
        Ok(record)
    }
}

fn windows_for(tb: &TeacherBatch, states: &[usize], frames: usize) -> Result<MotionWindows> {
    let clips: Vec<&MultiPersonClip> = states.iter().map(|&s| &tb.prefixes[s]).collect();
    MotionWindows::from_clips(&clips, frames)
}

fn repeat_windows(w: &MotionWindows, times: usize) -> MotionWindows {
    let mut out = w.clone();
    out.batch = w.batch * times;
    out.data = w.data.repeat(times);
    out
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * t.cols);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(rows.len(), t.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::motion::{AgentAction, Skeleton};

    fn tiny_model(levels: usize) -> ModelConfig {
        ModelConfig {
            mdp: MdpConfig::new(4, 4, 2).unwrap(),
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                model_dim: 8,
                window_frames: 4,
                ..EncoderConfig::default()
            },
            policy: PolicyStackConfig {
                levels,
                decoder_layers: 1,
                decoder_heads: 2,
                model_dim: 8,
                ..PolicyStackConfig::default()
            },
            joints: 2,
        }
    }

    fn tiny_disc() -> DiscriminatorConfig {
        DiscriminatorConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            window_frames: 3,
        }
    }

    fn moving_clip(persons: usize, frames: usize, speed: f64, seed: u64) -> MultiPersonClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sk = Skeleton::default_body(2, 25.0).unwrap();
        let offs: Vec<f64> = (0..persons * 2).map(|_| rng.random_range(-300.0..300.0)).collect();
        MultiPersonClip::from_fn(sk, persons, frames, |p, t, j| {
            [
                offs[2 * p] + speed * t as f64,
                offs[2 * p + 1] + 10.0 * j as f64,
                900.0 + 200.0 * j as f64,
            ]
        })
        .unwrap()
    }

    fn action(v: f64) -> JointAction {
        JointAction::new(vec![AgentAction::new(1, 1, vec![v, 0.0, 0.0]).unwrap()])
    }

    #[test]
    fn bc_loss_examples() {
        let a = vec![action(0.0)];
        assert_eq!(bc_loss(&a, &a).unwrap(), 0.0);
        assert!((bc_loss(&[action(1.0)], &a).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let shifted = JointAction::new(vec![AgentAction::new(1, 1, vec![2.5, 2.5, 2.5]).unwrap()]);
        let zero = JointAction::zeros(1, 1, 1);
        assert!((bc_loss(&[shifted], &[zero]).unwrap() - 6.25).abs() < 1e-12);
        assert!(bc_loss(&[], &[]).is_err());
    }

    #[test]
    fn analytic_loss_constants() {
        let two_log2 = 2.0 * core::f64::consts::LN_2;
        assert!((disc_loss(&[0.0; 4], &[0.0; 3]).unwrap() - two_log2).abs() < 1e-12);
        assert!(disc_loss(&[], &[0.0]).is_err());
        let per = vec![vec![0.0; 5]; 3];
        assert!((gail_policy_loss(&per) + 3.0 * core::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(gail_policy_loss(&[]), 0.0);
        // near-perfect discriminator
        assert!(disc_loss(&[40.0], &[-40.0]).unwrap() < 1e-15);
        let w = LossWeights::default();
        assert!((combined_policy_loss(0.5, -2.0, &w) - 0.3).abs() < 1e-12);
        let w0 = LossWeights { lambda: 0.0, ..w };
        assert_eq!(combined_policy_loss(0.5, -2.0, &w0), 0.5);
    }

    #[test]
    fn gail_level_sets() {
        let w = LossWeights::default();
        assert_eq!(w.gail_levels(3), vec![1, 2, 3]);
        assert_eq!(w.gail_levels(0), vec![0]);
        let (_, f) = build_ablation("f").unwrap();
        assert_eq!(f.gail_levels(3), vec![3]);
        let (_, g) = build_ablation("g").unwrap();
        assert!(g.gail_levels(3).is_empty());
        assert!(build_ablation("z").is_err());
        let bad = LossWeights {
            gail_levels: Some(vec![4]),
            ..LossWeights::default()
        };
        assert!(bad.validate(3).is_err());
    }

    #[test]
    fn ablation_levels() {
        let ks: Vec<usize> = ABLATION_TAGS.iter().map(|t| build_ablation(t).unwrap().0.levels).collect();
        assert_eq!(ks, vec![0, 1, 2, 4, 3, 3, 3, 3]);
        assert!(!build_ablation("h").unwrap().0.share_levels);
    }

    #[test]
    fn score_in_open_interval() {
        let model = tiny_model(1);
        let d = Discriminator::new(&tiny_disc(), &model, 3).unwrap();
        let clip = moving_clip(2, 4, 20.0, 1);
        let state = MdpState::initial(&clip, &model.mdp).unwrap();
        let a = JointAction::zeros(2, 2, 2);
        let s = d.score(&state, &a).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert_eq!(s, d.score(&state, &a).unwrap());
    }

    #[test]
    fn teacher_batch_expert_velocities() {
        let model = tiny_model(1);
        let clip = moving_clip(2, 8, 20.0, 2);
        let tb = TeacherBatch::new(&[&clip], &model.mdp, 1e-3).unwrap();
        assert_eq!(tb.prefixes.len(), 2);
        assert_eq!(tb.prefixes[1].frame_count(), 6);
        assert_eq!(tb.expert.rows, 2 * 2 * 2);
        for r in 0..tb.expert.rows {
            assert!((tb.expert.row(r)[0] - 0.02).abs() < 1e-12);
            assert!(tb.expert.row(r)[1].abs() < 1e-12);
        }
    }

    #[test]
    fn discriminator_separates_directions() {
        let model = tiny_model(1);
        let mut d = Discriminator::new(&tiny_disc(), &model, 4).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(&d.params, &cfg);
        // family A moves +x, family B moves -x
        let make = |sign: f64, seed: u64| moving_clip(2, 6, sign * 30.0, seed);
        let train: Vec<(MultiPersonClip, bool)> = (0..16).map(|i| (make(if i % 2 == 0 { 1.0 } else { -1.0 }, i), i % 2 == 0)).collect();
        let split = |set: &[(MultiPersonClip, bool)]| {
            let hist: Vec<MultiPersonClip> = set.iter().map(|(c, _)| c.window(0, 4).unwrap()).collect();
            let refs: Vec<&MultiPersonClip> = hist.iter().collect();
            let w = MotionWindows::from_clips(&refs, 3).unwrap();
            let mut act = Vec::new();
            for (c, _) in set {
                for p in 0..2 {
                    for t in 3..5 {
                        act.extend(c.pose(p, t).iter().zip(c.pose(p, t + 1)).map(|(a, b)| (b - a) * 1e-3));
                    }
                }
            }
            (w, Tensor::new(set.len() * 4, 6, act))
        };
        let pos: Vec<_> = train.iter().filter(|x| x.1).cloned().collect();
        let neg: Vec<_> = train.iter().filter(|x| !x.1).cloned().collect();
        let (wp, ap) = split(&pos);
        let (wn, an) = split(&neg);
        for _ in 0..60 {
            let mut g = Graph::training(&[DISC_TAG]);
            let a = g.constant(ap.clone());
            let b = g.constant(an.clone());
            let zp = d.logits(&mut g, &d.params, &wp, a).unwrap();
            let zn = d.logits(&mut g, &d.params, &wn, b).unwrap();
            let lp = g.log_sigmoid(zp);
            let lp = g.mean(lp);
            let nz = g.scale(zn, -1.0);
            let ln = g.log_sigmoid(nz);
            let ln = g.mean(ln);
            let s = g.add(lp, ln);
            let loss = g.scale(s, -1.0);
            let grads = g.backward(loss).for_store(&d.params);
            opt.step(&mut d.params, &grads);
        }
        let test: Vec<(MultiPersonClip, bool)> =
            (100..120).map(|i| (make(if i % 2 == 0 { 1.0 } else { -1.0 }, i), i % 2 == 0)).collect();
        let correct = test
            .iter()
            .filter(|(c, label)| {
                let state = MdpState::initial(&c.window(0, 4).unwrap(), &model.mdp).unwrap();
                let acts = (0..2)
                    .map(|p| {
                        let mut v = Vec::new();
                        for t in 3..5 {
                            v.extend(c.pose(p, t).iter().zip(c.pose(p, t + 1)).map(|(a, b)| b - a));
                        }
                        AgentAction::new(2, 2, v).unwrap()
                    })
                    .collect();
                (d.score(&state, &JointAction::new(acts)).unwrap() > 0.5) == *label
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.9, "accuracy {correct}/20");
    }

    #[test]
    fn gail_disabled_leaves_discriminator_untouched() {
        let model = tiny_model(2);
        let weights = LossWeights {
            enable_gail: false,
            ..LossWeights::default()
        };
        let mut tr = Trainer::new(&model, &tiny_disc(), &TrainConfig::default(), &weights).unwrap();
        let before = tr.disc.params.clone();
        let clips: Vec<_> = (0..3).map(|i| moving_clip(2, 8, 15.0, i)).collect();
        let rec = tr.train_step(&clips).unwrap();
        assert!(rec.disc.is_none());
        assert_eq!(rec.gail, 0.0);
        let same = before.iter().zip(tr.disc.params.iter()).all(|(a, b)| a.1 == b.1);
        assert!(same);
    }

    #[test]
    fn updates_touch_only_their_own_parameters() {
        let model = tiny_model(2);
        let mut tr = Trainer::new(&model, &tiny_disc(), &TrainConfig::default(), &LossWeights::default()).unwrap();
        let clips: Vec<_> = (0..3).map(|i| moving_clip(2, 8, 15.0, i)).collect();
        let disc_before = tr.disc.params.clone();
        let model_before = tr.model.params.clone();
        let rec = tr.train_step(&clips).unwrap();
        assert!(rec.disc.is_some() && rec.gail < 0.0);
        assert!(disc_before.iter().zip(tr.disc.params.iter()).any(|(a, b)| a.1 != b.1));
        assert!(model_before.iter().zip(tr.model.params.iter()).any(|(a, b)| a.1 != b.1));
    }

    #[test]
    fn lambda_zero_matches_gail_disabled() {
        let model = tiny_model(1);
        let clips: Vec<_> = (0..20).map(|i| moving_clip(2, 8, 10.0 + i as f64, i)).collect();
        let run = |weights: LossWeights| {
            let cfg = TrainConfig {
                batch_size: 4,
                seed: 7,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::new(&model, &tiny_disc(), &cfg, &weights).unwrap();
            let losses: Vec<f64> = (0..4).map(|_| tr.train_step(&clips).unwrap().bc).collect();
            (losses, tr.model.params)
        };
        let (a, pa) = run(LossWeights {
            lambda: 0.0,
            ..LossWeights::default()
        });
        let (b, pb) = run(LossWeights {
            enable_gail: false,
            ..LossWeights::default()
        });
        assert_eq!(a, b);
        assert!(pa.iter().zip(pb.iter()).all(|(x, y)| x.1 == y.1));
    }

    #[test]
    fn expert_windows_slide() {
        let mdp = MdpConfig::new(4, 4, 2).unwrap();
        let clip = moving_clip(1, 12, 1.0, 0);
        assert_eq!(expert_windows(&[clip.clone()], &mdp, 2).unwrap().len(), 3);
        assert!(expert_windows(&[clip.window(0, 7).unwrap()], &mdp, 1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::new(0);
        let id = ps.add("w".into(), Tensor::new(1, 2, vec![1.0, 1.0]));
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(&ps, &cfg);
        opt.step(&mut ps, &[Tensor::new(1, 2, vec![3.0, -0.5])]);
        let w = &ps.get(id).data;
        assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((w[1] - (1.0 + 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Tensor::new(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15);
    }
}
