//! Run configuration files.
//!
//! A run config is a JSON object; every section is optional and missing
//! fields take their defaults. Unknown keys are rejected. Command-line flags
//! override file values, which override defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hiersoc_core::encoders::EncoderConfig;
use hiersoc_core::imitation::{ablation_weights, DiscriminatorConfig, LossWeights, TrainConfig};
use hiersoc_core::metrics::DEFAULT_HORIZONS_MS;
use hiersoc_core::motion::MdpConfig;
use hiersoc_core::policy::{build_ablation_policy, ModelConfig, PolicyStackConfig};
use hiersoc_core::synth::SynthConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizons_ms: Vec<u32>,
    /// Expected clip frame rate; `None` accepts the clips' own rate.
    pub fps: Option<f64>,
    /// Evaluate the training set every this many steps (0: only at the end).
    pub every: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons_ms: DEFAULT_HORIZONS_MS.to_vec(),
            fps: None,
            every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Frames between the starts of consecutive training windows.
    pub window_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { window_stride: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub ablation: Option<String>,
    pub mdp: MdpConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyStackConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

/// Flag values that override a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub levels: Option<usize>,
    pub lambda: Option<f64>,
    pub ablation: Option<String>,
    pub horizons_ms: Option<Vec<u32>>,
    pub fps: Option<f64>,
    pub steps: Option<u64>,
}

impl RunConfig {
    /// Small architecture trainable on one CPU core in minutes: width 32,
    /// two layers, four heads, a 10-frame encoder window and a one-layer
    /// discriminator, on three-agent five-joint synthetic clips.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.encoder.layers = 2;
        c.encoder.heads = 4;
        c.encoder.model_dim = 32;
        c.encoder.window_frames = 10;
        c.policy.decoder_layers = 2;
        c.policy.decoder_heads = 4;
        c.policy.model_dim = 32;
        c.discriminator.layers = 1;
        c.discriminator.heads = 4;
        c.discriminator.model_dim = 32;
        c.discriminator.window_frames = 5;
        c.synth.persons = 3;
        c.synth.joints = 5;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run config serialises")
    }

    /// Applies flag overrides: the ablation first, then explicit values.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(a) = &o.ablation {
            self.ablation = Some(a.clone());
        }
        if let Some(a) = self.ablation.clone() {
            self.policy = build_ablation_policy(&a, self.policy.clone()).map_err(|e| Error::Config(e.to_string()))?;
            self.weights = ablation_weights(&a, self.weights.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.synth.seed = s;
        }
        if let Some(k) = o.levels {
            self.policy.levels = k;
        }
        if let Some(l) = o.lambda {
            self.weights.lambda = l;
        }
        if let Some(h) = &o.horizons_ms {
            self.eval.horizons_ms = h.clone();
        }
        if let Some(f) = o.fps {
            self.eval.fps = Some(f);
        }
        if let Some(s) = o.steps {
            self.train.steps = s;
        }
        Ok(())
    }

    /// Architecture for clips with `joints` joints.
    pub fn model(&self, joints: usize) -> ModelConfig {
        ModelConfig {
            mdp: self.mdp,
            encoder: self.encoder.clone(),
            policy: self.policy.clone(),
            joints,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self, joints: usize) -> Result<()> {
        let model = self.model(joints);
        let check = |r: hiersoc_core::Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        check(model.validate())?;
        check(self.discriminator.validate())?;
        check(self.weights.validate(self.policy.levels))?;
        check(self.train.validate())?;
        if self.discriminator.window_frames > self.mdp.history_frames {
            return Err(Error::Config(format!(
                "discriminator window {} exceeds history of {} frames",
                self.discriminator.window_frames, self.mdp.history_frames
            )));
        }
        if self.data.window_stride == 0 {
            return Err(Error::Config("data.window_stride must be positive".into()));
        }
        if let Some(f) = self.eval.fps {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::Config(format!("eval fps must be positive, got {f}")));
            }
        }
        Ok(())
    }
}

/// Parses `400,600,800` into milliseconds.
pub fn parse_horizons(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|e| Error::Config(format!("horizon {p:?}: {e}")))
        })
        .collect()
}
