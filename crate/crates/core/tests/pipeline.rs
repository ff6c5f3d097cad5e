use hiersoc_core::encoders::EncoderConfig;
use hiersoc_core::imitation::{expert_windows, DiscriminatorConfig, LossWeights, TrainConfig, Trainer};
use hiersoc_core::metrics::{evaluate, frozen_predictor};
use hiersoc_core::motion::{MdpConfig, MultiPersonClip, Skeleton};
use hiersoc_core::policy::{ModelConfig, PolicyStackConfig};
use hiersoc_core::synth::{synth_clips, Behavior, SynthConfig};
use proptest::prelude::*;

fn mdp() -> MdpConfig {
    MdpConfig::new(6, 6, 2).unwrap()
}

fn tiny_model(levels: usize) -> ModelConfig {
    ModelConfig {
        mdp: mdp(),
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
        joints: 3,
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

fn clips() -> Vec<MultiPersonClip> {
    let cfg = SynthConfig {
        persons: 2,
        joints: 3,
        duration_frames: 16,
        ..SynthConfig::default()
    };
    synth_clips(&cfg, 3).unwrap()
}

fn trainer(levels: usize) -> Trainer {
    let train = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        seed: 7,
        ..TrainConfig::default()
    };
    Trainer::new(&tiny_model(levels), &tiny_disc(), &train, &LossWeights::default()).unwrap()
}

#[test]
fn training_reduces_bc_and_is_deterministic() {
    let windows = expert_windows(&clips(), &mdp(), 2).unwrap();
    let mut a = trainer(2);
    let mut b = trainer(2);
    let ra: Vec<_> = (0..40).map(|_| a.train_step(&windows).unwrap()).collect();
    let rb: Vec<_> = (0..40).map(|_| b.train_step(&windows).unwrap()).collect();
    assert_eq!(ra, rb);
    let early: f64 = ra[..5].iter().map(|r| r.bc).sum();
    let late: f64 = ra[35..].iter().map(|r| r.bc).sum();
    assert!(late < early, "bc {early} -> {late}");
    assert!(ra.iter().all(|r| r.disc.is_some() && r.gail.is_finite()));
}

#[test]
fn rollout_keeps_history_and_length() {
    let t = trainer(3);
    let windows = expert_windows(&clips(), &mdp(), 4).unwrap();
    let hist = windows[0].window(0, 6).unwrap();
    let before = hist.clone();
    let out = t.model.rollout(&hist).unwrap();
    assert_eq!(out.frame_count(), 6);
    assert_eq!(out.person_count(), 2);
    assert_eq!(hist, before);
    for level in 0..=3 {
        let r = t.model.rollout_level(&[&hist], level).unwrap();
        assert_eq!(r[0].frame_count(), 6);
    }
    assert!(t.model.rollout_level(&[&hist], 4).is_err());
}

fn constant_velocity(v: [f64; 3], start: [f64; 3]) -> MultiPersonClip {
    let sk = Skeleton::default_body(3, 25.0).unwrap();
    MultiPersonClip::from_fn(sk, 2, 12, |p, t, j| {
        let off = [p as f64 * 700.0, 0.0, j as f64 * 200.0];
        core::array::from_fn(|i| start[i] + off[i] + v[i] * t as f64)
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frozen_error_grows_linearly(
        vx in -30.0f64..30.0, vy in -30.0f64..30.0, vz in -5.0f64..5.0,
        sx in -3e3f64..3e3, sy in -3e3f64..3e3,
    ) {
        let clip = constant_velocity([vx, vy, vz], [sx, sy, 900.0]);
        let rep = evaluate(frozen_predictor(6), &[clip], &mdp(), &[80, 160, 240], 25.0).unwrap();
        let speed = (vx * vx + vy * vy + vz * vz).sqrt();
        for (i, h) in [2.0, 4.0, 6.0].iter().enumerate() {
            let want = speed * h;
            prop_assert!((rep.global_mm[i] - want).abs() <= 1e-9 * want.max(1.0));
            prop_assert!((rep.root_mm[i] - want).abs() <= 1e-9 * want.max(1.0));
            prop_assert!(rep.local_mm[i].abs() <= 1e-9);
        }
    }

    #[test]
    fn synth_is_seeded(seed in 0u64..1000) {
        let cfg = SynthConfig {
            seed,
            persons: 2,
            joints: 3,
            duration_frames: 8,
            behavior: Behavior::Circular,
            ..SynthConfig::default()
        };
        prop_assert_eq!(synth_clips(&cfg, 2).unwrap(), synth_clips(&cfg, 2).unwrap());
    }
}
