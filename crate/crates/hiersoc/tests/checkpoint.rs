use hiersoc::checkpoint::{load_model, load_trainer, read_trainer, save_trainer, write_trainer};
use hiersoc::config::RunConfig;
use hiersoc::run;
use hiersoc::Error;
use hiersoc_core::imitation::{expert_windows, Trainer};
use hiersoc_core::motion::MdpConfig;
use hiersoc_core::synth::{synth_clips, SynthConfig};

fn tiny() -> RunConfig {
    let mut c = RunConfig::desk();
    c.mdp = MdpConfig::new(6, 6, 2).unwrap();
    c.encoder.model_dim = 8;
    c.encoder.layers = 1;
    c.encoder.heads = 2;
    c.encoder.window_frames = 4;
    c.policy.model_dim = 8;
    c.policy.decoder_layers = 1;
    c.policy.decoder_heads = 2;
    c.policy.levels = 2;
    c.discriminator.model_dim = 8;
    c.discriminator.heads = 2;
    c.discriminator.window_frames = 3;
    c.train.batch_size = 2;
    c
}

fn trained(steps: u64) -> (RunConfig, Trainer) {
    let cfg = tiny();
    let clips = synth_clips(
        &SynthConfig {
            persons: 2,
            joints: 3,
            duration_frames: 14,
            ..SynthConfig::default()
        },
        3,
    )
    .unwrap();
    let windows = expert_windows(&clips, &cfg.mdp, 1).unwrap();
    let mut tr = run::new_trainer(&cfg, 3).unwrap();
    for _ in 0..steps {
        tr.train_step(&windows).unwrap();
    }
    (cfg, tr)
}

fn f32_round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

#[test]
fn round_trip_restores_state_at_float32() {
    let (_, tr) = trained(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hsck");
    save_trainer(&tr, &path).unwrap();
    let back = load_trainer(&path).unwrap();
    assert_eq!(back.step, 2);
    assert_eq!(back.model_opt.t, tr.model_opt.t);
    assert_eq!(back.disc_opt.t, tr.disc_opt.t);
    assert_eq!(back.model.config(), tr.model.config());
    assert_eq!(back.weights, tr.weights);
    for ((na, a), (nb, b)) in tr.model.params.iter().zip(back.model.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(f32_round(&a.data), b.data, "{na}");
    }
    for ((_, a), (_, b)) in tr.disc.params.iter().zip(back.disc.params.iter()) {
        assert_eq!(f32_round(&a.data), b.data);
    }
    for (a, b) in tr.model_opt.v.iter().zip(&back.model_opt.v) {
        assert_eq!(f32_round(&a.data), b.data);
    }
    let m = load_model(&path).unwrap();
    assert_eq!(m.params.scalar_count(), tr.model.params.scalar_count());
}

#[test]
fn writing_twice_is_byte_identical() {
    let (_, tr) = trained(1);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_trainer(&tr, &mut a).unwrap();
    write_trainer(&read_trainer(&a[..]).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn header_names_every_tensor() {
    let (_, tr) = trained(0);
    let mut buf = Vec::new();
    write_trainer(&tr, &mut buf).unwrap();
    let nl = buf.iter().position(|&b| b == b'\n').unwrap();
    let h: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
    assert_eq!(h["format"], "HSCK1");
    let names: Vec<&str> = h["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    let model = tr.model.params.len();
    let disc = tr.disc.params.len();
    assert_eq!(names.len(), 3 * (model + disc));
    assert!(names.iter().any(|n| n.starts_with("encoder.")));
    assert!(names.iter().any(|n| n.starts_with("policy.")));
    assert!(names.iter().any(|n| n.starts_with("disc.")));
    assert!(names.iter().any(|n| n.starts_with("optim.model.m.")));
    assert!(names.iter().any(|n| n.starts_with("optim.disc.v.")));
    let floats: usize = h["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["shape"][0].as_u64().unwrap() as usize * t["shape"][1].as_u64().unwrap() as usize)
        .sum();
    assert_eq!(buf.len() - nl - 1, 4 * floats);
}

#[test]
fn corrupt_archives_are_rejected() {
    let (_, tr) = trained(0);
    let mut buf = Vec::new();
    write_trainer(&tr, &mut buf).unwrap();
    assert!(matches!(read_trainer(&buf[..buf.len() - 4]), Err(Error::Data(_))));
    assert!(matches!(read_trainer(&buf[..buf.len() - 1]), Err(Error::Data(_))));
    let nl = buf.iter().position(|&b| b == b'\n').unwrap();
    let text = String::from_utf8(buf[..nl].to_vec()).unwrap().replace("HSCK1", "HSCK9");
    let mut bad = text.into_bytes();
    bad.extend_from_slice(&buf[nl..]);
    assert!(matches!(read_trainer(&bad[..]), Err(Error::Data(_))));
    assert!(read_trainer(&b"garbage"[..]).is_err());
}

#[test]
fn resumed_training_continues_the_step_count() {
    let (cfg, tr) = trained(2);
    let mut buf = Vec::new();
    write_trainer(&tr, &mut buf).unwrap();
    let mut back = read_trainer(&buf[..]).unwrap();
    let clips = synth_clips(
        &SynthConfig {
            persons: 2,
            joints: 3,
            duration_frames: 14,
            ..SynthConfig::default()
        },
        3,
    )
    .unwrap();
    let windows = expert_windows(&clips, &cfg.mdp, 1).unwrap();
    let rec = back.train_step(&windows).unwrap();
    assert_eq!(rec.step, 2);
    assert_eq!(back.step, 3);
    assert!(rec.bc.is_finite());
}
