use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hiersoc::checkpoint::{load_model, save_trainer};
use hiersoc::clipfile::{load_clip, save_clip};
use hiersoc::config::RunConfig;
use hiersoc::run;
use hiersoc_core::motion::{frozen_predict, MultiPersonClip, Skeleton};
use hiersoc_core::stats::{clip_poses, motion_intensity_many, pose_diversity};

const TINY: &str = r#"{
  "mdp": {"history_frames": 6, "future_frames": 6, "steps": 2},
  "encoder": {"layers": 1, "heads": 2, "model_dim": 8, "window_frames": 4},
  "policy": {"levels": 2, "decoder_layers": 1, "decoder_heads": 2, "model_dim": 8},
  "discriminator": {"layers": 1, "heads": 2, "model_dim": 8, "window_frames": 3},
  "train": {"batch_size": 2, "steps": 3},
  "data": {"window_stride": 2},
  "eval": {"horizons_ms": [80, 160, 240]},
  "synth": {"persons": 2, "joints": 3, "duration_frames": 14}
}"#;

fn hiersoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiersoc"))
        .args(args)
        .env("HIERSOC_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hiersoc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hiersoc(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    clips: Vec<PathBuf>,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let data = dir.path().join("data");
        ok(&["synth", "--config", s(&config), "--out", s(&data), "--count", "3", "--seed", "4"]);
        let mut clips: Vec<PathBuf> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().path()).collect();
        clips.sort();
        Self { dir, config, clips }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let ck = self.path(out);
        let mut args = vec!["train", "--config", s(&self.config), "--out", s(&ck)];
        args.extend_from_slice(extra);
        args.extend(self.clips.iter().map(|p| s(p)));
        ok(&args);
        ck
    }

    fn clip_args(&self) -> Vec<&str> {
        self.clips.iter().map(|p| s(p)).collect()
    }
}

fn log_records(ck: &Path) -> Vec<serde_json::Value> {
    let mut p = ck.as_os_str().to_owned();
    p.push(".log.jsonl");
    fs::read_to_string(PathBuf::from(p))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_deterministic_and_reloadable() {
    let fx = Fixture::new();
    assert_eq!(fx.clips.len(), 3);
    let again = fx.path("again");
    ok(&["synth", "--config", s(&fx.config), "--out", s(&again), "--count", "3", "--seed", "4"]);
    for (i, p) in fx.clips.iter().enumerate() {
        let c = load_clip(p).unwrap();
        assert_eq!((c.person_count(), c.frame_count(), c.joint_count()), (2, 14, 3));
        assert_eq!(fs::read(p).unwrap(), fs::read(again.join(format!("clip_{i:04}.mpc"))).unwrap());
    }
    let other = fx.path("other");
    ok(&["synth", "--config", s(&fx.config), "--out", s(&other), "--count", "1", "--seed", "5"]);
    assert_ne!(fs::read(&fx.clips[0]).unwrap(), fs::read(other.join("clip_0000.mpc")).unwrap());
}

#[test]
fn synth_to_unwritable_path_fails() {
    let fx = Fixture::new();
    let blocker = fx.path("file");
    fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(&["synth", "--out", s(&blocker.join("sub")), "--count", "1"]), 3);
}

#[test]
fn stats_match_library_calls() {
    let fx = Fixture::new();
    let v: serde_json::Value = serde_json::from_str(&ok(&["stats"].into_iter().chain(fx.clip_args()).collect::<Vec<_>>())).unwrap();
    let clips: Vec<MultiPersonClip> = fx.clips.iter().map(|p| load_clip(p).unwrap()).collect();
    let poses = clip_poses(&clips);
    let sk = clips[0].skeleton();
    assert_eq!(v["diversity"]["50"].as_f64().unwrap(), pose_diversity(&poses, sk, 50.0).unwrap());
    assert_eq!(v["diversity"]["100"].as_f64().unwrap(), pose_diversity(&poses, sk, 100.0).unwrap());
    let int = motion_intensity_many(&clips).unwrap();
    assert_eq!(v["intensity_mm_s"]["mean"].as_f64().unwrap(), int.mean);
    for (name, want) in sk.joint_names().iter().zip(&int.per_joint) {
        assert_eq!(v["intensity_mm_s"]["per_joint"][name].as_f64().unwrap(), *want);
    }
}

#[test]
fn stats_of_static_identical_clips() {
    let dir = tempfile::tempdir().unwrap();
    let sk = Skeleton::default_body(3, 25.0).unwrap();
    let clip = MultiPersonClip::from_fn(sk, 2, 5, |_, _, j| [j as f64 * 100.0, 0.0, 900.0]).unwrap();
    let a = dir.path().join("a.mpc");
    save_clip(&clip, &a).unwrap();
    let out = dir.path().join("stats.json");
    ok(&["stats", "--out", s(&out), s(&a)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["diversity"]["50"].as_f64().unwrap(), 1.0 / 10.0);
    assert_eq!(v["intensity_mm_s"]["mean"].as_f64().unwrap(), 0.0);
    assert_eq!(code(&["stats"]), 3);
}

#[test]
fn train_log_header_and_flags() {
    let fx = Fixture::new();
    let ck = fx.train("a.hsck", &["--ablation", "a", "--seed", "2"]);
    let log = log_records(&ck);
    assert_eq!(log[0]["event"], "config");
    assert_eq!(log[0]["config"]["policy"]["levels"], 0);
    assert_eq!(log[0]["config"]["train"]["seed"], 2);
    assert_eq!(log.iter().filter(|r| r["event"] == "step").count(), 3);
    assert_eq!(log.last().unwrap()["event"], "final");
    assert_eq!(load_model(&ck).unwrap().levels(), 0);

    let ck = fx.train("k1.hsck", &["--k", "1", "--lambda", "0.5"]);
    let log = log_records(&ck);
    assert_eq!(log[0]["config"]["policy"]["levels"], 1);
    assert_eq!(log[0]["config"]["weights"]["lambda"], 0.5);
}

#[test]
fn reruns_give_identical_logs() {
    let fx = Fixture::new();
    let a = fx.train("a.hsck", &[]);
    let b = fx.train("b.hsck", &[]);
    assert_eq!(log_records(&a), log_records(&b));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn lambda_zero_matches_bc_only() {
    let fx = Fixture::new();
    let bc_cfg = fx.path("bc.json");
    let mut cfg = RunConfig::from_json(TINY).unwrap();
    cfg.weights.enable_gail = false;
    fs::write(&bc_cfg, cfg.to_json()).unwrap();
    let zero = fx.train("zero.hsck", &["--lambda", "0"]);
    let bc = fx.path("bc.hsck");
    let mut args = vec!["train", "--config", s(&bc_cfg), "--out", s(&bc)];
    args.extend(fx.clip_args());
    ok(&args);
    let bc_of = |p: &Path| -> Vec<f64> {
        log_records(p)
            .iter()
            .filter(|r| r["event"] == "step")
            .map(|r| r["record"]["bc"].as_f64().unwrap())
            .collect()
    };
    assert_eq!(bc_of(&zero), bc_of(&bc));
    let (m0, m1) = (load_model(&zero).unwrap(), load_model(&bc).unwrap());
    for ((_, a), (_, b)) in m0.params.iter().zip(m1.params.iter()) {
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn resume_continues_to_the_requested_step() {
    let fx = Fixture::new();
    let ck = fx.train("r.hsck", &["--steps", "2"]);
    let ck2 = fx.path("r2.hsck");
    let mut args = vec!["train", "--config", s(&fx.config), "--out", s(&ck2), "--resume", s(&ck), "--steps", "4"];
    args.extend(fx.clip_args());
    ok(&args);
    let log = log_records(&ck2);
    assert_eq!(log[0]["start_step"], 2);
    let steps: Vec<u64> = log
        .iter()
        .filter(|r| r["event"] == "step")
        .map(|r| r["record"]["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![2, 3]);
    let mut args = vec!["train", "--config", s(&fx.config), "--out", s(&ck2), "--resume", s(&ck), "--k", "1"];
    args.extend(fx.clip_args());
    assert_eq!(code(&args), 2);
}

#[test]
fn eval_grid_and_per_level_rows() {
    let fx = Fixture::new();
    let ck = fx.train("m.hsck", &[]);
    let out = fx.path("table.json");
    let mut args = vec!["eval", "--checkpoint", s(&ck), "--per-level", "--horizons", "80,160,240", "--out", s(&out)];
    args.extend(fx.clip_args());
    ok(&args);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2 + 2);
    assert_eq!(rows[0]["method"], "Frozen");
    for r in rows {
        for m in ["global_mm", "local_mm", "root_mm"] {
            assert_eq!(r[m].as_array().unwrap().len(), 3);
        }
    }
    let csv = fx.path("table.csv");
    let mut args = vec!["eval", "--checkpoint", s(&ck), "--horizons", "80,240", "--out", s(&csv)];
    args.extend(fx.clip_args());
    ok(&args);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 1 + 3 * 2);
}

#[test]
fn eval_rejects_fps_and_horizon_mismatch() {
    let fx = Fixture::new();
    let ck = fx.train("m.hsck", &["--steps", "0"]);
    let mut args = vec!["eval", "--checkpoint", s(&ck), "--fps", "30"];
    args.extend(fx.clip_args());
    assert_eq!(code(&args), 2);
    let mut args = vec!["eval", "--checkpoint", s(&ck), "--horizons", "1000"];
    args.extend(fx.clip_args());
    assert_eq!(code(&args), 2);
    let mut args = vec!["train", "--config", s(&fx.config), "--out", s(&ck), "--fps", "30"];
    args.extend(fx.clip_args());
    assert_eq!(code(&args), 2);
}

#[test]
fn predict_writes_future_frames() {
    let fx = Fixture::new();
    let ck = fx.train("m.hsck", &[]);
    let out = fx.path("pred.mpc");
    ok(&["predict", "--checkpoint", s(&ck), "--out", s(&out), s(&fx.clips[0])]);
    let pred = load_clip(&out).unwrap();
    assert_eq!((pred.person_count(), pred.frame_count(), pred.joint_count()), (2, 6, 3));
    let out2 = fx.path("pred2.mpc");
    ok(&["predict", "--checkpoint", s(&ck), "--out", s(&out2), s(&fx.clips[0])]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());

    let short = fx.path("short.mpc");
    save_clip(&load_clip(&fx.clips[0]).unwrap().window(0, 5).unwrap(), &short).unwrap();
    assert_eq!(code(&["predict", "--checkpoint", s(&ck), "--out", s(&out), s(&short)]), 3);
}

#[test]
fn zero_velocity_stack_predicts_frozen() {
    let fx = Fixture::new();
    let cfg = RunConfig::from_json(TINY).unwrap();
    let mut tr = run::new_trainer(&cfg, 3).unwrap();
    for level in 0..=tr.model.levels() {
        let (w, b) = tr.model.head_params(level);
        for id in [w, b] {
            tr.model.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let ck = fx.path("zero.hsck");
    save_trainer(&tr, &ck).unwrap();
    let out = fx.path("pred.mpc");
    ok(&["predict", "--checkpoint", s(&ck), "--out", s(&out), s(&fx.clips[1])]);
    let clip = load_clip(&fx.clips[1]).unwrap();
    assert_eq!(load_clip(&out).unwrap(), frozen_predict(&clip, 6).unwrap());
}

#[test]
fn sweep_covers_requested_ablations() {
    let fx = Fixture::new();
    let mut args = vec!["sweep", "--config", s(&fx.config), "--steps", "1", "--tags", "a,c"];
    args.extend(fx.clip_args());
    let text = ok(&args);
    assert!(text.contains("Frozen") && text.contains("(a)") && text.contains("(c)"));
}

#[test]
fn config_errors_exit_with_2() {
    let fx = Fixture::new();
    let bad = fx.path("bad.json");
    fs::write(&bad, r#"{"policy": {"depth": 3}}"#).unwrap();
    let mut args = vec!["train", "--config", s(&bad), "--out", "x"];
    args.extend(fx.clip_args());
    assert_eq!(code(&args), 2);
    let mut args = vec!["train", "--config", s(&fx.config), "--out", "x", "--ablation", "z"];
    args.extend(fx.clip_args());
    assert_eq!(code(&args), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn data_errors_exit_with_3() {
    let fx = Fixture::new();
    let junk = fx.path("junk.mpc");
    fs::write(&junk, b"not a clip\n").unwrap();
    assert_eq!(code(&["stats", s(&junk)]), 3);
    let other = fx.path("five");
    ok(&["synth", "--out", s(&other), "--count", "1", "--persons", "3", "--joints", "3", "--frames", "14"]);
    let mixed = [s(&fx.clips[0]), other.join("clip_0000.mpc").to_str().unwrap()].map(String::from);
    assert_eq!(code(&["stats", &mixed[0], &mixed[1]]), 3);
}
