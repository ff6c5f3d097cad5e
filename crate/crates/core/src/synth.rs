//! Deterministic synthetic multi-agent motion.
//!
//! Agents are articulated stick figures on a ground plane (z up, mm). The
//! pursuit-evade behaviour makes odd-indexed agents chase the nearest
//! even-indexed agent while evaders flee the nearest pursuer inside a walled
//! court, so each agent's future depends on the others' pasts. Limbs swing
//! with a gait phase driven by distance travelled.
//!
//! Circular and pursuit-evade positions are snapped to a 1/16 mm grid. Grid
//! values are exact in float32 and sums of them are exact in float64, which
//! keeps file round trips and translation arithmetic bit-exact.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::motion::{MultiPersonClip, Skeleton, DEFAULT_FPS};

pub const POSITION_QUANTUM_MM: f64 = 1.0 / 16.0;

const COURT_HALF_MM: f64 = 3000.0;
const STRIDE_MM: f64 = 1400.0;
const BURN_IN_FRAMES: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Behavior {
    /// Rigid translation at exactly `speed_mm_s` in a random direction.
    ConstantVelocity,
    /// Walking around a circle at `speed_mm_s`.
    Circular,
    /// Pursuers (odd agents) chase evaders (even agents); pursuers top out
    /// at `speed_mm_s`, evaders slightly below.
    #[default]
    PursuitEvade,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub seed: u64,
    pub persons: usize,
    pub joints: usize,
    pub fps: f64,
    pub duration_frames: usize,
    pub behavior: Behavior,
    pub noise_mm: f64,
    pub speed_mm_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            persons: 5,
            joints: 15,
            fps: DEFAULT_FPS,
            duration_frames: 50,
            behavior: Behavior::PursuitEvade,
            noise_mm: 0.0,
            speed_mm_s: 400.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.persons == 0 || self.joints == 0 || self.duration_frames == 0 {
            bail!(Argument, "persons, joints and duration_frames must be positive");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            bail!(Argument, "fps must be positive");
        }
        if !(self.noise_mm.is_finite() && self.noise_mm >= 0.0) {
            bail!(Argument, "noise_mm must be non-negative");
        }
        if !(self.speed_mm_s.is_finite() && self.speed_mm_s >= 0.0) {
            bail!(Argument, "speed_mm_s must be non-negative");
        }
        Ok(())
    }
}

/// Rest offset of a joint in the body frame: (forward, left, up).
fn rest_offset(name: &str, index: usize) -> [f64; 3] {
    match name {
        "pelvis" => [0.0, 0.0, 950.0],
        "neck" => [0.0, 0.0, 1450.0],
        "head" => [20.0, 0.0, 1650.0],
        "l_shoulder" => [0.0, 180.0, 1420.0],
        "l_elbow" => [0.0, 200.0, 1150.0],
        "l_wrist" => [20.0, 210.0, 900.0],
        "r_shoulder" => [0.0, -180.0, 1420.0],
        "r_elbow" => [0.0, -200.0, 1150.0],
        "r_wrist" => [20.0, -210.0, 900.0],
        "l_hip" => [0.0, 100.0, 900.0],
        "l_knee" => [20.0, 110.0, 500.0],
        "l_ankle" => [0.0, 110.0, 80.0],
        "r_hip" => [0.0, -100.0, 900.0],
        "r_knee" => [20.0, -110.0, 500.0],
        "r_ankle" => [0.0, -110.0, 80.0],
        _ => {
            let a = index as f64 * 0.7;
            [150.0 * libm::cos(a), 150.0 * libm::sin(a), 1200.0]
        }
    }
}

/// Gait swing (forward, up) added to a joint at phase `phase`, full stride.
fn swing(name: &str, phase: f64) -> [f64; 2] {
    let (s, c) = (libm::sin(phase), libm::cos(phase));
    match name {
        "l_ankle" => [250.0 * s, 60.0 * c.max(0.0)],
        "r_ankle" => [-250.0 * s, 60.0 * (-c).max(0.0)],
        "l_knee" => [120.0 * s, 30.0 * c.max(0.0)],
        "r_knee" => [-120.0 * s, 30.0 * (-c).max(0.0)],
        "l_wrist" => [-150.0 * s, 0.0],
        "r_wrist" => [150.0 * s, 0.0],
        "l_elbow" => [-70.0 * s, 0.0],
        "r_elbow" => [70.0 * s, 0.0],
        _ => [0.0, 0.0],
    }
}

#[derive(Debug, Clone, Copy)]
struct Agent {
    pos: [f64; 2],
    vel: [f64; 2],
    heading: f64,
    phase: f64,
}

fn norm(v: [f64; 2]) -> f64 {
    libm::sqrt(v[0] * v[0] + v[1] * v[1])
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = norm(v);
    if n < 1e-9 {
        [0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n]
    }
}

fn wrap(a: f64) -> f64 {
    let mut a = libm::fmod(a + PI, 2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

fn quantize(v: f64) -> f64 {
    libm::round(v / POSITION_QUANTUM_MM) * POSITION_QUANTUM_MM
}

struct Body {
    names: Vec<alloc::string::String>,
    rest: Vec<[f64; 3]>,
}

impl Body {
    fn new(skeleton: &Skeleton) -> Self {
        let names = skeleton.joint_names().to_vec();
        let rest = names.iter().enumerate().map(|(i, n)| rest_offset(n, i)).collect();
        Self { names, rest }
    }

    fn pose(&self, a: &Agent, gait: f64, out: &mut Vec<f64>) {
        let (s, c) = (libm::sin(a.heading), libm::cos(a.heading));
        let bob = 15.0 * gait * libm::fabs(libm::sin(a.phase));
        for (name, r) in self.names.iter().zip(&self.rest) {
            let sw = swing(name, a.phase);
            let f = r[0] + gait * sw[0];
            let l = r[1];
            let z = r[2] + gait * sw[1] + bob;
            out.extend([a.pos[0] + c * f - s * l, a.pos[1] + s * f + c * l, z]);
        }
    }
}

fn clip_rng(config: &SynthConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    rng
}

/// Clip number `index` of the stream defined by `config`.
pub fn synth_clip(config: &SynthConfig, index: u64) -> Result<MultiPersonClip> {
    generate(config, index, None)
}

/// Like [`synth_clip`] but agent `pinned` never moves from its start pose.
pub fn synth_clip_pinned(config: &SynthConfig, index: u64, pinned: usize) -> Result<MultiPersonClip> {
    if pinned >= config.persons {
        bail!(Index, "pinned agent {pinned} of {}", config.persons);
    }
    generate(config, index, Some(pinned))
}

pub fn synth_clips(config: &SynthConfig, count: usize) -> Result<Vec<MultiPersonClip>> {
    (0..count as u64).map(|i| synth_clip(config, i)).collect()
}

fn generate(config: &SynthConfig, index: u64, pinned: Option<usize>) -> Result<MultiPersonClip> {
    config.validate()?;
    let skeleton = Skeleton::default_body(config.joints, config.fps)?;
    let body = Body::new(&skeleton);
    let mut rng = clip_rng(config, index);
    let (n, frames) = (config.persons, config.duration_frames);
    let mut data: Vec<f64> = Vec::with_capacity(n * frames * config.joints * 3);

    match config.behavior {
        Behavior::ConstantVelocity => {
            let step = config.speed_mm_s / config.fps;
            for p in 0..n {
                let start = [rng.random_range(-2000.0..2000.0), rng.random_range(-2000.0..2000.0)];
                let dir = rng.random_range(-PI..PI);
                let v = [step * libm::cos(dir), step * libm::sin(dir)];
                for t in 0..frames {
                    let tt = if Some(p) == pinned { 0.0 } else { t as f64 };
                    let a = Agent {
                        pos: [start[0] + v[0] * tt, start[1] + v[1] * tt],
                        vel: v,
                        heading: dir,
                        phase: 0.0,
                    };
                    body.pose(&a, 0.0, &mut data);
                }
            }
        }
        Behavior::Circular => {
            for p in 0..n {
                let centre = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)];
                let radius = rng.random_range(1000.0..2500.0);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let omega = sign * config.speed_mm_s / radius / config.fps;
                let a0 = rng.random_range(-PI..PI);
                for t in 0..frames {
                    let tt = if Some(p) == pinned { 0.0 } else { t as f64 };
                    let ang = a0 + omega * tt;
                    let a = Agent {
                        pos: [centre[0] + radius * libm::cos(ang), centre[1] + radius * libm::sin(ang)],
                        vel: [0.0; 2],
                        heading: ang + sign * PI / 2.0,
                        phase: 2.0 * PI * radius * libm::fabs(omega) * tt / STRIDE_MM,
                    };
                    let gait = if Some(p) == pinned { 0.0 } else { 1.0 };
                    body.pose(&a, gait, &mut data);
                }
            }
            quantize_all(&mut data);
        }
        Behavior::PursuitEvade => {
            let traj = pursuit(config, &mut rng, pinned);
            let gait_of = |a: &Agent| (norm(a.vel) / config.speed_mm_s.max(1e-9)).min(1.0);
            for track in &traj {
                for a in track {
                    body.pose(a, gait_of(a), &mut data);
                }
            }
            quantize_all(&mut data);
        }
    }

    if config.noise_mm > 0.0 {
        let normal = Normal::new(0.0, config.noise_mm).map_err(|e| crate::Error::Argument(alloc::format!("{e}")))?;
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
        if config.behavior != Behavior::ConstantVelocity {
            quantize_all(&mut data);
        }
    }
    MultiPersonClip::new(skeleton, n, frames, data)
}

fn quantize_all(data: &mut [f64]) {
    data.iter_mut().for_each(|v| *v = quantize(*v));
}

/// Per-agent trajectories `[agent][frame]` of the pursuit-evade dynamics.
fn pursuit(config: &SynthConfig, rng: &mut ChaCha8Rng, pinned: Option<usize>) -> Vec<Vec<Agent>> {
    let n = config.persons;
    let dt = 1.0 / config.fps;
    let vmax = config.speed_mm_s;
    let accel = 2.5 * vmax;
    let mut agents: Vec<Agent> = (0..n)
        .map(|_| {
            let dir = rng.random_range(-PI..PI);
            let sp = vmax * rng.random_range(0.3..0.6);
            Agent {
                pos: [rng.random_range(-2000.0..2000.0), rng.random_range(-2000.0..2000.0)],
                vel: [sp * libm::cos(dir), sp * libm::sin(dir)],
                heading: dir,
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let wander: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
    if let Some(p) = pinned {
        agents[p].vel = [0.0; 2];
    }
    let pursuer = |i: usize| i % 2 == 1;
    let mut out: Vec<Vec<Agent>> = (0..n).map(|_| Vec::with_capacity(config.duration_frames)).collect();
    let total = BURN_IN_FRAMES + config.duration_frames;
    for frame in 0..total {
        if frame >= BURN_IN_FRAMES {
            for (track, a) in out.iter_mut().zip(&agents) {
                track.push(*a);
            }
        }
        let snapshot = agents.clone();
        for (i, a) in agents.iter_mut().enumerate() {
            if Some(i) == pinned {
                continue;
            }
            let nearest = |want_pursuer: bool| {
                snapshot
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i && pursuer(j) == want_pursuer)
                    .map(|(_, b)| (norm([b.pos[0] - a.pos[0], b.pos[1] - a.pos[1]]), *b))
                    .min_by(|x, y| x.0.total_cmp(&y.0))
            };
            let mut acc = [0.0; 2];
            let (drive, cap) = if pursuer(i) {
                if let Some((_, t)) = nearest(false) {
                    let lead = [t.pos[0] + 0.5 * t.vel[0], t.pos[1] + 0.5 * t.vel[1]];
                    let d = unit([lead[0] - a.pos[0], lead[1] - a.pos[1]]);
                    acc = [d[0], d[1]];
                }
                (accel, vmax)
            } else {
                let w = wander[i] + 0.4 * (frame as f64 * dt);
                acc = [0.3 * libm::cos(w), 0.3 * libm::sin(w)];
                if let Some((dist, t)) = nearest(true) {
                    let urgency = ((3000.0 - dist) / 3000.0).clamp(0.0, 1.0);
                    let d = unit([a.pos[0] - t.pos[0], a.pos[1] - t.pos[1]]);
                    acc = [acc[0] + urgency * d[0], acc[1] + urgency * d[1]];
                }
                (accel, 0.9 * vmax)
            };
            for k in 0..2 {
                let edge = COURT_HALF_MM - 800.0;
                if a.pos[k] > edge {
                    acc[k] -= (a.pos[k] - edge) / 400.0;
                } else if a.pos[k] < -edge {
                    acc[k] += (-edge - a.pos[k]) / 400.0;
                }
            }
            for b in snapshot.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, b)| b) {
                let off = [a.pos[0] - b.pos[0], a.pos[1] - b.pos[1]];
                let d = norm(off);
                if d < 600.0 {
                    let u = unit(off);
                    let push = (600.0 - d) / 300.0;
                    acc = [acc[0] + push * u[0], acc[1] + push * u[1]];
                }
            }
            for k in 0..2 {
                a.vel[k] = (a.vel[k] + drive * acc[k] * dt) * (1.0 - 0.5 * dt);
            }
            let sp = norm(a.vel);
            if sp > cap {
                a.vel = [a.vel[0] * cap / sp, a.vel[1] * cap / sp];
            }
            a.pos = [a.pos[0] + a.vel[0] * dt, a.pos[1] + a.vel[1] * dt];
            let sp = norm(a.vel);
            if sp > 50.0 {
                let target = libm::atan2(a.vel[1], a.vel[0]);
                let turn = wrap(target - a.heading).clamp(-4.0 * dt, 4.0 * dt);
                a.heading = wrap(a.heading + turn);
            }
            a.phase = libm::fmod(a.phase + 2.0 * PI * sp * dt / STRIDE_MM, 2.0 * PI);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::motion_intensity;

    fn cfg(behavior: Behavior) -> SynthConfig {
        SynthConfig {
            seed: 3,
            persons: 3,
            joints: 15,
            duration_frames: 40,
            behavior,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for b in [Behavior::ConstantVelocity, Behavior::Circular, Behavior::PursuitEvade] {
            let c = cfg(b);
            assert_eq!(synth_clips(&c, 3).unwrap(), synth_clips(&c, 3).unwrap());
            assert_ne!(synth_clip(&c, 0).unwrap(), synth_clip(&c, 1).unwrap());
        }
        let noisy = SynthConfig {
            noise_mm: 5.0,
            ..cfg(Behavior::PursuitEvade)
        };
        assert_eq!(synth_clip(&noisy, 2).unwrap(), synth_clip(&noisy, 2).unwrap());
    }

    #[test]
    fn constant_velocity_speed_is_exact() {
        let c = SynthConfig {
            speed_mm_s: 100.0,
            ..cfg(Behavior::ConstantVelocity)
        };
        for clip in synth_clips(&c, 4).unwrap() {
            let mi = motion_intensity(&clip).unwrap();
            assert!(mi.per_joint.iter().all(|v| (v - 100.0).abs() < 1e-6), "{:?}", mi.per_joint);
        }
    }

    #[test]
    fn pursuit_depends_on_the_pursued() {
        let c = cfg(Behavior::PursuitEvade);
        let free = synth_clip(&c, 0).unwrap();
        let pinned = synth_clip_pinned(&c, 0, 0).unwrap();
        // the pinned evader holds still
        assert_eq!(pinned.pose(0, 0), pinned.pose(0, 39));
        // pursuer 1 chases agent 0 or 2; its trajectory must react
        let moved = (0..40).any(|t| free.root(1, t) != pinned.root(1, t));
        assert!(moved);
        assert!(synth_clip_pinned(&c, 0, 3).is_err());
    }

    #[test]
    fn pursuit_positions_on_grid_and_in_court() {
        let clip = synth_clip(&cfg(Behavior::PursuitEvade), 5).unwrap();
        for &v in clip.positions() {
            assert_eq!(v, quantize(v));
            assert_eq!(v, v as f32 as f64);
            assert!(v.abs() < 2.0 * COURT_HALF_MM);
        }
        let mi = motion_intensity(&clip).unwrap();
        assert!(mi.per_joint[0] > 50.0 && mi.per_joint[0] < 400.0 + 1.0, "{}", mi.per_joint[0]);
    }

    #[test]
    fn reduced_skeletons() {
        let c = SynthConfig {
            joints: 5,
            ..cfg(Behavior::Circular)
        };
        let clip = synth_clip(&c, 0).unwrap();
        assert_eq!(clip.joint_count(), 5);
        assert_eq!(clip.skeleton().joint_names()[0], "pelvis");
    }
}
