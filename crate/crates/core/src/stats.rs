//! Dataset statistics: pose diversity and motion intensity.
//!
//! Pose diversity is a greedy sequential selection over root-aligned poses
//! in input order. A pose is kept as unique when its mean per-joint
//! Euclidean distance to every pose kept so far is strictly greater than
//! the threshold. The ratio of kept poses to all poses is returned.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::motion::{root_align, MultiPersonClip, Skeleton};

fn mean_joint_distance(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a
        .chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(x, y)| libm::sqrt((0..3).map(|k| (x[k] - y[k]) * (x[k] - y[k])).sum()))
        .sum();
    sum / (a.len() / 3) as f64
}

/// Ratio of greedily retained distinct poses; each pose is `J * 3` values.
pub fn pose_diversity(poses: &[&[f64]], skeleton: &Skeleton, threshold_mm: f64) -> Result<f64> {
    if poses.is_empty() {
        bail!(Empty, "pose diversity of an empty set");
    }
    if !(threshold_mm.is_finite() && threshold_mm > 0.0) {
        bail!(Argument, "threshold must be positive, got {threshold_mm}");
    }
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for pose in poses {
        let aligned = root_align(pose, skeleton)?;
        if kept.iter().all(|k| mean_joint_distance(k, &aligned) > threshold_mm) {
            kept.push(aligned);
        }
    }
    Ok(kept.len() as f64 / poses.len() as f64)
}

/// Every pose of every clip, person-major within each clip.
pub fn clip_poses<'a>(clips: &'a [MultiPersonClip]) -> Vec<&'a [f64]> {
    clips
        .iter()
        .flat_map(|c| (0..c.person_count()).flat_map(move |p| (0..c.frame_count()).map(move |t| c.pose(p, t))))
        .collect()
}

/// Mean joint speed in mm/s.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MotionIntensity {
    pub per_joint: Vec<f64>,
    pub mean: f64,
}

/// Per joint: mean over persons and consecutive frame pairs of the
/// displacement norm, times fps.
pub fn motion_intensity(clip: &MultiPersonClip) -> Result<MotionIntensity> {
    motion_intensity_many(core::slice::from_ref(clip))
}

/// Intensity pooled over several clips sharing a skeleton.
pub fn motion_intensity_many(clips: &[MultiPersonClip]) -> Result<MotionIntensity> {
    let Some(first) = clips.first() else {
        bail!(Empty, "motion intensity of no clips");
    };
    let (j, fps) = (first.joint_count(), first.skeleton().fps());
    let mut sum = vec![0.0; j];
    let mut pairs = 0usize;
    for c in clips {
        if c.joint_count() != j || c.skeleton().fps() != fps {
            bail!(Shape, "clips must share joint count and fps");
        }
        if c.frame_count() < 2 {
            bail!(Argument, "motion intensity needs at least two frames");
        }
        for p in 0..c.person_count() {
            for t in 0..c.frame_count() - 1 {
                let (a, b) = (c.pose(p, t), c.pose(p, t + 1));
                for (k, (x, y)) in a.chunks_exact(3).zip(b.chunks_exact(3)).enumerate() {
                    sum[k] += libm::sqrt((0..3).map(|i| (y[i] - x[i]) * (y[i] - x[i])).sum());
                }
                pairs += 1;
            }
        }
    }
    let per_joint: Vec<f64> = sum.into_iter().map(|s| s / pairs as f64 * fps).collect();
    let mean = per_joint.iter().sum::<f64>() / j as f64;
    Ok(MotionIntensity { per_joint, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_poses_keep_one() {
        let sk = Skeleton::default_body(3, 25.0).unwrap();
        let pose = [0.0, 0.0, 900.0, 10.0, 0.0, 1500.0, 0.0, 20.0, 100.0];
        let poses = vec![&pose[..]; 10];
        for th in [1.0, 50.0, 1e6] {
            assert!((pose_diversity(&poses, &sk, th).unwrap() - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn two_shapes_keep_two() {
        let sk = Skeleton::default_body(2, 25.0).unwrap();
        // root-aligned joint 1 differs by 2000 mm, mean over two joints = 1000
        let a = [0.0, 0.0, 0.0, 0.0, 0.0, 1000.0];
        let b = [5.0, 5.0, 5.0, 5.0, 5.0, -995.0];
        let poses: Vec<&[f64]> = (0..10).map(|i| if i % 2 == 0 { &a[..] } else { &b[..] }).collect();
        assert!((pose_diversity(&poses, &sk, 50.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(pose_diversity(&[], &sk, 50.0).is_err());
        assert!(pose_diversity(&poses, &sk, 0.0).is_err());
    }

    #[test]
    fn static_and_uniform_intensity() {
        let sk = Skeleton::default_body(4, 25.0).unwrap();
        let still = MultiPersonClip::from_fn(sk.clone(), 2, 5, |p, _, j| [p as f64, j as f64, 1.0]).unwrap();
        assert!(motion_intensity(&still).unwrap().per_joint.iter().all(|&v| v == 0.0));
        let moving = MultiPersonClip::from_fn(sk, 2, 5, |p, t, j| [2.0 * t as f64, p as f64, j as f64]).unwrap();
        let mi = motion_intensity(&moving).unwrap();
        assert!(mi.per_joint.iter().all(|&v| (v - 50.0).abs() < 1e-12));
        assert!((mi.mean - 50.0).abs() < 1e-12);
        let one = MultiPersonClip::from_fn(Skeleton::default(), 1, 1, |_, _, _| [0.0; 3]).unwrap();
        assert!(motion_intensity(&one).is_err());
    }

    #[test]
    fn diversity_scale_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sk = Skeleton::default_body(4, 25.0).unwrap();
        let raw: Vec<Vec<f64>> = (0..40).map(|_| (0..12).map(|_| rng.random_range(-300.0..300.0)).collect()).collect();
        let scaled: Vec<Vec<f64>> = raw.iter().map(|p| p.iter().map(|v| v * 4.0).collect()).collect();
        let a: Vec<&[f64]> = raw.iter().map(|v| &v[..]).collect();
        let b: Vec<&[f64]> = scaled.iter().map(|v| &v[..]).collect();
        for th in [50.0, 100.0, 200.0] {
            assert_eq!(pose_diversity(&a, &sk, th).unwrap(), pose_diversity(&b, &sk, th * 4.0).unwrap());
        }
    }
}
