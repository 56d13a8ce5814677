//! Frame-to-model tracking against the active submap and the motion trigger
//! for new global keyframes.

use std::fmt::Write as _;

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::SpatialIndex;
use crate::error::{Result, SlamError};
use crate::geometry::{se3_exp, Pose, Twist};
use crate::sensor::Frame;
use crate::submap::{depth_normal, Submap};

const MIN_MAP_POINTS: usize = 100;
const MIN_INLIERS: usize = 6;
const MAX_HALVINGS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Translation trigger θ in meters.
    pub translation_trigger: f64,
    /// Rotation trigger σ in degrees.
    pub rotation_trigger_deg: f64,
    pub max_corr_dist: f64,
    pub max_iterations: usize,
    pub huber_delta: f64,
    /// Valid-depth pixels sampled per frame.
    pub samples: usize,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            translation_trigger: 0.3,
            rotation_trigger_deg: 20.0,
            max_corr_dist: 0.1,
            max_iterations: 20,
            huber_delta: 0.05,
            samples: 1500,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.translation_trigger > 0.0) || !(self.rotation_trigger_deg > 0.0) {
            return Err(SlamError::InvalidInput("keyframe triggers must be positive".into()));
        }
        if !(self.max_corr_dist > 0.0) || !(self.huber_delta > 0.0) || self.samples == 0 {
            return Err(SlamError::InvalidInput("invalid tracker settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingStats {
    /// Point-to-plane RMSE over inliers at the returned pose.
    pub rmse: f64,
    pub inliers: usize,
    pub iterations: usize,
    /// RMSE after each accepted step, starting at `init`.
    pub rmse_history: Vec<f64>,
}

struct Model {
    positions: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    index: SpatialIndex,
}

/// Pairs whose normals differ by more than about 37° are rejected.
const MIN_NORMAL_COSINE: f64 = 0.8;

struct Sample {
    point: Vector3<f64>,
    normal: Vector3<f64>,
}

struct Association {
    /// Transformed sample, map point index, point-to-plane residual.
    pairs: Vec<(Vector3<f64>, usize, f64)>,
    rmse: f64,
}

fn associate(model: &Model, samples: &[Sample], pose: &Pose, max_corr: f64) -> Association {
    let max2 = max_corr * max_corr;
    let mut pairs = Vec::with_capacity(samples.len());
    let mut sq = 0.0;
    for s in samples {
        let q = pose.transform_point(&s.point);
        if let Some((j, d2)) = model.index.nearest(&q) {
            if d2 <= max2 && pose.rotate_vector(&s.normal).dot(&model.normals[j]) >= MIN_NORMAL_COSINE {
                let r = model.normals[j].dot(&(q - model.positions[j]));
                sq += r * r;
                pairs.push((q, j, r));
            }
        }
    }
    let rmse = if pairs.is_empty() { f64::INFINITY } else { (sq / pairs.len() as f64).sqrt() };
    Association { pairs, rmse }
}

/// Camera-frame back-projections and normals of `n` valid-depth pixels drawn
/// uniformly with replacement. Pixels without a reliable normal are dropped.
fn sample_pixels(frame: &Frame, n: usize, seed: u64) -> Vec<Sample> {
    let k = &frame.intrinsics;
    let valid: Vec<usize> = (0..k.pixel_count()).filter(|&i| frame.depth.data[i] > 0.0).collect();
    if valid.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter_map(|_| {
            let px = valid[rng.random_range(0..valid.len())];
            let (u, v) = (px % k.width, px / k.width);
            let normal = depth_normal(frame, u, v)?;
            Some(Sample {
                point: k.backproject(u as f64, v as f64, frame.depth.data[px] as f64),
                normal,
            })
        })
        .collect()
}

/// Refines the world-from-camera pose of `frame` by Huber-weighted
/// point-to-plane Gauss–Newton against the submap's points and normals.
///
/// One pixel sample is drawn per frame and re-associated to the nearest map
/// point at every iteration; pairs with incompatible normals are rejected.
/// Steps that would raise the inlier RMSE are halved, so the RMSE history is
/// non-increasing.
pub fn track_frame(submap: &Submap, frame: &Frame, init: &Pose, cfg: &TrackerConfig) -> Result<(Pose, TrackingStats)> {
    cfg.validate()?;
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for i in 0..submap.len() {
        let n = submap.normal(i);
        let len = n.norm();
        if len > 0.5 {
            positions.push(submap.positions[i]);
            normals.push(n / len);
        }
    }
    if positions.len() < MIN_MAP_POINTS {
        return Err(SlamError::InsufficientData(format!(
            "submap {} has {} points with normals, tracking needs {MIN_MAP_POINTS}",
            submap.id,
            positions.len()
        )));
    }
    let model = Model {
        index: SpatialIndex::new(&positions),
        positions,
        normals,
    };
    let samples = sample_pixels(frame, cfg.samples, cfg.seed ^ frame.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut pose = *init;
    let mut assoc = associate(&model, &samples, &pose, cfg.max_corr_dist);
    if assoc.pairs.len() < MIN_INLIERS {
        return Err(SlamError::TrackingLost(format!(
            "frame {}: {} correspondences",
            frame.id,
            assoc.pairs.len()
        )));
    }
    let mut history = vec![assoc.rmse];
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (q, j, r) in &assoc.pairs {
            let n = model.normals[*j];
            let w = if r.abs() <= cfg.huber_delta { 1.0 } else { cfg.huber_delta / r.abs() };
            let c = q.cross(&n);
            let jac = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
            h += w * jac * jac.transpose();
            g += w * jac * *r;
        }
        let Some(chol) = h.cholesky() else { break };
        let mut step = -chol.solve(&g);
        if step.norm() < 1e-10 {
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = se3_exp(&Twist(step)).compose(&pose);
            let next = associate(&model, &samples, &candidate, cfg.max_corr_dist);
            if next.pairs.len() >= MIN_INLIERS && next.rmse <= assoc.rmse {
                accepted = Some((candidate, next));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, next)) = accepted else { break };
        let small = step.norm() < 1e-7;
        pose = candidate;
        assoc = next;
        history.push(assoc.rmse);
        iterations += 1;
        if small {
            break;
        }
    }
    Ok((
        pose,
        TrackingStats {
            rmse: assoc.rmse,
            inliers: assoc.pairs.len(),
            iterations,
            rmse_history: history,
        },
    ))
}

/// True iff the relative rotation exceeds σ or the relative translation
/// exceeds θ.
pub fn should_trigger_keyframe(current: &Pose, keyframe: &Pose, cfg: &TrackerConfig) -> bool {
    let (angle, dist) = current.distance_to(keyframe);
    angle.to_degrees() > cfg.rotation_trigger_deg || dist > cfg.translation_trigger
}

/// `last ∘ (prev_last⁻¹ ∘ last)`.
pub fn constant_velocity(prev_last: &Pose, last: &Pose) -> Pose {
    last.compose(&prev_last.inverse().compose(last))
}

/// Per-frame tracking log written as CSV.
#[derive(Clone, Debug, Default)]
pub struct TrackingLog {
    rows: Vec<(u64, f64, usize, bool, bool)>,
}

impl TrackingLog {
    pub fn record(&mut self, frame_id: u64, rmse: f64, inliers: usize, triggered: bool, lost: bool) {
        self.rows.push((frame_id, rmse, inliers, triggered, lost));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn lost_count(&self) -> usize {
        self.rows.iter().filter(|r| r.4).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,rmse,inliers,triggered,lost\n");
        for (id, rmse, inliers, triggered, lost) in &self.rows {
            let _ = writeln!(out, "{id},{rmse:.6},{inliers},{},{}", *triggered as u8, *lost as u8);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrackerConfig {
        TrackerConfig::default()
    }

    #[test]
    fn identical_poses_do_not_trigger() {
        let p = Pose::from_axis_angle(&Vector3::y(), 0.3, Vector3::new(1.0, 2.0, 3.0));
        assert!(!should_trigger_keyframe(&p, &p, &cfg()));
    }

    #[test]
    fn thresholds_trigger() {
        let kf = Pose::identity();
        let rot = Pose::from_axis_angle(&Vector3::z(), 25f64.to_radians(), Vector3::zeros());
        assert!(should_trigger_keyframe(&rot, &kf, &cfg()));
        let small_rot = Pose::from_axis_angle(&Vector3::z(), 19f64.to_radians(), Vector3::zeros());
        assert!(!should_trigger_keyframe(&small_rot, &kf, &cfg()));
        let tr = Pose::from_translation(Vector3::new(0.31, 0.0, 0.0));
        assert!(should_trigger_keyframe(&tr, &kf, &cfg()));
        let short = Pose::from_translation(Vector3::new(0.29, 0.0, 0.0));
        assert!(!should_trigger_keyframe(&short, &kf, &cfg()));
    }

    #[test]
    fn constant_velocity_extrapolates_exactly() {
        let a = Pose::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.2, Vector3::new(0.1, 0.0, 0.3));
        let step = Pose::from_axis_angle(&Vector3::y(), 0.05, Vector3::new(0.01, 0.0, 0.02));
        let b = a.compose(&step);
        let c = constant_velocity(&a, &b);
        let (angle, dist) = c.distance_to(&b.compose(&step));
        assert!(angle < 1e-12 && dist < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let mut log = TrackingLog::default();
        log.record(0, 0.0, 10, false, false);
        log.record(1, 0.01, 8, true, true);
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.ends_with("1,0.010000,8,1,1\n"));
        assert_eq!(log.lost_count(), 1);
    }
}
