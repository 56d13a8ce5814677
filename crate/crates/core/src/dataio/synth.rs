//! Deterministic synthetic RGB-D sequences: a textured box-shaped room with
//! optional solid boxes, observed from a camera circling a square path.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::kv::KeyValues;
use super::tum::{write_tum_sequence, Sequence};
use crate::cloud::{voxel_downsample, ply, PointCloud};
use crate::error::{Result, SlamError};
use crate::geometry::{Pose, Trajectory};
use crate::sensor::{DepthImage, Frame, GrayImage, Intrinsics};

/// Axis-aligned box given by its minimum and maximum corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Camera heading along the path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Facing {
    /// Toward the nearest wall; the heading turns once per loop.
    Outward,
    /// Toward the room center; the heading turns once per loop.
    Inward,
    /// Always toward the `+x` wall.
    Fixed,
}

impl std::str::FromStr for Facing {
    type Err = SlamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outward" => Ok(Facing::Outward),
            "inward" => Ok(Facing::Inward),
            "fixed" => Ok(Facing::Fixed),
            other => Err(SlamError::InvalidInput(format!("unknown facing `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    /// Room extent; the room spans `[-x/2, x/2] × [-y/2, y/2] × [0, z]`.
    pub room_size: Vector3<f64>,
    /// Solid boxes inside the room.
    pub boxes: Vec<Aabb>,
    /// Edge length of the square texture cells, meters.
    pub texture_cell: f64,
    /// Side of the square camera path centered in the room, meters.
    pub path_side: f64,
    pub camera_height: f64,
    pub facing: Facing,
    pub frame_count: usize,
    /// Fraction of the loop covered; values above 1 revisit the start.
    pub loops: f64,
    pub frame_rate: f64,
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise: f64,
    /// Per-frame yaw bias added to odometry, degrees.
    pub drift_rotation_deg: f64,
    /// Per-frame bias along the camera's vertical axis added to odometry, meters.
    pub drift_translation: f64,
    pub intrinsics: Intrinsics,
    /// Voxel size of the ground-truth surface cloud.
    pub gt_voxel: f64,
    /// Every n-th frame contributes to the ground-truth surface.
    pub gt_stride: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            room_size: Vector3::new(4.0, 4.0, 2.5),
            boxes: Vec::new(),
            texture_cell: 0.25,
            path_side: 1.0,
            camera_height: 1.25,
            facing: Facing::Outward,
            frame_count: 300,
            loops: 1.0,
            frame_rate: 30.0,
            depth_noise: 0.0,
            drift_rotation_deg: 0.0,
            drift_translation: 0.0,
            intrinsics: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 79.5,
                cy: 59.5,
                width: 160,
                height: 120,
            },
            gt_voxel: 0.01,
            gt_stride: 5,
        }
    }
}

impl SyntheticSceneSpec {
    /// Furnished room used by the loop-closure harness: a 4 × 4 × 2.5 m room
    /// with boxes along the walls, a camera facing the `+x` wall along one
    /// loop plus a twelfth of overshoot, 5 mm depth noise, and a per-frame
    /// odometry bias of 0.05° yaw and 1 mm.
    pub fn harness() -> Self {
        let b = |a: [f64; 6]| Aabb::new(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5]));
        Self {
            boxes: vec![
                b([1.3, -1.6, 0.0, 1.9, -0.9, 0.8]),
                b([-1.9, 0.4, 0.0, -1.4, 1.2, 1.2]),
                b([0.2, 1.5, 0.0, 0.9, 1.9, 0.5]),
                b([-0.8, -1.95, 0.9, -0.2, -1.6, 1.4]),
                b([1.6, 0.8, 1.6, 1.95, 1.5, 2.0]),
                b([-1.2, -1.2, 0.0, -0.9, -0.9, 0.3]),
                b([1.7, -0.5, 0.0, 2.0, -0.1, 1.6]),
                b([1.8, 0.2, 1.0, 2.0, 0.5, 1.4]),
                b([1.5, 1.1, 0.0, 1.9, 1.6, 0.6]),
            ],
            facing: Facing::Fixed,
            frame_count: 390,
            loops: 13.0 / 12.0,
            depth_noise: 0.005,
            drift_rotation_deg: 0.05,
            drift_translation: 0.001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.room_size.iter().any(|v| !(*v > 0.0)) {
            return Err(SlamError::InvalidInput("room dimensions must be positive".into()));
        }
        if self.frame_count == 0 {
            return Err(SlamError::InvalidInput("frame count must be at least 1".into()));
        }
        if !(self.texture_cell > 0.0 && self.frame_rate > 0.0 && self.gt_voxel > 0.0) || self.gt_stride == 0 {
            return Err(SlamError::InvalidInput("texture cell, frame rate and ground-truth sampling must be positive".into()));
        }
        if !(self.path_side >= 0.0 && self.loops >= 0.0 && self.depth_noise >= 0.0) {
            return Err(SlamError::InvalidInput("path side, loops and noise must be non-negative".into()));
        }
        let half = self.room_size / 2.0;
        if self.path_side / 2.0 >= half.x.min(half.y) || !(self.camera_height > 0.0 && self.camera_height < self.room_size.z) {
            return Err(SlamError::InvalidInput("camera path leaves the room".into()));
        }
        self.intrinsics.validate()
    }

    /// Parses the flat key/value form. `preset = harness` starts from
    /// [`SyntheticSceneSpec::harness`]; absent keys keep the preset's values.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut s = match kv.take_str("preset").as_deref() {
            None | Some("default") => Self::default(),
            Some("harness") => Self::harness(),
            Some(other) => return Err(SlamError::InvalidInput(format!("unknown preset `{other}`"))),
        };
        if let Some(v) = kv.take_list("room_size")? {
            if v.len() != 3 {
                return Err(SlamError::InvalidInput("room_size needs three values".into()));
            }
            s.room_size = Vector3::new(v[0], v[1], v[2]);
        }
        if let Some(text) = kv.take_str("boxes") {
            s.boxes.clear();
            for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                let v: Vec<f64> = part
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<f64>().map_err(|_| SlamError::InvalidInput(format!("bad box value `{t}`"))))
                    .collect::<Result<_>>()?;
                if v.len() != 6 {
                    return Err(SlamError::InvalidInput("each box needs six values".into()));
                }
                s.boxes.push(Aabb::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])));
            }
        }
        kv.take_into("texture_cell", &mut s.texture_cell)?;
        kv.take_into("path_side", &mut s.path_side)?;
        kv.take_into("camera_height", &mut s.camera_height)?;
        kv.take_into("facing", &mut s.facing)?;
        kv.take_into("frame_count", &mut s.frame_count)?;
        kv.take_into("loops", &mut s.loops)?;
        kv.take_into("frame_rate", &mut s.frame_rate)?;
        kv.take_into("depth_noise", &mut s.depth_noise)?;
        kv.take_into("drift_rotation_deg", &mut s.drift_rotation_deg)?;
        kv.take_into("drift_translation", &mut s.drift_translation)?;
        kv.take_into("fx", &mut s.intrinsics.fx)?;
        kv.take_into("fy", &mut s.intrinsics.fy)?;
        kv.take_into("cx", &mut s.intrinsics.cx)?;
        kv.take_into("cy", &mut s.intrinsics.cy)?;
        kv.take_into("width", &mut s.intrinsics.width)?;
        kv.take_into("height", &mut s.intrinsics.height)?;
        kv.take_into("gt_voxel", &mut s.gt_voxel)?;
        kv.take_into("gt_stride", &mut s.gt_stride)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }

    pub fn room(&self) -> Aabb {
        let h = self.room_size / 2.0;
        Aabb::new(Vector3::new(-h.x, -h.y, 0.0), Vector3::new(h.x, h.y, self.room_size.z))
    }

    /// Length of the camera path.
    pub fn path_length(&self) -> f64 {
        4.0 * self.path_side * self.loops
    }

    /// Camera position at arclength `s` along the square, starting at the
    /// middle of the `+x` side and moving counter-clockwise.
    fn path_position(&self, s: f64) -> Vector3<f64> {
        let side = self.path_side;
        let h = side / 2.0;
        let perimeter = 4.0 * side;
        let z = self.camera_height;
        if perimeter == 0.0 {
            return Vector3::new(0.0, 0.0, z);
        }
        let mut u = s.rem_euclid(perimeter);
        // the remainder of a full loop is 0, so the loop closes exactly
        if (s - perimeter * (s / perimeter).round()).abs() < 1e-12 {
            u = 0.0;
        }
        let (x, y) = if u < h {
            (h, u)
        } else if u < h + side {
            (h - (u - h), h)
        } else if u < h + 2.0 * side {
            (-h, h - (u - h - side))
        } else if u < h + 3.0 * side {
            (-h + (u - h - 2.0 * side), -h)
        } else {
            (h, -h + (u - h - 3.0 * side))
        };
        Vector3::new(x, y, z)
    }

    /// Ground-truth pose of frame `k`: yaw grows linearly with arclength by a
    /// full turn per loop, with the camera level and oriented per
    /// [`SyntheticSceneSpec::facing`].
    pub fn ground_truth_pose(&self, k: usize) -> Pose {
        let frac = if self.frame_count > 1 {
            k as f64 / (self.frame_count - 1) as f64
        } else {
            0.0
        };
        let turns = frac * self.loops;
        let s = turns * 4.0 * self.path_side;
        let yaw = std::f64::consts::TAU * turns.fract();
        let yaw = if (turns - turns.round()).abs() < 1e-12 { 0.0 } else { yaw };
        let yaw = match self.facing {
            Facing::Outward => yaw,
            Facing::Inward => yaw + std::f64::consts::PI,
            Facing::Fixed => 0.0,
        };
        let (sy, cy) = yaw.sin_cos();
        let rot = Matrix3::from_columns(&[Vector3::new(sy, -cy, 0.0), Vector3::new(0.0, 0.0, -1.0), Vector3::new(cy, sy, 0.0)]);
        Pose::from_rotation_matrix(&rot, self.path_position(s))
    }

    /// Per-frame bias composed onto each relative motion of the odometry.
    pub fn drift_bias(&self) -> Pose {
        Pose::from_axis_angle(
            &Vector3::y(),
            self.drift_rotation_deg.to_radians(),
            Vector3::new(0.0, self.drift_translation, 0.0),
        )
    }

    pub fn timestamp(&self, k: usize) -> f64 {
        (k as f64 / self.frame_rate * 1e6).round() / 1e6
    }
}

/// Surface hit by a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera depth for rays with unit z in the camera frame.
    pub t: f64,
    /// Object index: 0 is the room, `i + 1` is box `i`.
    pub object: usize,
    /// Face axis (0..3) and side (0 for min, 1 for max).
    pub axis: usize,
    pub side: usize,
}

/// Ray intersection against the room interior and the solid boxes.
pub fn raycast(room: &Aabb, boxes: &[Aabb], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    // leaving the room
    for a in 0..3 {
        if dir[a] == 0.0 {
            continue;
        }
        let (bound, side) = if dir[a] > 0.0 { (room.max[a], 1) } else { (room.min[a], 0) };
        let t = (bound - origin[a]) / dir[a];
        if t > 0.0 && best.is_none_or(|b| t < b.t) {
            best = Some(Hit { t, object: 0, axis: a, side });
        }
    }
    // entering a box
    for (i, b) in boxes.iter().enumerate() {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let mut enter_axis = (0, 0);
        let mut miss = false;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < b.min[a] || origin[a] > b.max[a] {
                    miss = true;
                    break;
                }
                continue;
            }
            let t0 = (b.min[a] - origin[a]) / dir[a];
            let t1 = (b.max[a] - origin[a]) / dir[a];
            let (near, far, side) = if t0 < t1 { (t0, t1, 0) } else { (t1, t0, 1) };
            if near > t_enter {
                t_enter = near;
                enter_axis = (a, side);
            }
            t_exit = t_exit.min(far);
        }
        if miss || t_enter > t_exit || t_enter <= 0.0 {
            continue;
        }
        if best.is_none_or(|h| t_enter < h.t) {
            best = Some(Hit {
                t: t_enter,
                object: i + 1,
                axis: enter_axis.0,
                side: enter_axis.1,
            });
        }
    }
    best
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Intensity in `[0.1, 0.9]` of the texture cell containing `p` on a face.
pub fn texture_intensity(hit: &Hit, p: &Vector3<f64>, cell: f64, seed: u64) -> f32 {
    let (b, c) = ((hit.axis + 1) % 3, (hit.axis + 2) % 3);
    let ib = (p[b] / cell).floor() as i64;
    let ic = (p[c] / cell).floor() as i64;
    let mut h = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for v in [hit.object as i64, (hit.axis * 2 + hit.side) as i64, ib, ic] {
        h = mix(h ^ v as u64);
    }
    (0.1 + 0.8 * (h >> 11) as f64 / (1u64 << 53) as f64) as f32
}

/// A generated sequence with its ground-truth surface.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub spec: SyntheticSceneSpec,
    pub sequence: Sequence,
    pub gt_surface: PointCloud,
}

/// Renders noiseless depth and intensity for a camera pose.
pub fn render(spec: &SyntheticSceneSpec, pose: &Pose, texture_seed: u64) -> (DepthImage, GrayImage) {
    let k = &spec.intrinsics;
    let room = spec.room();
    let rot = pose.rotation_matrix();
    let origin = *pose.translation();
    let mut depth = DepthImage::new(k.width, k.height);
    let mut gray = GrayImage::new(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = rot * k.ray(u as f64, v as f64);
            if let Some(hit) = raycast(&room, &spec.boxes, &origin, &dir) {
                let p = origin + dir * hit.t;
                depth.set(u, v, hit.t as f32);
                gray.set(u, v, texture_intensity(&hit, &p, spec.texture_cell, texture_seed));
            }
        }
    }
    (depth, gray)
}

/// Generates frames, ground truth, drifted odometry and the ground-truth
/// surface. Output is a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    let k = spec.intrinsics;
    let poses: Vec<Pose> = (0..spec.frame_count).map(|i| spec.ground_truth_pose(i)).collect();
    let noise = Normal::new(0.0, spec.depth_noise.max(0.0)).expect("non-negative noise");

    let rendered: Vec<(DepthImage, DepthImage, GrayImage)> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let (clean, gray) = render(spec, pose, seed);
            let mut noisy = clean.clone();
            if spec.depth_noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed.wrapping_add(1)) ^ i as u64);
                for d in noisy.data.iter_mut() {
                    if *d > 0.0 {
                        *d = (*d as f64 + noise.sample(&mut rng)).max(1e-3) as f32;
                    }
                }
            }
            (clean, noisy, gray)
        })
        .collect();

    let mut gt_points = Vec::new();
    for (i, (clean, _, _)) in rendered.iter().enumerate().step_by(spec.gt_stride) {
        for v in 0..k.height {
            for u in 0..k.width {
                let d = clean.get(u, v) as f64;
                if d > 0.0 {
                    gt_points.push(poses[i].transform_point(&k.backproject(u as f64, v as f64, d)));
                }
            }
        }
    }
    let gt_surface = voxel_downsample(&PointCloud::new(gt_points), spec.gt_voxel)?;

    let bias = spec.drift_bias();
    let mut ground_truth = Trajectory::new();
    let mut odometry = Trajectory::new();
    let mut odo = poses[0];
    let mut frames = Vec::with_capacity(spec.frame_count);
    for (i, (_, noisy, gray)) in rendered.into_iter().enumerate() {
        if i > 0 {
            let rel = poses[i - 1].inverse().compose(&poses[i]);
            odo = odo.compose(&rel).compose(&bias);
        }
        let ts = spec.timestamp(i);
        ground_truth.push(i as u64, ts, poses[i])?;
        odometry.push(i as u64, ts, odo)?;
        frames.push(Frame {
            id: i as u64,
            timestamp: ts,
            depth: noisy,
            gray,
            color: None,
            intrinsics: k,
            pose: Pose::identity(),
        });
    }
    Ok(SyntheticSequence {
        spec: spec.clone(),
        sequence: Sequence {
            intrinsics: k,
            frames,
            ground_truth,
            odometry: Some(odometry),
            dropped: 0,
            skipped: 0,
        },
        gt_surface,
    })
}

/// Writes the sequence in TUM layout plus `gt_surface.ply`.
pub fn write_synthetic(dir: impl AsRef<Path>, synth: &SyntheticSequence) -> Result<()> {
    let dir = dir.as_ref();
    write_tum_sequence(dir, &synth.sequence)?;
    ply::save_point_cloud(dir.join("gt_surface.ply"), &synth.gt_surface, ply::PlyEncoding::BinaryLittleEndian)
}
