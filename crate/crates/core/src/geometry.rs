//! Rigid-body algebra, trajectories and trajectory error metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::Mul;
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Matrix4, Quaternion, Translation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Result, SlamError};

const SMALL_ANGLE: f64 = 1e-8;

/// Rigid transform in SE(3). The rotation is kept as a unit quaternion and is
/// renormalized whenever a pose is constructed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Builds a pose from quaternion components in (x, y, z, w) order.
    pub fn from_parts(translation: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        Self::new(
            UnitQuaternion::new_normalize(Quaternion::new(qw, qx, qy, qz)),
            translation,
        )
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = match nalgebra::Unit::try_new(*axis, 1e-12) {
            Some(unit) => UnitQuaternion::from_axis_angle(&unit, angle),
            None => UnitQuaternion::identity(),
        };
        Self::new(rotation, translation)
    }

    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.to_isometry().to_homogeneous()
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.rotation, iso.translation.vector)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in [0, π].
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.norm()
    }

    /// Rotation angle (radians) and translation distance between two poses.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rotation_angle(), (self.translation - other.translation).norm())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Tangent-space coordinates `(rx, ry, rz, tx, ty, tz)`: rotation vector in
/// radians followed by the translational part in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Twist(Vector6::new(rx, ry, rz, tx, ty, tz))
    }

    pub fn rotation_part(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3), the `V` matrix coupling rotation and translation.
fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * w + w2 / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() + (1.0 - theta.cos()) / t2 * w + (theta - theta.sin()) / (t2 * theta) * w2
    }
}

fn left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * w + w2 / 12.0
    } else {
        let half = 0.5 * theta;
        let coeff = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - 0.5 * w + coeff * w2
    }
}

/// Exponential map from a twist to a rigid transform.
pub fn se3_exp(xi: &Twist) -> Pose {
    let omega = xi.rotation_part();
    let rotation = UnitQuaternion::from_scaled_axis(omega);
    let translation = left_jacobian(&omega) * xi.translation_part();
    Pose::new(rotation, translation)
}

/// Logarithm map, inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &Pose) -> Twist {
    let omega = pose.rotation.scaled_axis();
    let v = left_jacobian_inverse(&omega) * pose.translation;
    Twist(Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
}

/// Time-ordered sequence of camera poses (world from camera).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TrajectoryEntry>) -> Result<Self> {
        let mut traj = Trajectory::new();
        for e in entries {
            traj.push(e.frame_id, e.timestamp, e.pose)?;
        }
        Ok(traj)
    }

    /// Appends a pose; timestamps must increase strictly and ids must be unique.
    pub fn push(&mut self, frame_id: u64, timestamp: f64, pose: Pose) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if timestamp <= last.timestamp {
                return Err(SlamError::InvalidInput(format!(
                    "timestamp {timestamp} does not follow {}",
                    last.timestamp
                )));
            }
        }
        if self.entries.iter().any(|e| e.frame_id == frame_id) {
            return Err(SlamError::InvalidInput(format!("duplicate frame id {frame_id}")));
        }
        self.entries.push(TrajectoryEntry {
            frame_id,
            timestamp,
            pose,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> {
        self.entries.iter().map(|e| &e.pose)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|e| e.pose.translation).collect()
    }

    pub fn get(&self, frame_id: u64) -> Option<&TrajectoryEntry> {
        self.entries.iter().find(|e| e.frame_id == frame_id)
    }

    pub fn set_pose(&mut self, frame_id: u64, pose: Pose) -> bool {
        match self.entries.iter_mut().find(|e| e.frame_id == frame_id) {
            Some(e) => {
                e.pose = pose;
                true
            }
            None => false,
        }
    }

    /// Returns a copy with every pose left-multiplied by `t`.
    pub fn transformed(&self, t: &Pose) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|e| TrajectoryEntry {
                    pose: t.compose(&e.pose),
                    ..*e
                })
                .collect(),
        }
    }

    /// Sum of distances between consecutive positions.
    pub fn path_length(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
            .sum()
    }

    /// Parses the `timestamp tx ty tz qx qy qz qw` text format. Frame ids are
    /// assigned from the line order; `#` starts a comment.
    pub fn read_tum<R: BufRead>(reader: R) -> Result<Self> {
        let mut traj = Trajectory::new();
        let mut next_id = 0u64;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = trimmed
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SlamError::parse(idx + 1, e.to_string()))?;
            if vals.len() != 8 {
                return Err(SlamError::parse(
                    idx + 1,
                    format!("expected 8 fields, found {}", vals.len()),
                ));
            }
            let pose = Pose::from_parts(Vector3::new(vals[1], vals[2], vals[3]), vals[4], vals[5], vals[6], vals[7]);
            traj.push(next_id, vals[0], pose)
                .map_err(|e| SlamError::parse(idx + 1, e.to_string()))?;
            next_id += 1;
        }
        Ok(traj)
    }

    pub fn to_tum_string(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let t = e.pose.translation;
            let q = e.pose.rotation.quaternion();
            let _ = writeln!(
                out,
                "{:.6} {} {} {} {} {} {} {}",
                e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
        }
        out
    }

    pub fn write_tum<W: Write>(&self, mut writer: W) -> Result<()> {
        writer.write_all(self.to_tum_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_tum(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tum_string())?;
        Ok(())
    }
}

/// Result of a closed-form rigid alignment.
#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub transform: Pose,
    /// Source points are (near) collinear, so the rotation about their line is
    /// not determined. The least-squares solution is still returned.
    pub degenerate: bool,
}

/// Closed-form absolute orientation (unit-quaternion method): the rigid `T`
/// minimizing `Σ |T·source_i − target_i|²`.
pub fn horn_align_points(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(SlamError::InvalidInput(format!(
            "point counts differ: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(SlamError::InsufficientData(format!(
            "need at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vector3<f64>>() / n;
    let ct = target.iter().sum::<Vector3<f64>>() / n;

    let mut s = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in source.iter().zip(target) {
        let da = a - cs;
        let db = b - ct;
        s += da * db.transpose();
        spread += da * da.transpose();
    }

    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = nmat.symmetric_eigen();
    let best = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(best);
    let rotation = UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3]));
    let translation = ct - rotation * cs;

    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let degenerate = ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0].max(1e-300);

    Ok(Alignment {
        transform: Pose::new(rotation, translation),
        degenerate,
    })
}

/// Aligns the translations of `source` onto `target`, pairing poses by index.
pub fn horn_align(source: &Trajectory, target: &Trajectory) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(SlamError::InvalidInput(format!(
            "trajectory lengths differ: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    horn_align_points(&source.positions(), &target.positions())
}

/// Root-mean-square translational error, pairing poses by frame id. With
/// `align`, the estimate is first rigidly aligned onto the ground truth.
pub fn ate_rmse(estimated: &Trajectory, ground_truth: &Trajectory, align: bool) -> Result<f64> {
    if estimated.len() != ground_truth.len() {
        return Err(SlamError::MismatchedFrames(format!(
            "{} estimated vs {} ground-truth poses",
            estimated.len(),
            ground_truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(SlamError::InsufficientData("empty trajectories".into()));
    }
    let gt_by_id: HashMap<u64, &TrajectoryEntry> =
        ground_truth.entries().iter().map(|e| (e.frame_id, e)).collect();
    let mut est_pts = Vec::with_capacity(estimated.len());
    let mut gt_pts = Vec::with_capacity(estimated.len());
    for e in estimated.entries() {
        let g = gt_by_id
            .get(&e.frame_id)
            .ok_or_else(|| SlamError::MismatchedFrames(format!("frame {} has no ground truth", e.frame_id)))?;
        est_pts.push(e.pose.translation);
        gt_pts.push(g.pose.translation);
    }
    let transform = if align {
        horn_align_points(&est_pts, &gt_pts)?.transform
    } else {
        Pose::identity()
    };
    let sq: f64 = est_pts
        .iter()
        .zip(&gt_pts)
        .map(|(e, g)| (transform.transform_point(e) - g).norm_squared())
        .sum();
    Ok((sq / est_pts.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Pose::from_axis_angle(&axis, rng.random_range(0.0..3.0), t)
    }

    fn traj_from_points(points: &[Vector3<f64>]) -> Trajectory {
        let mut t = Trajectory::new();
        for (i, p) in points.iter().enumerate() {
            t.push(i as u64, i as f64 * 0.1, Pose::from_translation(*p)).unwrap();
        }
        t
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Twist::zero());
        assert!(p.rotation_angle() < 1e-15);
        assert!(p.translation_norm() < 1e-15);
    }

    #[test]
    fn exp_quarter_turn_about_z_maps_x_to_y() {
        let p = se3_exp(&Twist::new(0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0));
        let y = p.transform_point(&Vector3::x());
        assert!((y - Vector3::y()).norm() < 1e-12);
        assert!(p.translation_norm() < 1e-15);
    }

    #[test]
    fn log_inverts_exp_on_random_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut r = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let angle = rng.random_range(0.0..(PI - 1e-3));
            r = r.normalize() * angle;
            let xi = Twist::new(r.x, r.y, r.z, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let back = se3_log(&se3_exp(&xi));
            assert!((back.0 - xi.0).norm() < 1e-9, "{:?} vs {:?}", back, xi);
        }
    }

    #[test]
    fn small_twists_use_stable_series() {
        let xi = Twist::new(1e-10, -2e-10, 5e-11, 0.3, -0.1, 0.2);
        let back = se3_log(&se3_exp(&xi));
        assert!((back.0 - xi.0).norm() < 1e-12);
    }

    #[test]
    fn composition_inverse_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let id = a.inverse().compose(&a);
            assert!(id.rotation_angle() < 1e-9 && id.translation_norm() < 1e-9);
            let lhs = (a * b) * c;
            let rhs = a * (b * c);
            let (dr, dt) = lhs.distance_to(&rhs);
            assert!(dr < 1e-9 && dt < 1e-9);
            assert!((lhs.rotation().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn horn_identity_on_identical_sets() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.5), Vector3::new(-1.0, 0.3, 1.0)];
        let a = horn_align_points(&pts, &pts).unwrap();
        assert!(a.transform.rotation_angle() < 1e-12);
        assert!(a.transform.translation_norm() < 1e-12);
        assert!(!a.degenerate);
    }

    #[test]
    fn horn_recovers_quarter_turn_from_three_points() {
        // (1,0,0)->(0,1,0), (0,1,0)->(-1,0,0), (0,0,1)->(0,0,1)
        let src = vec![Vector3::x(), Vector3::y(), Vector3::z()];
        let dst = vec![Vector3::y(), -Vector3::x(), Vector3::z()];
        let a = horn_align_points(&src, &dst).unwrap();
        let expected = Pose::from_axis_angle(&Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let (dr, dt) = a.transform.distance_to(&expected);
        assert!(dr < 1e-12 && dt < 1e-12);
    }

    #[test]
    fn horn_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = random_pose(&mut rng);
            let src: Vec<_> = (0..30)
                .map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                .collect();
            let dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
            let a = horn_align_points(&src, &dst).unwrap();
            let (dr, dt) = a.transform.distance_to(&t);
            assert!(dr < 1e-9 && dt < 1e-9, "dr {dr} dt {dt}");
        }
    }

    #[test]
    fn horn_flags_collinear_and_rejects_short_input() {
        let src = vec![Vector3::zeros(), Vector3::x(), 2.0 * Vector3::x(), 3.0 * Vector3::x()];
        let dst: Vec<_> = src.iter().map(|p| p + Vector3::new(0.0, 1.0, 0.0)).collect();
        let a = horn_align_points(&src, &dst).unwrap();
        assert!(a.degenerate);
        // translation-only residual is still exact
        for (s, d) in src.iter().zip(&dst) {
            assert!((a.transform.transform_point(s) - d).norm() < 1e-9);
        }
        let err = horn_align_points(&src[..2], &dst[..2]).unwrap_err();
        assert!(matches!(err, SlamError::InsufficientData(_)));
    }

    #[test]
    fn ate_examples() {
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64 * 0.1, (i as f64 * 0.7).sin(), 0.1 * i as f64 * i as f64)).collect();
        let gt = traj_from_points(&pts);
        assert_eq!(ate_rmse(&gt, &gt, false).unwrap(), 0.0);
        assert!(ate_rmse(&gt, &gt, true).unwrap() < 1e-12);

        let d = Vector3::new(0.3, -0.4, 0.0);
        let shifted = gt.transformed(&Pose::from_translation(d));
        assert!((ate_rmse(&shifted, &gt, false).unwrap() - 0.5).abs() < 1e-12);
        assert!(ate_rmse(&shifted, &gt, true).unwrap() < 1e-9);
    }

    #[test]
    fn ate_rejects_mismatched_ids() {
        let a = traj_from_points(&[Vector3::zeros(), Vector3::x(), Vector3::y()]);
        let mut b = Trajectory::new();
        for (i, e) in a.entries().iter().enumerate() {
            b.push(i as u64 + 5, e.timestamp, e.pose).unwrap();
        }
        assert!(matches!(ate_rmse(&a, &b, false), Err(SlamError::MismatchedFrames(_))));
    }

    #[test]
    fn trajectory_rejects_unordered_timestamps_and_duplicate_ids() {
        let mut t = Trajectory::new();
        t.push(0, 1.0, Pose::identity()).unwrap();
        assert!(t.push(1, 1.0, Pose::identity()).is_err());
        assert!(t.push(0, 2.0, Pose::identity()).is_err());
    }

    #[test]
    fn tum_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Trajectory::new();
        for i in 0..20 {
            t.push(i, 1305031102.175304 + i as f64 * 0.033, random_pose(&mut rng)).unwrap();
        }
        let text = t.to_tum_string();
        let back = Trajectory::read_tum(text.as_bytes()).unwrap();
        assert_eq!(back.len(), t.len());
        assert_eq!(back.to_tum_string(), text);
        for (a, b) in back.entries().iter().zip(t.entries()) {
            assert!((a.timestamp - b.timestamp).abs() <= 5e-7);
            let (dr, dt) = a.pose.distance_to(&b.pose);
            assert!(dr < 1e-12 && dt < 1e-12);
        }
    }

    #[test]
    fn tum_reader_reports_bad_lines() {
        let err = Trajectory::read_tum("# header\n0.0 1 2 3 0 0 0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, SlamError::Parse { line: 2, .. }));
    }
}
