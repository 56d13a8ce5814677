use nalgebra::Vector3;
use slam_core::dataio::synth::raycast;
use slam_core::dataio::{render, SyntheticSceneSpec};
use slam_core::geometry::Pose;
use slam_core::sensor::{DepthImage, Frame};
use slam_core::submap::{add_points, create_submap, DensityParams, Submap};
use slam_core::tracking::{track_frame, TrackerConfig};
use slam_core::SlamError;

fn frame_at(spec: &SyntheticSceneSpec, id: u64, pose: Pose) -> Frame {
    let (depth, gray) = render(spec, &pose, 3);
    Frame {
        id,
        timestamp: id as f64,
        depth,
        gray,
        color: None,
        intrinsics: spec.intrinsics,
        pose,
    }
}

fn mapped(spec: &SyntheticSceneSpec, pose: Pose) -> (Submap, Frame) {
    let frame = frame_at(spec, 0, pose);
    let mut submap = create_submap(0, &frame, None, DensityParams::default());
    for seed in 0..4 {
        add_points(&mut submap, &frame, &pose, 20000, seed);
    }
    (submap, frame)
}

fn start_pose(spec: &SyntheticSceneSpec) -> Pose {
    spec.ground_truth_pose(40)
}

#[test]
fn small_motion_is_recovered() {
    let spec = SyntheticSceneSpec::harness();
    let gt0 = start_pose(&spec);
    let (submap, _) = mapped(&spec, gt0);
    let motion = Pose::from_axis_angle(&Vector3::new(0.3, 1.0, 0.2), 1f64.to_radians(), Vector3::new(0.006, -0.004, 0.007));
    let gt1 = gt0.compose(&motion);
    let frame = frame_at(&spec, 1, gt1);
    let (pose, stats) = track_frame(&submap, &frame, &gt0, &TrackerConfig::default()).unwrap();
    let (angle, dist) = pose.distance_to(&gt1);
    assert!(angle.to_degrees() <= 0.2, "rotation error {}°", angle.to_degrees());
    assert!(dist <= 0.003, "translation error {dist} m");
    assert!(stats.rmse_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

/// Replaces estimated normals with the analytic face normals of the scene.
fn exact_normals(spec: &SyntheticSceneSpec, submap: &mut Submap, camera: &Pose) {
    let origin = *camera.translation();
    for i in 0..submap.len() {
        let dir = submap.positions[i] - origin;
        let hit = raycast(&spec.room(), &spec.boxes, &origin, &dir).unwrap();
        let mut n = Vector3::zeros();
        n[hit.axis] = -dir[hit.axis].signum();
        submap.geo_features[i][..3].copy_from_slice(n.as_slice());
    }
}

#[test]
fn exact_initialization_stays_put() {
    let spec = SyntheticSceneSpec::harness();
    let gt0 = start_pose(&spec);
    let (mut submap, frame) = mapped(&spec, gt0);
    exact_normals(&spec, &mut submap, &gt0);
    let (pose, _) = track_frame(&submap, &frame, &gt0, &TrackerConfig::default()).unwrap();
    let (angle, dist) = pose.distance_to(&gt0);
    assert!(angle < 1e-6 && dist < 1e-6, "moved by {angle} rad, {dist} m");
}

#[test]
fn zero_depth_frame_is_lost() {
    let spec = SyntheticSceneSpec::harness();
    let gt0 = start_pose(&spec);
    let (submap, mut frame) = mapped(&spec, gt0);
    frame.depth = DepthImage::new(frame.depth.width, frame.depth.height);
    let err = track_frame(&submap, &frame, &gt0, &TrackerConfig::default()).unwrap_err();
    assert!(matches!(err, SlamError::TrackingLost(_)));
}

#[test]
fn sparse_submap_is_rejected() {
    let spec = SyntheticSceneSpec::harness();
    let frame = frame_at(&spec, 0, start_pose(&spec));
    let submap = create_submap(0, &frame, None, DensityParams::default());
    assert!(track_frame(&submap, &frame, &frame.pose, &TrackerConfig::default()).is_err());
}
