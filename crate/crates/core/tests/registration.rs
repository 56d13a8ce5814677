use nalgebra::Vector3;

use slam_core::cloud::{estimate_normals, NormalOrientation, PointCloud};
use slam_core::dataio::{render, Facing, SyntheticSceneSpec};
use slam_core::fusion::{fuse_submap_surface, FusionParams};
use slam_core::geometry::Pose;
use slam_core::registration::{compute_loop_constraint, icp_point_to_plane, prefilter_loop_edges, LoopRegistrationParams};
use slam_core::sensor::DepthImage;

/// Fused surface of the harness room seen from cameras facing its center.
fn room_surface(seed: u64) -> PointCloud {
    let spec = SyntheticSceneSpec {
        facing: Facing::Inward,
        ..SyntheticSceneSpec::harness()
    };
    let views: Vec<(DepthImage, Pose)> = (0..40)
        .step_by(5)
        .map(|i| {
            let pose = spec.ground_truth_pose(i);
            (render(&spec, &pose, 0).0, pose)
        })
        .collect();
    let refs: Vec<(&DepthImage, Pose)> = views.iter().map(|(d, p)| (d, *p)).collect();
    let params = FusionParams {
        seed,
        ..FusionParams::default()
    };
    fuse_submap_surface(&refs, &spec.intrinsics, &params).unwrap()
}

#[test]
fn global_registration_recovers_a_large_offset() {
    let target = room_surface(0);
    let offset = Pose::from_axis_angle(&Vector3::new(0.2, 0.3, 1.0), 25f64.to_radians(), Vector3::new(0.4, -0.3, 0.2));
    let source = room_surface(1).transformed(&offset);
    let c = compute_loop_constraint(1, 0, &source, &target, &LoopRegistrationParams::default()).unwrap();
    let (angle, dist) = c.transform.distance_to(&offset.inverse());
    assert!(angle.to_degrees() < 1.0 && dist < 0.02, "error {:.3} deg {dist:.4} m", angle.to_degrees());
    assert!(c.fitness > 0.5);
}

#[test]
fn icp_refines_a_small_perturbation() {
    let target = estimate_normals(&room_surface(0), 0.05, 3, NormalOrientation::Unoriented).unwrap();
    let source = room_surface(2);
    let init = Pose::from_axis_angle(&Vector3::z(), 0.3f64.to_radians(), Vector3::new(0.005, -0.005, 0.0));
    let params = LoopRegistrationParams::default();
    let r = icp_point_to_plane(&source, &target, &init, &params.icp).unwrap();
    let (angle, dist) = r.transform.distance_to(&Pose::identity());
    assert!(angle.to_degrees() < 0.1 && dist < 0.003, "error {:.3} deg {dist:.4} m", angle.to_degrees());
    assert!(r.rmse_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

#[test]
fn prefilter_keeps_consistent_constraints() {
    let target = room_surface(0);
    let source = room_surface(3);
    let params = LoopRegistrationParams::default();
    let c = compute_loop_constraint(1, 0, &source, &target, &params).unwrap();
    let (kept, _) = prefilter_loop_edges(vec![c.clone(), c], 0.15, 0.1);
    assert_eq!(kept.len(), 2);
}

