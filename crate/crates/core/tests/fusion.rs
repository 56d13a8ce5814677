use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use slam_core::cloud::PointCloud;
use slam_core::dataio::{render, SyntheticSceneSpec};
use slam_core::fusion::{fuse_submap_surface, FusionParams};
use slam_core::geometry::Pose;
use slam_core::sensor::DepthImage;
use slam_core::submap::{fuse_features, DensityParams, Submap, FEATURE_DIM};

/// Distance from a point inside the empty room to its nearest wall, floor or
/// ceiling.
fn room_distance(spec: &SyntheticSceneSpec, p: &Vector3<f64>) -> f64 {
    let room = spec.room();
    (0..3).map(|a| (p[a] - room.min[a]).abs().min((room.max[a] - p[a]).abs())).fold(f64::INFINITY, f64::min)
}

fn rms(spec: &SyntheticSceneSpec, cloud: &PointCloud) -> f64 {
    (cloud.positions.iter().map(|p| room_distance(spec, p).powi(2)).sum::<f64>() / cloud.len() as f64).sqrt()
}

#[test]
fn noiseless_frame_lies_on_the_walls() {
    let spec = SyntheticSceneSpec::default();
    let pose = spec.ground_truth_pose(0);
    let (depth, _) = render(&spec, &pose, 0);
    let params = FusionParams::default();
    let surface = fuse_submap_surface(&[(&depth, pose)], &spec.intrinsics, &params).unwrap();
    assert!(!surface.is_empty());
    let worst = surface.positions.iter().map(|p| room_distance(&spec, p)).fold(0.0, f64::max);
    assert!(worst <= params.voxel_size / 2.0, "worst wall distance {worst}");
}

#[test]
fn averaging_noisy_frames_reduces_surface_error() {
    let spec = SyntheticSceneSpec::default();
    let pose = spec.ground_truth_pose(0);
    let (clean, _) = render(&spec, &pose, 0);
    let noise = Normal::new(0.0, 0.005).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames: Vec<DepthImage> = (0..10)
        .map(|_| {
            let mut d = clean.clone();
            for v in d.data.iter_mut().filter(|v| **v > 0.0) {
                *v += noise.sample(&mut rng) as f32;
            }
            d
        })
        .collect();
    let params = FusionParams::default();
    let single = fuse_submap_surface(&[(&frames[0], pose)], &spec.intrinsics, &params).unwrap();
    let all: Vec<(&DepthImage, Pose)> = frames.iter().map(|d| (d, pose)).collect();
    let fused = fuse_submap_surface(&all, &spec.intrinsics, &params).unwrap();
    let (e1, e10) = (rms(&spec, &single), rms(&spec, &fused));
    assert!(e10 < e1, "ten frames {e10} vs one frame {e1}");
}

fn feature(values: &[(usize, f64)]) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    for &(i, v) in values {
        f[i] = v;
    }
    f
}

#[test]
fn linked_pair_fuses_to_its_midpoint() {
    let mut a = Submap::empty(0, 0, Pose::identity(), DensityParams::default());
    let mut b = Submap::empty(1, 5, Pose::identity(), DensityParams::default());
    a.push_point(Vector3::zeros(), feature(&[(0, 1.0)]), feature(&[]), 0.01);
    b.push_point(Vector3::new(0.0, 0.0, 0.02), feature(&[(1, 1.0)]), feature(&[]), 0.01);
    b.links.insert(0, (0, 0));
    // a point seen by one submap only
    b.push_point(Vector3::new(1.0, 2.0, 3.0), feature(&[(2, 0.5)]), feature(&[(3, 0.25)]), 0.01);
    let map = fuse_features(&[a, b]).unwrap();
    assert_eq!(map.len(), 2);
    assert!((map.positions[0] - Vector3::new(0.0, 0.0, 0.01)).norm() < 1e-15);
    assert_eq!(map.geo_features[0], feature(&[(0, 0.5), (1, 0.5)]));
    assert_eq!(map.provenance[0], vec![0, 1]);
    assert_eq!(map.positions[1], Vector3::new(1.0, 2.0, 3.0));
    assert_eq!(map.geo_features[1], feature(&[(2, 0.5)]));
    assert_eq!(map.color_features[1], feature(&[(3, 0.25)]));
    assert_eq!(map.provenance[1], vec![1]);
}

#[test]
fn chain_of_three_averages_basis_features() {
    let mut submaps: Vec<Submap> = (0..3).map(|i| Submap::empty(i, i as u64, Pose::identity(), DensityParams::default())).collect();
    for (i, s) in submaps.iter_mut().enumerate() {
        s.push_point(Vector3::new(0.0, 0.0, i as f64), feature(&[(i, 1.0)]), feature(&[(i, 1.0)]), 0.01);
        if i > 0 {
            s.links.insert(0, (i - 1, 0));
        }
    }
    let map = fuse_features(&submaps).unwrap();
    assert_eq!(map.len(), 1);
    let third = 1.0 / 3.0;
    assert_eq!(map.geo_features[0], feature(&[(0, third), (1, third), (2, third)]));
    assert!((map.positions[0] - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
}

#[test]
fn broken_links_are_reported() {
    let mut a = Submap::empty(0, 0, Pose::identity(), DensityParams::default());
    a.push_point(Vector3::zeros(), feature(&[]), feature(&[]), 0.01);
    let mut b = Submap::empty(1, 1, Pose::identity(), DensityParams::default());
    b.push_point(Vector3::zeros(), feature(&[]), feature(&[]), 0.01);
    b.links.insert(0, (0, 7));
    assert!(fuse_features(&[a, b]).is_err());
}
