use nalgebra::Vector3;
use proptest::prelude::*;

use slam_core::cloud::PointCloud;
use slam_core::geometry::{ate_rmse, horn_align_points, se3_exp, se3_log, Pose, Trajectory, Twist};
use slam_core::metrics::f_score;
use slam_core::place::{similarity, BowVector, KeyframeDatabase, Vocabulary};
use slam_core::pose_graph::line_process_weight;
use slam_core::submap::{fuse_features, DensityParams, Submap, FEATURE_DIM};
use slam_core::tracking::{should_trigger_keyframe, TrackerConfig};

fn twist(max_angle: f64, max_t: f64) -> impl Strategy<Value = Twist> {
    (
        prop::array::uniform3(-max_angle..max_angle),
        prop::array::uniform3(-max_t..max_t),
    )
        .prop_map(|(r, t)| Twist::new(r[0], r[1], r[2], t[0], t[1], t[2]))
}

fn pose() -> impl Strategy<Value = Pose> {
    twist(1.5, 3.0).prop_map(|xi| se3_exp(&xi))
}

fn point() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-5.0..5.0f64).prop_map(|a| Vector3::new(a[0], a[1], a[2]))
}

fn bow() -> impl Strategy<Value = BowVector> {
    prop::collection::vec((0u32..64, 0.0..1.0f64), 0..20).prop_map(BowVector::from_weights)
}

/// Three submaps with random points; each later submap links some of its
/// points to random points of the earlier ones.
fn linked_submaps() -> impl Strategy<Value = Vec<Submap>> {
    let points = prop::collection::vec((point(), prop::array::uniform4(0.0..1.0f64)), 1..12);
    (prop::collection::vec(points, 3), prop::collection::vec((0usize..12, 1usize..3, 0usize..2, 0usize..12), 0..10)).prop_map(|(sets, links)| {
        let mut submaps: Vec<Submap> = sets
            .iter()
            .enumerate()
            .map(|(id, pts)| {
                let mut s = Submap::empty(id, id as u64 * 10, Pose::identity(), DensityParams::default());
                for (p, f) in pts {
                    let mut g = [0.0; FEATURE_DIM];
                    g[..4].copy_from_slice(f);
                    let mut c = [0.0; FEATURE_DIM];
                    c[4..8].copy_from_slice(f);
                    s.push_point(*p, g, c, 0.01);
                }
                s
            })
            .collect();
        for (i, sid, prev, j) in links {
            let prev = prev % sid;
            let (n, m) = (submaps[sid].len(), submaps[prev].len());
            submaps[sid].links.insert(i % n, (prev, j % m));
        }
        submaps
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exp_log_round_trip(xi in twist(1.5, 5.0)) {
        let back = se3_log(&se3_exp(&xi));
        prop_assert!((back.0 - xi.0).norm() < 1e-9);
    }

    #[test]
    fn line_process_is_a_unit_weight_decreasing_in_residual(r in 0.0..1e3f64, dr in 0.0..1e3f64, mu in 1e-6..1e3f64) {
        let l = line_process_weight(r, mu);
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert!(line_process_weight(r + dr, mu) <= l + 1e-15);
        // stationarity of l·r + μ(√l − 1)²
        if l > 0.0 {
            let grad = r + mu * (1.0 - 1.0 / l.sqrt());
            prop_assert!(grad.abs() <= 1e-9 * (r + mu));
        }
    }

    #[test]
    fn fusion_commutes_with_rigid_motion(submaps in linked_submaps(), t in pose()) {
        let fused_then_moved = fuse_features(&submaps).unwrap().transformed(&t);
        let moved: Vec<Submap> = submaps.iter().cloned().map(|mut s| { s.apply_correction(&t); s }).collect();
        let moved_then_fused = fuse_features(&moved).unwrap();
        prop_assert_eq!(fused_then_moved.len(), moved_then_fused.len());
        for (a, b) in fused_then_moved.positions.iter().zip(&moved_then_fused.positions) {
            prop_assert!((a - b).norm() <= 1e-9);
        }
        prop_assert_eq!(fused_then_moved.geo_features, moved_then_fused.geo_features);
    }

    #[test]
    fn fused_count_subtracts_one_per_link(submaps in linked_submaps()) {
        let total: usize = submaps.iter().map(Submap::len).sum();
        let links: usize = submaps.iter().map(|s| s.links.len()).sum();
        let map = fuse_features(&submaps).unwrap();
        // links may close cycles, which remove no further points
        prop_assert!(map.len() <= total && map.len() + links >= total);
        let members: usize = map.provenance.iter().map(|p| p.len()).sum();
        prop_assert!(members >= map.len());
    }

    #[test]
    fn looser_thresholds_never_add_triggers(a in pose(), b in pose(), theta in 0.01..2.0f64, sigma in 1.0..90.0f64, scale in 1.0..3.0f64) {
        let tight = TrackerConfig { translation_trigger: theta, rotation_trigger_deg: sigma, ..TrackerConfig::default() };
        let loose = TrackerConfig { translation_trigger: theta * scale, rotation_trigger_deg: sigma * scale, ..TrackerConfig::default() };
        prop_assert!(!should_trigger_keyframe(&a, &a, &tight));
        if should_trigger_keyframe(&a, &b, &loose) {
            prop_assert!(should_trigger_keyframe(&a, &b, &tight));
        }
    }

    #[test]
    fn similarity_is_a_symmetric_unit_score(a in bow(), b in bow()) {
        let s = similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - similarity(&b, &a)).abs() < 1e-12);
        prop_assert!((similarity(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn horn_recovers_rigid_motion(points in prop::collection::vec(point(), 4..30), t in pose()) {
        let moved: Vec<_> = points.iter().map(|p| t.transform_point(p)).collect();
        let spread = points.iter().map(|p| (p - points[0]).norm()).fold(0.0, f64::max);
        prop_assume!(spread > 0.5);
        if let Ok(al) = horn_align_points(&points, &moved) {
            if !al.degenerate {
                let (angle, dist) = al.transform.distance_to(&t);
                prop_assert!(angle < 1e-6 && dist < 1e-6);
            }
        }
    }

    #[test]
    fn aligned_ate_ignores_rigid_motion(poses in prop::collection::vec(pose(), 3..20), t in pose()) {
        let mut traj = Trajectory::new();
        for (i, p) in poses.iter().enumerate() {
            traj.push(i as u64, i as f64, *p).unwrap();
        }
        let ate = ate_rmse(&traj.transformed(&t), &traj, true).unwrap();
        prop_assert!(ate <= 1e-8);
    }

    #[test]
    fn f_score_swaps_precision_and_recall(a in prop::collection::vec(point(), 1..60), b in prop::collection::vec(point(), 1..60)) {
        let (a, b) = (PointCloud::new(a), PointCloud::new(b));
        let ab = f_score(&a, &b, 1.0, false).unwrap();
        let ba = f_score(&b, &a, 1.0, false).unwrap();
        prop_assert!((ab.precision - ba.recall).abs() < 1e-9);
        prop_assert!((ab.recall - ba.precision).abs() < 1e-9);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-9);
    }
}

#[test]
fn inverted_index_matches_brute_force() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut db = KeyframeDatabase::new(Vocabulary::new(0));
    let mut vectors = Vec::new();
    for i in 0..100 {
        let v = BowVector::from_weights((0..30).map(|_| (rng.random_range(0..200u32), rng.random_range(0.0..1.0))));
        db.add(i as u64, i / 3, v.clone());
        vectors.push((i as u64, i / 3, v));
    }
    for q in 0..20 {
        let query = BowVector::from_weights((0..30).map(|_| (rng.random_range(0..200u32), rng.random_range(0.0..1.0))));
        let submap = 40 + q;
        let got = db.query(&query, submap, 5, 0.05, 2);
        let mut want: Vec<(u64, f64)> = vectors
            .iter()
            .filter(|(_, s, _)| s.abs_diff(submap) >= 2)
            .map(|(id, _, v)| (*id, similarity(&query, v)))
            .filter(|(_, s)| *s > 0.05)
            .collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(5);
        assert_eq!(got.len(), want.len());
        for (g, (id, s)) in got.iter().zip(&want) {
            assert!((g.score - s).abs() < 1e-9, "score {} vs {s}", g.score);
            // ties within rounding may reorder
            if (g.score - s).abs() > 1e-12 || g.keyframe_id != *id {
                assert!(want.iter().any(|(wid, ws)| *wid == g.keyframe_id && (ws - g.score).abs() < 1e-9));
            }
        }
    }
}
