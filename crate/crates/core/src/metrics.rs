//! Reconstruction accuracy metrics.

use serde::Serialize;

use crate::cloud::{estimate_normals, NormalOrientation, PointCloud};
use crate::error::{Result, SlamError};
use crate::geometry::Pose;
use crate::registration::{icp_point_to_plane, IcpParams};

/// Default distance threshold for precision and recall, meters.
pub const DEFAULT_TAU: f64 = 0.01;

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReconMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tau: f64,
}

fn fraction_within(from: &PointCloud, to: &PointCloud, tau: f64) -> f64 {
    let index = to.spatial_index();
    let hits = from.positions.iter().filter(|p| index.nearest(p).is_some_and(|(_, d2)| d2 <= tau * tau)).count();
    100.0 * hits as f64 / from.len() as f64
}

/// Precision (share of predicted points within `tau` of the ground truth),
/// recall (the converse) and their harmonic mean. With `pre_align` the
/// prediction is first registered to the ground truth by point-to-plane ICP.
pub fn f_score(predicted: &PointCloud, ground_truth: &PointCloud, tau: f64, pre_align: bool) -> Result<ReconMetrics> {
    if predicted.is_empty() || ground_truth.is_empty() {
        return Err(SlamError::InsufficientData("F-score needs two non-empty clouds".into()));
    }
    if !(tau > 0.0) {
        return Err(SlamError::InvalidInput(format!("distance threshold must be positive, got {tau}")));
    }
    let aligned;
    let predicted = if pre_align {
        let target = estimate_normals(ground_truth, 5.0 * tau, 3, NormalOrientation::Unoriented)?;
        let params = IcpParams {
            max_corr_dist: 5.0 * tau,
            ..IcpParams::default()
        };
        match icp_point_to_plane(predicted, &target, &Pose::identity(), &params) {
            Ok(r) => {
                aligned = predicted.transformed(&r.transform);
                &aligned
            }
            Err(e) => {
                log::warn!("ICP pre-alignment skipped: {e}");
                predicted
            }
        }
    } else {
        predicted
    };
    let precision = fraction_within(predicted, ground_truth, tau);
    let recall = fraction_within(ground_truth, predicted, tau);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ReconMetrics {
        precision,
        recall,
        f1,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn grid(n: usize) -> Vec<Vector3<f64>> {
        (0..n * n).map(|i| Vector3::new((i % n) as f64 * 0.05, (i / n) as f64 * 0.05, 0.0)).collect()
    }

    #[test]
    fn identical_clouds_score_one_hundred() {
        let c = PointCloud::new(grid(20));
        let m = f_score(&c, &c, DEFAULT_TAU, false).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn half_prediction() {
        let all = grid(20);
        let half = PointCloud::new(all.iter().copied().filter(|p| p.x < 0.49).collect());
        assert_eq!(half.len(), 200);
        let m = f_score(&half, &PointCloud::new(all), DEFAULT_TAU, false).unwrap();
        assert_eq!(m.precision, 100.0);
        assert_eq!(m.recall, 50.0);
        assert!((m.f1 - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn swapping_arguments_swaps_precision_and_recall() {
        let a = PointCloud::new(grid(10));
        let b = PointCloud::new(grid(14).into_iter().map(|p| p + Vector3::new(0.003, 0.0, 0.0)).collect());
        let ab = f_score(&a, &b, DEFAULT_TAU, false).unwrap();
        let ba = f_score(&b, &a, DEFAULT_TAU, false).unwrap();
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(f_score(&PointCloud::new(vec![]), &PointCloud::new(grid(2)), 0.01, false).is_err());
    }
}
