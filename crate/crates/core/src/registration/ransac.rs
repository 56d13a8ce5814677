//! Feature-matched RANSAC global registration.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fpfh::FpfhFeatures;
use super::RegistrationResult;
use crate::cloud::{PointCloud, SpatialIndex};
use crate::error::{Result, SlamError};
use crate::geometry::{horn_align_points, Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct RansacParams {
    pub max_iterations: usize,
    pub confidence: f64,
    pub max_corr_dist: f64,
    /// Corresponding edge lengths must agree within this ratio.
    pub edge_length_ratio: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
            confidence: 0.95,
            max_corr_dist: 0.075,
            edge_length_ratio: 0.9,
            seed: 0,
        }
    }
}

/// Inlier statistics of `transform` applied to `source` against `target`.
pub(crate) fn evaluate(
    source: &[Vector3<f64>],
    target: &SpatialIndex,
    transform: &Pose,
    max_corr_dist: f64,
) -> (usize, f64) {
    let max2 = max_corr_dist * max_corr_dist;
    let mut inliers = 0;
    let mut sq = 0.0;
    for p in source {
        if let Some((_, d2)) = target.nearest(&transform.transform_point(p)) {
            if d2 <= max2 {
                inliers += 1;
                sq += d2;
            }
        }
    }
    let rmse = if inliers > 0 { (sq / inliers as f64).sqrt() } else { 0.0 };
    (inliers, rmse)
}

fn edge_lengths_agree(src: &[Vector3<f64>; 3], tgt: &[Vector3<f64>; 3], ratio: f64) -> bool {
    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
        let ls = (src[a] - src[b]).norm();
        let lt = (tgt[a] - tgt[b]).norm();
        if ls < ratio * lt || lt < ratio * ls {
            return false;
        }
    }
    true
}

/// RANSAC over triples of feature correspondences.
///
/// Each source point is paired with the target point whose histogram is
/// nearest. A hypothesis is estimated from three random pairs, pruned by the
/// edge-length and distance checks, then scored by its inlier count (ties by
/// RMSE). The search stops at `max_iterations` or once the number of
/// iterations suggested by `confidence` is reached, where the inlier ratio is
/// the fraction of feature pairs that agree with the best hypothesis.
/// The winning hypothesis is re-estimated on all consistent pairs. If no
/// hypothesis passes the checks the result is the identity with fitness 0 and
/// `valid == false`.
pub fn global_registration(
    source: &PointCloud,
    target: &PointCloud,
    source_features: &FpfhFeatures,
    target_features: &FpfhFeatures,
    params: &RansacParams,
) -> Result<RegistrationResult> {
    if source.is_empty() || target.is_empty() {
        return Err(SlamError::InsufficientData("registration needs non-empty clouds".into()));
    }
    if source_features.len() != source.len() || target_features.len() != target.len() {
        return Err(SlamError::InvalidInput("feature count differs from point count".into()));
    }
    if !(params.confidence > 0.0 && params.confidence < 1.0) || !(params.max_corr_dist > 0.0) {
        return Err(SlamError::InvalidInput("invalid RANSAC parameters".into()));
    }
    let failure = RegistrationResult::failed();
    if source.len() < 3 {
        return Ok(failure);
    }

    let matches = source_features.nearest_in(target_features);
    let src = &source.positions;
    let tgt = &target.positions;
    let index = target.spatial_index();
    let max2 = params.max_corr_dist * params.max_corr_dist;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Pose, usize, f64)> = None;
    let mut limit = params.max_iterations;
    let mut it = 0;
    while it < limit {
        it += 1;
        let mut ids = [0usize; 3];
        ids[0] = rng.random_range(0..src.len());
        ids[1] = rng.random_range(0..src.len());
        ids[2] = rng.random_range(0..src.len());
        if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
            continue;
        }
        let s = ids.map(|i| src[i]);
        let t = ids.map(|i| tgt[matches[i]]);
        if !edge_lengths_agree(&s, &t, params.edge_length_ratio) {
            continue;
        }
        let Ok(align) = horn_align_points(&s, &t) else { continue };
        if align.degenerate {
            continue;
        }
        let x = align.transform;
        if s.iter().zip(&t).any(|(a, b)| (x.transform_point(a) - b).norm_squared() > max2) {
            continue;
        }
        let (inliers, rmse) = evaluate(src, &index, &x, params.max_corr_dist);
        let better = match &best {
            None => inliers > 0,
            Some((_, bi, br)) => inliers > *bi || (inliers == *bi && rmse < *br),
        };
        if better {
            // probability that one feature pair agrees with the hypothesis
            let agreeing = src
                .iter()
                .zip(&matches)
                .filter(|(p, &m)| (x.transform_point(p) - tgt[m]).norm_squared() <= max2)
                .count();
            let ratio = agreeing as f64 / src.len() as f64;
            let miss = 1.0 - ratio.powi(3);
            if miss <= 0.0 {
                limit = it;
            } else {
                let est = ((1.0 - params.confidence).ln() / miss.ln()).ceil();
                if est.is_finite() && est >= 0.0 {
                    limit = limit.min(est as usize);
                }
            }
            best = Some((x, inliers, rmse));
        }
    }
    log::debug!("RANSAC stopped after {it} iterations");

    let Some((mut transform, _, _)) = best else {
        return Ok(failure);
    };

    // re-estimate from every feature pair that agrees with the hypothesis
    let (fs, ft): (Vec<_>, Vec<_>) = src
        .iter()
        .zip(&matches)
        .filter(|(p, &m)| (transform.transform_point(p) - tgt[m]).norm_squared() <= max2)
        .map(|(p, &m)| (*p, tgt[m]))
        .unzip();
    if fs.len() >= 3 {
        if let Ok(a) = horn_align_points(&fs, &ft) {
            if !a.degenerate {
                let (old, old_rmse) = evaluate(src, &index, &transform, params.max_corr_dist);
                let (new, new_rmse) = evaluate(src, &index, &a.transform, params.max_corr_dist);
                if new > old || (new == old && new_rmse <= old_rmse) {
                    transform = a.transform;
                }
            }
        }
    }
    let (inliers, rmse) = evaluate(src, &index, &transform, params.max_corr_dist);
    Ok(RegistrationResult {
        transform,
        fitness: (inliers as f64 / tgt.len() as f64).min(1.0),
        inlier_rmse: rmse,
        correspondence_count: inliers,
        valid: true,
        rmse_history: Vec::new(),
    })
}
