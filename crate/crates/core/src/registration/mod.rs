//! Coarse-to-fine registration of submap surfaces into loop constraints.

mod fpfh;
mod icp;
mod ransac;

use nalgebra::Vector3;

use crate::cloud::{estimate_normals, voxel_downsample, NormalOrientation, PointCloud};
use crate::error::{Result, SlamError};
use crate::geometry::Pose;

pub use fpfh::{compute_fpfh, FpfhFeatures, FPFH_BINS};
pub use icp::{icp_point_to_plane, IcpParams};
pub use ransac::{global_registration, RansacParams};

/// Outcome of a registration stage. `transform` maps source onto target.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub transform: Pose,
    /// Inlier correspondences divided by the target point count.
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub correspondence_count: usize,
    /// False when the stage found no usable solution.
    pub valid: bool,
    /// Inlier RMSE after each accepted ICP iterate (empty for RANSAC).
    pub rmse_history: Vec<f64>,
}

impl RegistrationResult {
    pub fn failed() -> Self {
        Self {
            transform: Pose::identity(),
            fitness: 0.0,
            inlier_rmse: 0.0,
            correspondence_count: 0,
            valid: false,
            rmse_history: Vec::new(),
        }
    }
}

/// Relative transform `transform` maps surface `source` onto surface `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopConstraint {
    pub source: usize,
    pub target: usize,
    pub transform: Pose,
    pub fitness: f64,
    pub inlier_rmse: f64,
}

impl LoopConstraint {
    pub fn translation_magnitude(&self) -> f64 {
        self.transform.translation_norm()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopRegistrationParams {
    pub coarse_voxel: f64,
    pub normal_radius: f64,
    pub feature_radius: f64,
    pub ransac: RansacParams,
    /// Radius for target normals at full resolution.
    pub fine_normal_radius: f64,
    pub icp: IcpParams,
}

impl Default for LoopRegistrationParams {
    fn default() -> Self {
        let coarse = 0.05;
        Self {
            coarse_voxel: coarse,
            normal_radius: 2.0 * coarse,
            feature_radius: 5.0 * coarse,
            ransac: RansacParams {
                max_corr_dist: 1.5 * coarse,
                ..RansacParams::default()
            },
            fine_normal_radius: 0.05,
            icp: IcpParams::default(),
        }
    }
}

/// PCA normals at `radius`. Signs follow the cloud's existing normals when it
/// has them, otherwise they point toward the centroid.
fn prepare_normals(cloud: &PointCloud, radius: f64) -> Result<PointCloud> {
    let centroid = cloud.centroid().unwrap_or_else(Vector3::zeros);
    let mut out = estimate_normals(cloud, radius, 3, NormalOrientation::TowardPoint(centroid))?;
    if let (Some(prior), Some(ns)) = (&cloud.normals, out.normals.as_mut()) {
        for (n, p) in ns.iter_mut().zip(prior) {
            if n.dot(p) < 0.0 {
                *n = -*n;
            }
        }
    }
    Ok(out)
}

/// Coarse RANSAC on FPFH features of voxel-downsampled copies, then
/// point-to-plane ICP at full resolution. Fitness and RMSE come from the fine
/// stage. A failed stage yields a constraint with fitness 0.
pub fn compute_loop_constraint(
    source_id: usize,
    target_id: usize,
    source: &PointCloud,
    target: &PointCloud,
    params: &LoopRegistrationParams,
) -> Result<LoopConstraint> {
    if source_id == target_id {
        return Err(SlamError::InvalidInput(format!("loop constraint between submap {source_id} and itself")));
    }
    let failed = LoopConstraint {
        source: source_id,
        target: target_id,
        transform: Pose::identity(),
        fitness: 0.0,
        inlier_rmse: 0.0,
    };
    if source.is_empty() || target.is_empty() {
        return Ok(failed);
    }
    let src_coarse = prepare_normals(&voxel_downsample(source, params.coarse_voxel)?, params.normal_radius)?;
    let tgt_coarse = prepare_normals(&voxel_downsample(target, params.coarse_voxel)?, params.normal_radius)?;
    let src_feat = compute_fpfh(&src_coarse, params.feature_radius)?;
    let tgt_feat = compute_fpfh(&tgt_coarse, params.feature_radius)?;
    let coarse = global_registration(&src_coarse, &tgt_coarse, &src_feat, &tgt_feat, &params.ransac)?;
    if !coarse.valid {
        log::debug!("loop {source_id}->{target_id}: no coarse hypothesis");
        return Ok(failed);
    }
    let target_fine = estimate_normals(target, params.fine_normal_radius, 3, NormalOrientation::Unoriented)?;
    let fine = match icp_point_to_plane(source, &target_fine, &coarse.transform, &params.icp) {
        Ok(r) => r,
        Err(e) => {
            log::debug!("loop {source_id}->{target_id}: fine stage failed: {e}");
            return Ok(failed);
        }
    };
    log::debug!(
        "loop {source_id}->{target_id}: coarse fitness {:.3}, fine fitness {:.3}, rmse {:.4}",
        coarse.fitness,
        fine.fitness,
        fine.inlier_rmse
    );
    Ok(LoopConstraint {
        source: source_id,
        target: target_id,
        transform: fine.transform,
        fitness: fine.fitness,
        inlier_rmse: fine.inlier_rmse,
    })
}

/// Linearly interpolated percentile of sorted values, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Drops constraints below `f_min` fitness, then finds the translation cut
/// `t_min`: the highest percentile (scanning 100, 95, ..., 0) whose retained
/// magnitudes have a standard deviation below `sigma_min`. Constraints with
/// larger magnitude are dropped. Returns the survivors and `t_min`
/// (`+∞` when nothing survives the fitness test).
pub fn prefilter_loop_edges(constraints: Vec<LoopConstraint>, sigma_min: f64, f_min: f64) -> (Vec<LoopConstraint>, f64) {
    let fit: Vec<LoopConstraint> = constraints.into_iter().filter(|c| c.fitness >= f_min).collect();
    if fit.is_empty() {
        return (fit, f64::INFINITY);
    }
    let mut mags: Vec<f64> = fit.iter().map(|c| c.translation_magnitude()).collect();
    mags.sort_by(f64::total_cmp);
    let mut t_min = mags[0];
    for step in 0..=20 {
        let cut = percentile(&mags, 100.0 - 5.0 * step as f64);
        let kept: Vec<f64> = mags.iter().copied().filter(|m| *m <= cut).collect();
        if population_std(&kept) < sigma_min {
            t_min = cut;
            break;
        }
    }
    let kept = fit.into_iter().filter(|c| c.translation_magnitude() <= t_min).collect();
    (kept, t_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constraint(mag: f64, fitness: f64) -> LoopConstraint {
        LoopConstraint {
            source: 0,
            target: 2,
            transform: Pose::from_translation(Vector3::new(mag, 0.0, 0.0)),
            fitness,
            inlier_rmse: 0.0,
        }
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 50.0) - 2.5).abs() < 1e-12);
        assert!((percentile(&v, 25.0) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn equal_magnitudes_are_all_kept() {
        let input: Vec<_> = (0..5).map(|_| constraint(0.3, 0.5)).collect();
        let (kept, t_min) = prefilter_loop_edges(input, 0.15, 0.1);
        assert_eq!(kept.len(), 5);
        assert_eq!(t_min, 0.3);
    }

    #[test]
    fn single_far_outlier_is_removed() {
        let mut input: Vec<_> = (0..9).map(|i| constraint(0.04 + 0.0025 * i as f64, 0.5)).collect();
        input.push(constraint(2.0, 0.5));
        let (kept, t_min) = prefilter_loop_edges(input, 0.15, 0.1);
        assert_eq!(kept.len(), 9);
        assert!(kept.iter().all(|c| c.translation_magnitude() < 0.1));
        // 95th percentile of ten values interpolates 55% of the way from the ninth to the tenth
        let expected = 0.06 + 0.55 * (2.0 - 0.06);
        assert!((t_min - expected).abs() < 1e-12);
    }

    #[test]
    fn low_fitness_is_removed_regardless_of_magnitude() {
        let (kept, _) = prefilter_loop_edges(vec![constraint(0.01, 0.05), constraint(0.01, 0.5)], 0.15, 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].fitness, 0.5);
    }

    #[test]
    fn empty_input_gives_infinite_cut() {
        let (kept, t_min) = prefilter_loop_edges(Vec::new(), 0.15, 0.1);
        assert!(kept.is_empty());
        assert!(t_min.is_infinite());
    }
}
