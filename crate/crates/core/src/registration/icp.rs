//! Point-to-plane ICP.

use nalgebra::{Matrix6, Vector3, Vector6};

use super::RegistrationResult;
use crate::cloud::PointCloud;
use crate::error::{Result, SlamError};
use crate::geometry::{se3_exp, Pose, Twist};

const MAX_HALVINGS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct IcpParams {
    pub max_corr_dist: f64,
    pub max_iterations: usize,
    /// Relative change of fitness and RMSE below which iteration stops.
    pub relative_tolerance: f64,
    /// Results below this fitness are returned with `valid == false`.
    pub min_fitness: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_corr_dist: 0.02,
            max_iterations: 30,
            relative_tolerance: 1e-6,
            min_fitness: 0.1,
        }
    }
}

struct Association {
    pairs: Vec<(Vector3<f64>, usize)>,
    sq_sum: f64,
}

fn associate(source: &PointCloud, target: &PointCloud, index: &crate::cloud::SpatialIndex, t: &Pose, max_corr: f64) -> Association {
    let max2 = max_corr * max_corr;
    let normals = target.normals.as_ref().expect("checked by caller");
    let mut pairs = Vec::new();
    let mut sq_sum = 0.0;
    for p in &source.positions {
        let q = t.transform_point(p);
        if let Some((j, d2)) = index.nearest(&q) {
            if d2 <= max2 && normals[j].norm_squared() > 0.25 {
                pairs.push((q, j));
                sq_sum += d2;
            }
        }
    }
    Association { pairs, sq_sum }
}

fn stats(a: &Association, target_len: usize) -> (f64, f64) {
    let n = a.pairs.len();
    let fitness = n as f64 / target_len as f64;
    let rmse = if n > 0 { (a.sq_sum / n as f64).sqrt() } else { 0.0 };
    (fitness.min(1.0), rmse)
}

fn rel_change(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Refines `init` by Gauss–Newton on point-to-plane residuals with
/// nearest-neighbor association in `target`.
///
/// A step whose re-associated inlier RMSE exceeds the previous one is halved
/// until it does not; if no such step is found iteration stops. The recorded
/// RMSE history therefore never increases. Fewer than six correspondences at
/// `init` is an error.
pub fn icp_point_to_plane(source: &PointCloud, target: &PointCloud, init: &Pose, params: &IcpParams) -> Result<RegistrationResult> {
    if target.normals.is_none() {
        return Err(SlamError::MissingNormals);
    }
    if !(params.max_corr_dist > 0.0) {
        return Err(SlamError::InvalidInput("max correspondence distance must be positive".into()));
    }
    let index = target.spatial_index();
    let normals = target.normals.as_ref().unwrap();
    let mut transform = *init;
    let mut assoc = associate(source, target, &index, &transform, params.max_corr_dist);
    if assoc.pairs.len() < 6 {
        return Err(SlamError::InsufficientData(format!(
            "ICP needs at least 6 correspondences, found {}",
            assoc.pairs.len()
        )));
    }
    let (mut fitness, mut rmse) = stats(&assoc, target.len());
    let mut history = vec![rmse];

    for _ in 0..params.max_iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (q, j) in &assoc.pairs {
            let n = normals[*j];
            let r = n.dot(&(q - target.positions[*j]));
            let c = q.cross(&n);
            let jac = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
            h += jac * jac.transpose();
            g += jac * r;
        }
        let Some(chol) = h.cholesky() else { break };
        let mut step = -chol.solve(&g);
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = se3_exp(&Twist(step)).compose(&transform);
            let next = associate(source, target, &index, &candidate, params.max_corr_dist);
            if next.pairs.len() >= 6 {
                let (nf, nr) = stats(&next, target.len());
                if nr <= rmse + 1e-9 {
                    accepted = Some((candidate, next, nf, nr));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((candidate, next, nf, nr)) = accepted else { break };
        let converged = rel_change(nf, fitness) < params.relative_tolerance && rel_change(nr, rmse) < params.relative_tolerance;
        transform = candidate;
        assoc = next;
        fitness = nf;
        rmse = nr;
        history.push(rmse);
        if converged {
            break;
        }
    }

    Ok(RegistrationResult {
        transform,
        fitness,
        inlier_rmse: rmse,
        correspondence_count: assoc.pairs.len(),
        valid: fitness >= params.min_fitness,
        rmse_history: history,
    })
}
