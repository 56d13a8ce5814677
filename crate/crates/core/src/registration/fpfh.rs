//! Fast point feature histograms.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Result, SlamError};

pub const FPFH_BINS: usize = 33;
const SUB_BINS: usize = 11;

/// One 33-bin histogram per input point: three 11-bin sub-histograms over
/// the pair angles (φ-like, α, θ), each normalized to sum to 100.
#[derive(Clone, Debug, PartialEq)]
pub struct FpfhFeatures {
    pub histograms: Vec<[f64; FPFH_BINS]>,
}

impl FpfhFeatures {
    pub fn len(&self) -> usize {
        self.histograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histograms.is_empty()
    }

    /// Index of the nearest histogram (L2) in `other`, ties broken by index.
    pub fn nearest_in(&self, other: &FpfhFeatures) -> Vec<usize> {
        self.histograms
            .par_iter()
            .map(|h| {
                let mut best = (usize::MAX, f64::INFINITY);
                for (j, g) in other.histograms.iter().enumerate() {
                    let d: f64 = h.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// Angular pair features `(f1, f2, f3)` in `[-π, π] × [-1, 1] × [-1, 1]`, or
/// `None` when the pair is degenerate.
fn pair_features(p1: &Vector3<f64>, n1: &Vector3<f64>, p2: &Vector3<f64>, n2: &Vector3<f64>) -> Option<[f64; 3]> {
    let mut dp = p2 - p1;
    let dist = dp.norm();
    if dist == 0.0 {
        return None;
    }
    let a1 = n1.dot(&dp) / dist;
    let a2 = n2.dot(&dp) / dist;
    // the source of the Darboux frame is the point whose normal is closer to the connecting line
    let (u, n_t, f3) = if a1.abs().acos() > a2.abs().acos() {
        dp = -dp;
        (n2, n1, -a2)
    } else {
        (n1, n2, a1)
    };
    let v = dp.cross(u);
    let vn = v.norm();
    if vn == 0.0 {
        return None;
    }
    let v = v / vn;
    let w = u.cross(&v);
    let f2 = v.dot(n_t);
    let f1 = w.dot(n_t).atan2(u.dot(n_t));
    Some([f1, f2, f3])
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = (SUB_BINS as f64 * (value - lo) / (hi - lo)).floor();
    b.clamp(0.0, (SUB_BINS - 1) as f64) as usize
}

fn normalize(h: &mut [f64; FPFH_BINS]) {
    for s in 0..3 {
        let part = &mut h[s * SUB_BINS..(s + 1) * SUB_BINS];
        let sum: f64 = part.iter().sum();
        if sum > 0.0 {
            part.iter_mut().for_each(|x| *x *= 100.0 / sum);
        }
    }
}

/// Computes FPFH descriptors over neighborhoods of the given radius.
///
/// Each point first gets a simplified histogram of pair features with its
/// neighbors; the final descriptor adds the distance-weighted mean of the
/// neighbors' simplified histograms. Points whose normal is invalid, or that
/// have no neighbor with a valid normal, get an all-zero histogram.
pub fn compute_fpfh(cloud: &PointCloud, radius: f64) -> Result<FpfhFeatures> {
    let normals = cloud.normals.as_ref().ok_or(SlamError::MissingNormals)?;
    if !(radius > 0.0) {
        return Err(SlamError::InvalidInput(format!("feature radius must be positive, got {radius}")));
    }
    let index = cloud.spatial_index();
    let pts = &cloud.positions;
    let valid = |i: usize| normals[i].norm_squared() > 0.25;

    let neighborhoods: Vec<Vec<usize>> = pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if !valid(i) {
                return Vec::new();
            }
            index
                .within_radius(p, radius)
                .into_iter()
                .filter(|&j| j != i && valid(j) && pts[j] != *p)
                .collect()
        })
        .collect();

    let spfh: Vec<[f64; FPFH_BINS]> = neighborhoods
        .par_iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut h = [0.0; FPFH_BINS];
            for &j in nb {
                if let Some([f1, f2, f3]) = pair_features(&pts[i], &normals[i], &pts[j], &normals[j]) {
                    h[bin(f1, -std::f64::consts::PI, std::f64::consts::PI)] += 1.0;
                    h[SUB_BINS + bin(f2, -1.0, 1.0)] += 1.0;
                    h[2 * SUB_BINS + bin(f3, -1.0, 1.0)] += 1.0;
                }
            }
            normalize(&mut h);
            h
        })
        .collect();

    let histograms = neighborhoods
        .par_iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut h = [0.0; FPFH_BINS];
            if nb.is_empty() {
                return h;
            }
            let mut weighted = [0.0; FPFH_BINS];
            for &j in nb {
                let w = 1.0 / (pts[j] - pts[i]).norm();
                for (acc, v) in weighted.iter_mut().zip(&spfh[j]) {
                    *acc += w * v;
                }
            }
            normalize(&mut weighted);
            for b in 0..FPFH_BINS {
                h[b] = spfh[i][b] + weighted[b];
            }
            normalize(&mut h);
            h
        })
        .collect();
    Ok(FpfhFeatures { histograms })
}
