//! Point clouds: container, spatial indexing, normals, downsampling and mesh
//! surface sampling.

mod kdtree;
pub mod ply;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SlamError};
use crate::fusion::TriangleMesh;
use crate::geometry::Pose;

pub use kdtree::SpatialIndex;

/// A set of 3-d points with optional per-point normals and colors.
///
/// An all-zero normal marks a point whose normal could not be estimated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Self {
        Self {
            positions,
            normals: None,
            colors: None,
        }
    }

    pub fn with_normals(positions: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        let cloud = Self {
            positions,
            normals: Some(normals),
            colors: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Checks attribute lengths and normal lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(SlamError::InvalidInput(format!("{} normals for {} points", normals.len(), n)));
            }
            for (i, nrm) in normals.iter().enumerate() {
                let len = nrm.norm();
                if len != 0.0 && (len - 1.0).abs() > 1e-6 {
                    return Err(SlamError::InvalidInput(format!("normal {i} has length {len}")));
                }
            }
        }
        if let Some(colors) = &self.colors {
            if colors.len() != n {
                return Err(SlamError::InvalidInput(format!("{} colors for {} points", colors.len(), n)));
            }
        }
        Ok(())
    }

    pub fn normal_is_valid(&self, i: usize) -> bool {
        self.normals.as_ref().is_some_and(|n| n[i].norm_squared() > 0.25)
    }

    pub fn valid_normal_count(&self) -> usize {
        match &self.normals {
            Some(n) => n.iter().filter(|v| v.norm_squared() > 0.25).count(),
            None => 0,
        }
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.positions.is_empty() {
            return None;
        }
        Some(self.positions.iter().sum::<Vector3<f64>>() / self.positions.len() as f64)
    }

    pub fn transformed(&self, t: &Pose) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| t.transform_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.rotate_vector(n)).collect()),
            colors: self.colors.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: self.normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            colors: self.colors.as_ref().map(|cs| indices.iter().map(|&i| cs[i]).collect()),
        }
    }

    pub fn spatial_index(&self) -> SpatialIndex {
        SpatialIndex::new(&self.positions)
    }

    /// Appends another cloud. Attributes survive only if both clouds carry them.
    pub fn extend(&mut self, other: &PointCloud) {
        let both_normals = self.normals.is_some() && other.normals.is_some();
        let both_colors = self.colors.is_some() && other.colors.is_some();
        let empty = self.positions.is_empty();
        self.positions.extend_from_slice(&other.positions);
        if both_normals {
            self.normals.as_mut().unwrap().extend_from_slice(other.normals.as_ref().unwrap());
        } else if empty {
            self.normals = other.normals.clone();
        } else {
            self.normals = None;
        }
        if both_colors {
            self.colors.as_mut().unwrap().extend_from_slice(other.colors.as_ref().unwrap());
        } else if empty {
            self.colors = other.colors.clone();
        } else {
            self.colors = None;
        }
    }
}

/// How estimated normals are signed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormalOrientation {
    /// Sign left as produced by the eigen-solver.
    Unoriented,
    /// Flip so each normal points toward the given location (e.g. the sensor).
    TowardPoint(Vector3<f64>),
    /// Flip so each normal has a non-negative component along the direction.
    AlongDirection(Vector3<f64>),
}

/// Smallest-eigenvalue eigenvector of the neighborhood covariance, or `None`
/// when fewer than three points are supplied.
pub(crate) fn fit_plane_normal(points: impl Iterator<Item = Vector3<f64>> + Clone) -> Option<Vector3<f64>> {
    let mut n = 0usize;
    let mut sum = Vector3::zeros();
    for p in points.clone() {
        sum += p;
        n += 1;
    }
    if n < 3 {
        return None;
    }
    let mean = sum / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let normal = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
    let len = normal.norm();
    (len > 0.0 && len.is_finite()).then(|| normal / len)
}

pub(crate) fn orient(normal: Vector3<f64>, point: &Vector3<f64>, orientation: &NormalOrientation) -> Vector3<f64> {
    let flip = match orientation {
        NormalOrientation::Unoriented => false,
        NormalOrientation::TowardPoint(v) => normal.dot(&(v - point)) < 0.0,
        NormalOrientation::AlongDirection(d) => normal.dot(d) < 0.0,
    };
    if flip {
        -normal
    } else {
        normal
    }
}

/// Estimates per-point normals from the covariance of all neighbors within
/// `radius` (the point itself included). Points with fewer than
/// `min_neighbors` neighbors get a zero (invalid) normal.
pub fn estimate_normals(
    cloud: &PointCloud,
    radius: f64,
    min_neighbors: usize,
    orientation: NormalOrientation,
) -> Result<PointCloud> {
    if radius <= 0.0 {
        return Err(SlamError::InvalidInput(format!("normal radius must be positive, got {radius}")));
    }
    let index = cloud.spatial_index();
    let min_neighbors = min_neighbors.max(3);
    let normals = cloud
        .positions
        .iter()
        .map(|p| {
            let nb = index.within_radius(p, radius);
            if nb.len() < min_neighbors {
                return Vector3::zeros();
            }
            match fit_plane_normal(nb.iter().map(|&j| cloud.positions[j])) {
                Some(n) => orient(n, p, &orientation),
                None => Vector3::zeros(),
            }
        })
        .collect();
    Ok(PointCloud {
        positions: cloud.positions.clone(),
        normals: Some(normals),
        colors: cloud.colors.clone(),
    })
}

/// Replaces the points of every occupied voxel by their centroid. Normals and
/// colors are averaged; averaged normals are renormalized.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if voxel <= 0.0 {
        return Err(SlamError::InvalidInput(format!("voxel size must be positive, got {voxel}")));
    }
    #[derive(Default)]
    struct Cell {
        count: usize,
        pos: Vector3<f64>,
        normal: Vector3<f64>,
        normal_count: usize,
        color: [f64; 3],
    }
    let mut cells: BTreeMap<(i64, i64, i64), Cell> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let cell = cells.entry(key).or_default();
        cell.count += 1;
        cell.pos += p;
        if let Some(ns) = &cloud.normals {
            if ns[i].norm_squared() > 0.25 {
                cell.normal += ns[i];
                cell.normal_count += 1;
            }
        }
        if let Some(cs) = &cloud.colors {
            for k in 0..3 {
                cell.color[k] += cs[i][k] as f64;
            }
        }
    }
    let mut out = PointCloud {
        positions: Vec::with_capacity(cells.len()),
        normals: cloud.normals.as_ref().map(|_| Vec::with_capacity(cells.len())),
        colors: cloud.colors.as_ref().map(|_| Vec::with_capacity(cells.len())),
    };
    for cell in cells.values() {
        let n = cell.count as f64;
        out.positions.push(cell.pos / n);
        if let Some(ns) = out.normals.as_mut() {
            let len = cell.normal.norm();
            ns.push(if cell.normal_count > 0 && len > 1e-12 { cell.normal / len } else { Vector3::zeros() });
        }
        if let Some(cs) = out.colors.as_mut() {
            cs.push([(cell.color[0] / n) as f32, (cell.color[1] / n) as f32, (cell.color[2] / n) as f32]);
        }
    }
    Ok(out)
}

/// Draws `n` points uniformly over the mesh surface (area-weighted triangle
/// choice, uniform barycentric coordinates). Normals come from the faces.
pub fn sample_mesh_uniform(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Ok(PointCloud {
            positions: Vec::new(),
            normals: Some(Vec::new()),
            colors: None,
        });
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for tri in &mesh.triangles {
        total += mesh.triangle_area(tri);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(SlamError::Degenerate("cannot sample a mesh with zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangles[t];
        let (va, vb, vc) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
        let r1 = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        positions.push(va * (1.0 - r1) + vb * (r1 * (1.0 - r2)) + vc * (r1 * r2));
        normals.push(mesh.face_normals[t]);
    }
    Ok(PointCloud {
        positions,
        normals: Some(normals),
        colors: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn plane_points(n_side: usize, spacing: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                pts.push(Vector3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        pts
    }

    #[test]
    fn plane_normals_are_vertical() {
        let cloud = PointCloud::new(plane_points(20, 0.01));
        let out = estimate_normals(&cloud, 0.03, 5, NormalOrientation::AlongDirection(Vector3::z())).unwrap();
        for n in out.normals.as_ref().unwrap() {
            assert!((n - Vector3::z()).norm() < 1e-3, "{n:?}");
        }
    }

    #[test]
    fn sphere_normals_point_to_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gauss = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<_> = (0..20000)
            .map(|_| {
                let v = Vector3::new(gauss.sample(&mut rng), gauss.sample(&mut rng), gauss.sample(&mut rng));
                v.normalize() * 0.5
            })
            .collect();
        let cloud = PointCloud::new(pts.clone());
        let out = estimate_normals(&cloud, 0.03, 5, NormalOrientation::TowardPoint(Vector3::zeros())).unwrap();
        // random sampling leaves lopsided neighborhoods, so bound the mean tightly and the worst case loosely
        let errs: Vec<f64> = pts.iter().zip(out.normals.unwrap()).map(|(p, n)| (n + p.normalize()).norm()).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean < 1e-2, "mean {mean}");
        assert!(errs.iter().all(|e| *e < 0.1));
    }

    #[test]
    fn isolated_point_gets_invalid_normal() {
        let cloud = PointCloud::new(vec![Vector3::zeros(), Vector3::new(5.0, 0.0, 0.0)]);
        let out = estimate_normals(&cloud, 0.1, 3, NormalOrientation::Unoriented).unwrap();
        assert!(!out.normal_is_valid(0));
        assert!(!out.normal_is_valid(1));
        assert!(estimate_normals(&cloud, 0.0, 3, NormalOrientation::Unoriented).is_err());
    }

    #[test]
    fn downsample_cases() {
        let one_voxel = PointCloud::new(vec![
            Vector3::new(0.01, 0.01, 0.01),
            Vector3::new(0.03, 0.02, 0.01),
            Vector3::new(0.02, 0.03, 0.04),
        ]);
        let out = voxel_downsample(&one_voxel, 0.05).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.positions[0] - Vector3::new(0.02, 0.02, 0.02)).norm() < 1e-12);

        assert!(voxel_downsample(&PointCloud::default(), 0.05).unwrap().is_empty());

        // grid spacing 0.1 with points at voxel centers, voxel 0.05
        let grid: Vec<_> = plane_points(10, 0.1).iter().map(|p| p + Vector3::new(0.025, 0.025, 0.025)).collect();
        assert_eq!(voxel_downsample(&PointCloud::new(grid), 0.05).unwrap().len(), 100);
    }

    #[test]
    fn downsample_renormalizes_normals() {
        let cloud = PointCloud::with_normals(
            vec![Vector3::new(0.01, 0.0, 0.0), Vector3::new(0.02, 0.0, 0.0)],
            vec![Vector3::x(), Vector3::y()],
        )
        .unwrap();
        let out = voxel_downsample(&cloud, 0.1).unwrap();
        let n = out.normals.unwrap()[0];
        assert!((n.norm() - 1.0).abs() < 1e-12);
        assert!((n - Vector3::new(1.0, 1.0, 0.0).normalize()).norm() < 1e-12);
    }

    fn two_triangle_mesh() -> TriangleMesh {
        // big triangle area 1.5, small one area 0.5 -> ratio 3:1
        TriangleMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 3.0, 0.0),
                Vector3::new(5.0, 0.0, 1.0),
                Vector3::new(6.0, 0.0, 1.0),
                Vector3::new(5.0, 1.0, 1.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap()
    }

    #[test]
    fn mesh_sampling_edge_cases() {
        let mesh = two_triangle_mesh();
        assert!(sample_mesh_uniform(&mesh, 0, 1).unwrap().is_empty());
        let degenerate = TriangleMesh::new(vec![Vector3::zeros(), Vector3::x(), 2.0 * Vector3::x()], vec![[0, 1, 2]]).unwrap();
        assert!(sample_mesh_uniform(&degenerate, 10, 1).is_err());
        assert!(sample_mesh_uniform(&degenerate, 0, 1).is_ok());
    }

    #[test]
    fn single_triangle_samples_are_inside() {
        let mesh = TriangleMesh::new(
            vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let cloud = sample_mesh_uniform(&mesh, 2000, 9).unwrap();
        for p in &cloud.positions {
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x + p.y <= 1.0 + 1e-12 && p.z.abs() < 1e-12);
        }
    }

    #[test]
    fn area_proportional_counts_within_four_sigma() {
        let mesh = two_triangle_mesh();
        let n = 10_000;
        let cloud = sample_mesh_uniform(&mesh, n, 42).unwrap();
        let big = cloud.positions.iter().filter(|p| p.z < 0.5).count() as f64;
        let (p, nf) = (0.75, n as f64);
        let sigma = (nf * p * (1.0 - p)).sqrt();
        assert!((big - nf * p).abs() <= 4.0 * sigma, "big count {big}");
    }

    #[test]
    fn mesh_sampling_is_deterministic_per_seed() {
        let mesh = two_triangle_mesh();
        assert_eq!(sample_mesh_uniform(&mesh, 500, 3).unwrap(), sample_mesh_uniform(&mesh, 500, 3).unwrap());
        assert_ne!(sample_mesh_uniform(&mesh, 500, 3).unwrap(), sample_mesh_uniform(&mesh, 500, 4).unwrap());
    }
}
