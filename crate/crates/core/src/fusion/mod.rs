//! TSDF fusion of depth frames, marching-cubes extraction and the uniformly
//! sampled surface clouds used for loop registration.

mod tables;

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::cloud::{sample_mesh_uniform, PointCloud};
use crate::error::{Result, SlamError};
use crate::geometry::Pose;
use crate::sensor::{DepthImage, Intrinsics};

use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};

/// Triangle soup with shared vertices and per-face unit normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub face_normals: Vec<Vector3<f64>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(v) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(SlamError::InvalidInput(format!("vertex {v} is not finite")));
        }
        if let Some(t) = triangles.iter().position(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(SlamError::InvalidInput(format!("triangle {t} references a missing vertex")));
        }
        let face_normals = triangles
            .iter()
            .map(|&[a, b, c]| {
                let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        Ok(Self {
            vertices,
            triangles,
            face_normals,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = *t;
        0.5 * (self.vertices[b] - self.vertices[a])
            .cross(&(self.vertices[c] - self.vertices[a]))
            .norm()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }
}

/// Dense truncated signed-distance volume. Voxel `(i, j, k)` is centered at
/// `origin + (i + ½, j + ½, k + ½) · voxel_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    origin: Vector3<f64>,
    voxel_size: f64,
    truncation: f64,
    dims: [usize; 3],
    sdf: Vec<f32>,
    weight: Vec<f32>,
    /// Blocks of `BLOCK³` voxels that receive updates; `None` means all.
    active: Option<Vec<bool>>,
}

/// Edge length, in voxels, of the blocks used to skip empty space.
const BLOCK: usize = 8;

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, truncation: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || !(truncation > 0.0) {
            return Err(SlamError::InvalidInput("voxel size and truncation must be positive".into()));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(SlamError::InvalidInput(format!("volume dims {dims:?} too small")));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| SlamError::InvalidInput("volume too large".into()))?;
        Ok(Self {
            origin,
            voxel_size,
            truncation,
            dims,
            sdf: vec![truncation as f32; n],
            weight: vec![0.0; n],
            active: None,
        })
    }

    /// Volume covering the axis-aligned box `[lo, hi]`.
    pub fn covering(lo: Vector3<f64>, hi: Vector3<f64>, voxel_size: f64, truncation: f64, max_voxels: usize) -> Result<Self> {
        let extent = hi - lo;
        let dims = [0, 1, 2].map(|a| ((extent[a] / voxel_size).ceil() as usize).max(2));
        let total = dims.iter().map(|&d| d as f64).product::<f64>();
        if total > max_voxels as f64 {
            return Err(SlamError::InvalidInput(format!(
                "volume of {dims:?} voxels exceeds the limit of {max_voxels}"
            )));
        }
        Self::new(lo, voxel_size, truncation, dims)
    }

    fn block_dims(&self) -> [usize; 3] {
        self.dims.map(|d| d.div_ceil(BLOCK))
    }

    /// Limits later integration to blocks within one block of the truncation
    /// band around the measured surfaces of `frames`. Voxels elsewhere would
    /// only ever hold `+truncation`, so the extracted mesh is unchanged.
    pub fn restrict_to_band(&mut self, frames: &[(&DepthImage, Pose)], intrinsics: &Intrinsics) {
        let [bx, by, bz] = self.block_dims();
        let block_size = self.voxel_size * BLOCK as f64;
        let steps = (2.0 * self.truncation / block_size).ceil().max(1.0) as usize;
        let mut seeds = vec![false; bx * by * bz];
        for (depth, pose) in frames {
            for v in 0..depth.height {
                for u in 0..depth.width {
                    let d = depth.get(u, v) as f64;
                    if !(d > 0.0) {
                        continue;
                    }
                    let ray = intrinsics.backproject(u as f64, v as f64, 1.0);
                    let scale = 1.0 / ray.norm();
                    for s in 0..=steps {
                        let offset = -self.truncation + 2.0 * self.truncation * s as f64 / steps as f64;
                        let p = pose.transform_point(&(ray * (d + offset * scale)));
                        let b = (p - self.origin) / block_size;
                        if b.iter().any(|c| *c < 0.0) {
                            continue;
                        }
                        let (i, j, k) = (b.x as usize, b.y as usize, b.z as usize);
                        if i < bx && j < by && k < bz {
                            seeds[(k * by + j) * bx + i] = true;
                        }
                    }
                }
            }
        }
        let mut active = vec![false; seeds.len()];
        for k in 0..bz {
            for j in 0..by {
                for i in 0..bx {
                    if !seeds[(k * by + j) * bx + i] {
                        continue;
                    }
                    for nk in k.saturating_sub(1)..(k + 2).min(bz) {
                        for nj in j.saturating_sub(1)..(j + 2).min(by) {
                            for ni in i.saturating_sub(1)..(i + 2).min(bx) {
                                active[(nk * by + nj) * bx + ni] = true;
                            }
                        }
                    }
                }
            }
        }
        self.active = Some(active);
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    pub fn sdf_at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.sdf[self.linear(i, j, k)]
    }

    pub fn weight_at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.weight[self.linear(i, j, k)]
    }

    pub fn sdf_values(&self) -> &[f32] {
        &self.sdf
    }

    pub fn weights(&self) -> &[f32] {
        &self.weight
    }

    pub fn observed_voxels(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    /// Bounds of the volume as `(min corner, max corner)`.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let ext = Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.voxel_size;
        (self.origin, self.origin + ext)
    }

    /// Fills the volume from an analytic signed-distance function, marking
    /// every voxel observed with weight 1. Values are clamped to ±truncation.
    pub fn fill_from_sdf(&mut self, f: impl Fn(&Vector3<f64>) -> f64 + Sync) {
        let dims = self.dims;
        let trunc = self.truncation;
        let (origin, vs) = (self.origin, self.voxel_size);
        self.sdf
            .par_chunks_mut(dims[0] * dims[1])
            .zip(self.weight.par_chunks_mut(dims[0] * dims[1]))
            .enumerate()
            .for_each(|(k, (sdf, w))| {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let p = origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * vs;
                        sdf[j * dims[0] + i] = f(&p).clamp(-trunc, trunc) as f32;
                        w[j * dims[0] + i] = 1.0;
                    }
                }
            });
    }

    /// Integrates one depth frame taken from `pose` (world from camera).
    ///
    /// Every voxel that projects onto a valid depth pixel receives the signed
    /// distance along the viewing ray, clamped to `+truncation`; voxels more
    /// than `truncation` behind the measured surface are left untouched. The
    /// update is a running mean with unit weight per observation.
    pub fn integrate_frame(&mut self, depth: &DepthImage, intrinsics: &Intrinsics, pose: &Pose) {
        let dims = self.dims;
        let trunc = self.truncation;
        let world_to_cam = pose.inverse();
        let rot = world_to_cam.rotation_matrix();
        let step_i = rot.column(0) * self.voxel_size;
        let (origin, vs) = (self.origin, self.voxel_size);
        let k = *intrinsics;
        if depth.width != k.width || depth.height != k.height {
            log::warn!("depth image size does not match intrinsics; frame skipped");
            return;
        }
        let [bx, by, _] = self.block_dims();
        let active = self.active.as_deref();
        self.sdf
            .par_chunks_mut(dims[0] * dims[1])
            .zip(self.weight.par_chunks_mut(dims[0] * dims[1]))
            .enumerate()
            .for_each(|(kz, (sdf, w))| {
                for j in 0..dims[1] {
                    let first = origin + Vector3::new(0.5, j as f64 + 0.5, kz as f64 + 0.5) * vs;
                    let row_start = world_to_cam.transform_point(&first);
                    let block_row = (kz / BLOCK * by + j / BLOCK) * bx;
                    for i in 0..dims[0] {
                        if active.is_some_and(|a| !a[block_row + i / BLOCK]) {
                            continue;
                        }
                        let pc = row_start + step_i * i as f64;
                        if pc.z <= 0.0 {
                            continue;
                        }
                        let u = (k.fx * pc.x / pc.z + k.cx).round();
                        let v = (k.fy * pc.y / pc.z + k.cy).round();
                        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                            continue;
                        }
                        let d = depth.data[v as usize * k.width + u as usize] as f64;
                        if !(d > 0.0) {
                            continue;
                        }
                        let ray_scale = pc.norm() / pc.z;
                        let dist = (d - pc.z) * ray_scale;
                        if dist < -trunc {
                            continue;
                        }
                        let value = dist.min(trunc) as f32;
                        let idx = j * dims[0] + i;
                        let wv = w[idx];
                        sdf[idx] = (sdf[idx] * wv + value) / (wv + 1.0);
                        w[idx] = wv + 1.0;
                    }
                }
            });
    }

    /// Marching-cubes extraction of the zero level set. Cells touching any
    /// unobserved voxel are skipped. Triangles are wound so their normals point
    /// toward positive signed distance (free space).
    pub fn extract_mesh(&self) -> TriangleMesh {
        let [dx, dy, dz] = self.dims;
        let mut vertices: Vec<Vector3<f64>> = Vec::new();
        let mut triangles: Vec<[usize; 3]> = Vec::new();
        let mut edge_vertex: HashMap<(usize, u8), usize> = HashMap::new();

        for k in 0..dz - 1 {
            for j in 0..dy - 1 {
                for i in 0..dx - 1 {
                    let mut values = [0f32; 8];
                    let mut observed = true;
                    let mut cube = 0usize;
                    for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                        let idx = self.linear(i + off[0], j + off[1], k + off[2]);
                        if self.weight[idx] <= 0.0 {
                            observed = false;
                            break;
                        }
                        values[c] = self.sdf[idx];
                        if values[c] < 0.0 {
                            cube |= 1 << c;
                        }
                    }
                    if !observed || EDGE_TABLE[cube] == 0 {
                        continue;
                    }
                    let mut edge_ids = [usize::MAX; 12];
                    for (e, corners) in EDGE_CORNERS.iter().enumerate() {
                        if EDGE_TABLE[cube] & (1 << e) == 0 {
                            continue;
                        }
                        let (a, b) = (corners[0], corners[1]);
                        let (oa, ob) = (CORNER_OFFSETS[a], CORNER_OFFSETS[b]);
                        let lo = [oa[0].min(ob[0]), oa[1].min(ob[1]), oa[2].min(ob[2])];
                        let axis = (0..3).find(|&ax| oa[ax] != ob[ax]).unwrap() as u8;
                        let key = (self.linear(i + lo[0], j + lo[1], k + lo[2]), axis);
                        let id = *edge_vertex.entry(key).or_insert_with(|| {
                            let pa = self.voxel_center(i + oa[0], j + oa[1], k + oa[2]);
                            let pb = self.voxel_center(i + ob[0], j + ob[1], k + ob[2]);
                            let (va, vb) = (values[a] as f64, values[b] as f64);
                            let t = if (va - vb).abs() > 1e-12 { va / (va - vb) } else { 0.5 };
                            vertices.push(pa + (pb - pa) * t.clamp(0.0, 1.0));
                            vertices.len() - 1
                        });
                        edge_ids[e] = id;
                    }
                    for tri in TRI_TABLE[cube].chunks(3) {
                        if tri[0] < 0 {
                            break;
                        }
                        let t = [edge_ids[tri[0] as usize], edge_ids[tri[2] as usize], edge_ids[tri[1] as usize]];
                        if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                            triangles.push(t);
                        }
                    }
                }
            }
        }
        TriangleMesh::new(vertices, triangles).expect("marching cubes produced an invalid mesh")
    }
}

/// Parameters of per-submap surface extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub voxel_size: f64,
    pub truncation: f64,
    /// Number of points drawn from the extracted mesh.
    pub surface_samples: usize,
    pub seed: u64,
    pub max_voxels: usize,
    /// Depth readings beyond this range are ignored when sizing the volume.
    pub max_depth: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            truncation: 0.04,
            surface_samples: 20_000,
            seed: 0,
            max_voxels: 60_000_000,
            max_depth: 8.0,
        }
    }
}

/// Axis-aligned bounds of all valid depth measurements in world coordinates.
pub fn observed_bounds(
    frames: &[(&DepthImage, Pose)],
    intrinsics: &Intrinsics,
    max_depth: f64,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for (depth, pose) in frames {
        for v in 0..depth.height {
            for u in 0..depth.width {
                let d = depth.get(u, v) as f64;
                if d > 0.0 && d <= max_depth {
                    let p = pose.transform_point(&intrinsics.backproject(u as f64, v as f64, d));
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                    any = true;
                }
            }
        }
    }
    any.then_some((lo, hi))
}

/// Fuses every frame of a submap into a TSDF sized to the observed surfaces,
/// extracts the mesh and samples it uniformly.
pub fn fuse_submap_surface(
    frames: &[(&DepthImage, Pose)],
    intrinsics: &Intrinsics,
    params: &FusionParams,
) -> Result<PointCloud> {
    let mesh = fuse_submap_mesh(frames, intrinsics, params)?;
    if mesh.is_empty() || mesh.surface_area() <= 0.0 {
        return Err(SlamError::Degenerate("fused submap produced an empty mesh".into()));
    }
    sample_mesh_uniform(&mesh, params.surface_samples, params.seed)
}

/// Fusion and extraction without the final sampling step.
pub fn fuse_submap_mesh(
    frames: &[(&DepthImage, Pose)],
    intrinsics: &Intrinsics,
    params: &FusionParams,
) -> Result<TriangleMesh> {
    if frames.is_empty() {
        return Err(SlamError::InsufficientData("surface fusion needs at least one frame".into()));
    }
    let (lo, hi) = observed_bounds(frames, intrinsics, params.max_depth)
        .ok_or_else(|| SlamError::Degenerate("submap frames contain no valid depth".into()))?;
    let margin = Vector3::repeat(params.truncation + 2.0 * params.voxel_size);
    let mut volume = TsdfVolume::covering(lo - margin, hi + margin, params.voxel_size, params.truncation, params.max_voxels)?;
    volume.restrict_to_band(frames, intrinsics);
    for (depth, pose) in frames {
        volume.integrate_frame(depth, intrinsics, pose);
    }
    Ok(volume.extract_mesh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap as Map;

    fn plane_depth(k: &Intrinsics, z: f32) -> DepthImage {
        DepthImage::from_vec(k.width, k.height, vec![z; k.pixel_count()]).unwrap()
    }

    fn small_camera() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 39.5, 29.5, 80, 60).unwrap()
    }

    fn plane_volume() -> TsdfVolume {
        TsdfVolume::new(Vector3::new(-0.2, -0.2, 0.8), 0.01, 0.04, [40, 40, 40]).unwrap()
    }

    #[test]
    fn plane_zero_crossing_is_localized() {
        let k = small_camera();
        let mut vol = plane_volume();
        vol.integrate_frame(&plane_depth(&k, 1.0), &k, &Pose::identity());
        // along the optical axis column the sign changes across z = 1.0
        let (i, j) = (20, 20);
        let mut crossing = None;
        for kz in 0..39 {
            let (a, b) = (vol.sdf_at(i, j, kz), vol.sdf_at(i, j, kz + 1));
            if vol.weight_at(i, j, kz) > 0.0 && vol.weight_at(i, j, kz + 1) > 0.0 && a >= 0.0 && b < 0.0 {
                let za = vol.voxel_center(i, j, kz).z;
                let zb = vol.voxel_center(i, j, kz + 1).z;
                crossing = Some(za + (zb - za) * (a as f64 / (a as f64 - b as f64)));
            }
        }
        let z = crossing.expect("no zero crossing");
        assert!((z - 1.0).abs() <= 0.005, "crossing at {z}");
        let mesh = vol.extract_mesh();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v.z - 1.0).abs() <= 0.005 + 1e-9, "vertex z {}", v.z);
        }
    }

    #[test]
    fn band_restriction_keeps_the_mesh() {
        let k = small_camera();
        // a tilted plane seen from two poses, in a volume with a lot of free space
        let mut depth = DepthImage::new(k.width, k.height);
        for v in 0..k.height {
            for u in 0..k.width {
                depth.set(u, v, 1.0 + 0.004 * u as f32);
            }
        }
        let second = Pose::from_axis_angle(&Vector3::y(), 0.1, Vector3::new(0.05, 0.0, 0.0));
        let frames = [(&depth, Pose::identity()), (&depth, second)];
        let mut dense = TsdfVolume::new(Vector3::new(-0.6, -0.5, 0.2), 0.01, 0.04, [120, 100, 140]).unwrap();
        let mut banded = dense.clone();
        banded.restrict_to_band(&frames, &k);
        for (d, pose) in &frames {
            dense.integrate_frame(d, &k, pose);
            banded.integrate_frame(d, &k, pose);
        }
        assert!(banded.observed_voxels() < dense.observed_voxels() / 2);
        let (a, b) = (dense.extract_mesh(), banded.extract_mesh());
        assert!(!a.is_empty());
        assert_eq!(a.triangles.len(), b.triangles.len());
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            assert!((p - q).norm() < 1e-6);
        }
    }

    #[test]
    fn unprojected_voxels_keep_zero_weight() {
        let k = small_camera();
        let mut vol = TsdfVolume::new(Vector3::new(-0.2, -0.2, -1.0), 0.01, 0.04, [10, 10, 10]).unwrap();
        vol.integrate_frame(&plane_depth(&k, 1.0), &k, &Pose::identity());
        assert_eq!(vol.observed_voxels(), 0);
    }

    #[test]
    fn integrating_twice_keeps_sdf_and_doubles_weights() {
        let k = small_camera();
        let mut once = plane_volume();
        once.integrate_frame(&plane_depth(&k, 1.0), &k, &Pose::identity());
        let mut twice = once.clone();
        twice.integrate_frame(&plane_depth(&k, 1.0), &k, &Pose::identity());
        assert_eq!(once.sdf_values(), twice.sdf_values());
        for (a, b) in once.weights().iter().zip(twice.weights()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn empty_volume_gives_empty_mesh() {
        assert!(plane_volume().extract_mesh().is_empty());
    }

    fn sphere_volume() -> TsdfVolume {
        let mut vol = TsdfVolume::new(Vector3::repeat(-0.6), 0.01, 0.04, [120, 120, 120]).unwrap();
        vol.fill_from_sdf(|p| p.norm() - 0.5);
        vol
    }

    #[test]
    fn sphere_mesh_is_accurate_closed_and_outward() {
        let vol = sphere_volume();
        let mesh = vol.extract_mesh();
        let mean_err: f64 = mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).sum::<f64>() / mesh.vertices.len() as f64;
        assert!(mean_err <= 0.005, "mean radial error {mean_err}");

        // every undirected edge is shared by exactly two triangles, with opposite directions
        let mut edges: Map<(usize, usize), i32> = Map::new();
        for t in &mesh.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += if a < b { 1 } else { -1 };
            }
        }
        let mut counts: Map<(usize, usize), usize> = Map::new();
        for t in &mesh.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(counts.values().all(|&c| c == 2));
        assert!(edges.values().all(|&s| s == 0));

        let outward = mesh
            .triangles
            .iter()
            .zip(&mesh.face_normals)
            .filter(|(t, n)| n.norm() > 0.5 && n.dot(&mesh.vertices[t[0]]) > 0.0)
            .count();
        let valid = mesh.face_normals.iter().filter(|n| n.norm() > 0.5).count();
        assert_eq!(outward, valid);

        let (lo, hi) = vol.bounds();
        for v in &mesh.vertices {
            assert!((0..3).all(|a| v[a] > lo[a] && v[a] < hi[a]));
        }
    }

    #[test]
    fn analytic_plane_mesh_vertices_lie_on_plane() {
        let mut vol = TsdfVolume::new(Vector3::new(-0.3, -0.3, -0.3), 0.01, 0.04, [60, 60, 60]).unwrap();
        vol.fill_from_sdf(|p| p.z - 0.0123);
        let mesh = vol.extract_mesh();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v.z - 0.0123).abs() <= 0.005);
        }
    }

    #[test]
    fn fusion_requires_frames() {
        let k = small_camera();
        assert!(matches!(
            fuse_submap_surface(&[], &k, &FusionParams::default()),
            Err(SlamError::InsufficientData(_))
        ));
        let zero = DepthImage::new(k.width, k.height);
        assert!(fuse_submap_surface(&[(&zero, Pose::identity())], &k, &FusionParams::default()).is_err());
    }
}
