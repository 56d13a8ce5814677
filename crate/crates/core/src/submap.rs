//! Point-based submaps: projective initialization, gradient-adaptive growth,
//! rigid correction and end-of-run feature fusion.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{ply, PointCloud};
use crate::error::{Result, SlamError};
use crate::geometry::Pose;
use crate::sensor::{Frame, GrayImage};

pub const FEATURE_DIM: usize = 32;
pub type Feature = [f64; FEATURE_DIM];

/// Radius bounds of the point density rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityParams {
    pub rho_min: f64,
    pub rho_max: f64,
    /// Prior points farther than this multiple of the observed depth are
    /// treated as occluded during projective initialization.
    pub depth_gate: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            rho_min: 0.02,
            rho_max: 0.08,
            depth_gate: 1.1,
        }
    }
}

/// Uniform hash grid over point positions for radius tests.
#[derive(Clone, Debug, Default)]
struct HashGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl HashGrid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    fn insert(&mut self, p: &Vector3<f64>, idx: usize) {
        let k = self.key(p);
        self.cells.entry(k).or_default().push(idx);
    }

    /// Whether any point lies within `radius ≤ cell` of `p`.
    fn any_within(&self, points: &[Vector3<f64>], p: &Vector3<f64>, radius: f64) -> bool {
        let (x, y, z) = self.key(p);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(x + dx, y + dy, z + dz)) {
                        if ids.iter().any(|&i| (points[i] - p).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// A point submap anchored at its global keyframe. Positions are in world
/// coordinates. `links` maps a local point index to the point it was copied
/// from in an earlier submap.
#[derive(Clone, Debug)]
pub struct Submap {
    pub id: usize,
    pub keyframe_id: u64,
    pub keyframe_pose: Pose,
    pub positions: Vec<Vector3<f64>>,
    /// Geometry features; the first three slots hold the unit normal.
    pub geo_features: Vec<Feature>,
    /// Color features; the first three slots hold RGB.
    pub color_features: Vec<Feature>,
    pub radii: Vec<f64>,
    /// Frames assigned to this submap with their current pose estimates.
    pub frames: Vec<(u64, Pose)>,
    /// Frames used for surface fusion.
    pub local_keyframes: Vec<u64>,
    pub links: BTreeMap<usize, (usize, usize)>,
    /// Fused surface samples in world coordinates, set on completion.
    pub surface: Option<PointCloud>,
    density: DensityParams,
    grid: HashGrid,
}

impl Submap {
    /// Submap without points, anchored at a keyframe.
    pub fn empty(id: usize, keyframe_id: u64, keyframe_pose: Pose, density: DensityParams) -> Self {
        Submap {
            id,
            keyframe_id,
            keyframe_pose,
            positions: Vec::new(),
            geo_features: Vec::new(),
            color_features: Vec::new(),
            radii: Vec::new(),
            frames: Vec::new(),
            local_keyframes: Vec::new(),
            links: BTreeMap::new(),
            surface: None,
            density,
            grid: HashGrid::new(density.rho_max),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn density(&self) -> &DensityParams {
        &self.density
    }

    pub fn normal(&self, i: usize) -> Vector3<f64> {
        let f = &self.geo_features[i];
        Vector3::new(f[0], f[1], f[2])
    }

    pub fn color(&self, i: usize) -> [f32; 3] {
        let f = &self.color_features[i];
        [f[0] as f32, f[1] as f32, f[2] as f32]
    }

    pub fn valid_normal_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.normal(i).norm_squared() > 0.25).count()
    }

    /// Positions with normals and colors.
    pub fn to_point_cloud(&self) -> PointCloud {
        PointCloud {
            positions: self.positions.clone(),
            normals: Some((0..self.len()).map(|i| self.normal(i)).collect()),
            colors: Some((0..self.len()).map(|i| self.color(i)).collect()),
        }
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        ply::save_point_cloud(path, &self.to_point_cloud(), ply::PlyEncoding::BinaryLittleEndian)
    }

    /// Appends a point and returns its local index.
    pub fn push_point(&mut self, p: Vector3<f64>, geo: Feature, color: Feature, radius: f64) -> usize {
        let idx = self.positions.len();
        self.grid.insert(&p, idx);
        self.positions.push(p);
        self.geo_features.push(geo);
        self.color_features.push(color);
        self.radii.push(radius);
        idx
    }

    fn rebuild_grid(&mut self) {
        let mut grid = HashGrid::new(self.density.rho_max);
        for (i, p) in self.positions.iter().enumerate() {
            grid.insert(p, i);
        }
        self.grid = grid;
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.geo_features.len() != n || self.color_features.len() != n || self.radii.len() != n {
            return Err(SlamError::InvalidInput(format!("submap {} has mismatched point arrays", self.id)));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) || self.positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(SlamError::InvalidInput(format!("submap {} has invalid points", self.id)));
        }
        if let Some((&i, _)) = self.links.iter().find(|(&i, _)| i >= n) {
            return Err(SlamError::BrokenLink(format!("submap {} links missing local point {i}", self.id)));
        }
        Ok(())
    }

    /// Left-composes `t` onto every position, the keyframe pose, every frame
    /// pose and the fused surface. Features (including the stored normals)
    /// and radii are unchanged.
    pub fn apply_correction(&mut self, t: &Pose) {
        for p in &mut self.positions {
            *p = t.transform_point(p);
        }
        self.keyframe_pose = t.compose(&self.keyframe_pose);
        for (_, pose) in &mut self.frames {
            *pose = t.compose(pose);
        }
        if let Some(s) = &self.surface {
            self.surface = Some(s.transformed(t));
        }
        self.rebuild_grid();
    }

    /// Correspondence links as CSV rows `submap,index,prev_submap,prev_index`.
    pub fn links_csv(&self) -> String {
        let mut out = String::new();
        for (i, (s, j)) in &self.links {
            let _ = writeln!(out, "{},{},{},{}", self.id, i, s, j);
        }
        out
    }
}

/// Starts a submap at `keyframe` (whose pose must be set). With a previous
/// submap, every prior point that projects inside the keyframe image in
/// front of the camera and no deeper than `depth_gate` times the observed
/// depth is copied and linked to its origin.
pub fn create_submap(id: usize, keyframe: &Frame, prev: Option<&Submap>, density: DensityParams) -> Submap {
    let mut submap = Submap::empty(id, keyframe.id, keyframe.pose, density);
    let Some(prev) = prev else { return submap };
    let world_to_cam = keyframe.pose.inverse();
    let k = &keyframe.intrinsics;
    for i in 0..prev.len() {
        let pc = world_to_cam.transform_point(&prev.positions[i]);
        let Some(uv) = k.project(&pc) else { continue };
        let Some((u, v)) = k.pixel_of(&uv) else { continue };
        let d = keyframe.depth.get(u, v) as f64;
        if d > 0.0 && pc.z <= density.depth_gate * d {
            let idx = submap.push_point(prev.positions[i], prev.geo_features[i], prev.color_features[i], prev.radii[i]);
            submap.links.insert(idx, (prev.id, i));
        }
    }
    submap
}

/// Gradient magnitude of each pixel divided by the 95th percentile over
/// pixels with valid depth, clamped to `[0, 1]`.
pub fn normalized_gradient(gray: &GrayImage, depth: &GrayImage) -> Vec<f64> {
    let (w, h) = (gray.width, gray.height);
    let mut mag = vec![0.0f64; w * h];
    for v in 0..h {
        for u in 0..w {
            let gx = gray.get((u + 1).min(w - 1), v) as f64 - gray.get(u.saturating_sub(1), v) as f64;
            let gy = gray.get(u, (v + 1).min(h - 1)) as f64 - gray.get(u, v.saturating_sub(1)) as f64;
            mag[v * w + u] = 0.5 * gx.hypot(gy);
        }
    }
    let mut valid: Vec<f64> = mag.iter().zip(&depth.data).filter(|(_, d)| **d > 0.0).map(|(m, _)| *m).collect();
    if valid.is_empty() {
        return vec![0.0; w * h];
    }
    valid.sort_by(f64::total_cmp);
    let p95 = valid[((valid.len() - 1) as f64 * 0.95).round() as usize];
    if p95 <= 0.0 {
        return mag.iter().map(|m| if *m > 0.0 { 1.0 } else { 0.0 }).collect();
    }
    mag.iter().map(|m| (m / p95).min(1.0)).collect()
}

/// Windows whose surface variation (smallest covariance eigenvalue over the
/// trace) exceeds this have no reliable normal.
const MAX_SURFACE_VARIATION: f64 = 0.04;

/// Unit normal at a pixel from a plane fit over the surrounding window,
/// excluding depth discontinuities, facing the camera, in the camera frame.
/// Non-planar windows such as edges and corners yield `None`.
pub(crate) fn depth_normal(frame: &Frame, u: usize, v: usize) -> Option<Vector3<f64>> {
    const HALF: usize = 3;
    let k = &frame.intrinsics;
    let d0 = frame.depth.get(u, v) as f64;
    if d0 <= 0.0 {
        return None;
    }
    let gap = 0.05 * d0 + 0.02;
    let pts: Vec<Vector3<f64>> = (v.saturating_sub(HALF)..(v + HALF + 1).min(k.height))
        .flat_map(|y| (u.saturating_sub(HALF)..(u + HALF + 1).min(k.width)).map(move |x| (x, y)))
        .filter_map(|(x, y)| {
            let d = frame.depth.get(x, y) as f64;
            (d > 0.0 && (d - d0).abs() <= gap).then(|| k.backproject(x as f64, y as f64, d))
        })
        .collect();
    if pts.len() < 6 {
        return None;
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let cov: Matrix3<f64> = pts.iter().map(|p| (p - mean) * (p - mean).transpose()).sum();
    let eig = cov.symmetric_eigen();
    let trace = eig.eigenvalues.sum();
    let imin = eig.eigenvalues.imin();
    if !(trace > 0.0) || eig.eigenvalues[imin] / trace > MAX_SURFACE_VARIATION {
        return None;
    }
    let n = eig.eigenvectors.column(imin).normalize();
    Some(if n.dot(&mean) > 0.0 { -n } else { n })
}

/// Grows the submap from `frame` observed at `pose` (world from camera).
///
/// Half of `samples` pixels are drawn uniformly, half from the pixels in the
/// top quarter of normalized gradient. A back-projected sample is added
/// unless an existing point lies within `ρ = ρ_max − g (ρ_max − ρ_min)` of
/// it, where `g` is its normalized gradient. Returns the number added.
pub fn add_points(submap: &mut Submap, frame: &Frame, pose: &Pose, samples: usize, seed: u64) -> usize {
    let k = &frame.intrinsics;
    let grad = normalized_gradient(&frame.gray, &frame.depth);
    let valid: Vec<usize> = (0..k.pixel_count()).filter(|&i| frame.depth.data[i] > 0.0).collect();
    if valid.is_empty() || samples == 0 {
        return 0;
    }
    let mut ranked = valid.clone();
    ranked.sort_by(|&a, &b| grad[b].total_cmp(&grad[a]).then(a.cmp(&b)));
    let top = &ranked[..ranked.len().div_ceil(4)];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_uniform = samples / 2;
    let picks: Vec<usize> = (0..samples)
        .map(|i| {
            if i < n_uniform {
                valid[rng.random_range(0..valid.len())]
            } else {
                top[rng.random_range(0..top.len())]
            }
        })
        .collect();

    let DensityParams { rho_min, rho_max, .. } = submap.density;
    let rot = pose.rotation_matrix();
    let mut added = 0;
    for px in picks {
        let (u, v) = (px % k.width, px / k.width);
        let d = frame.depth.data[px] as f64;
        let p = pose.transform_point(&k.backproject(u as f64, v as f64, d));
        let rho = rho_max - grad[px] * (rho_max - rho_min);
        if submap.grid.any_within(&submap.positions, &p, rho) {
            continue;
        }
        let mut geo = [0.0; FEATURE_DIM];
        if let Some(n) = depth_normal(frame, u, v) {
            let n = rot * n;
            geo[..3].copy_from_slice(&[n.x, n.y, n.z]);
        }
        let mut color = [0.0; FEATURE_DIM];
        let rgb = frame.rgb(u, v);
        color[..3].copy_from_slice(&[rgb[0] as f64, rgb[1] as f64, rgb[2] as f64]);
        submap.push_point(p, geo, color, rho);
        added += 1;
    }
    added
}

/// All submaps merged with linked points averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMap {
    pub positions: Vec<Vector3<f64>>,
    pub geo_features: Vec<Feature>,
    pub color_features: Vec<Feature>,
    /// Contributing submap ids of each point, ascending.
    pub provenance: Vec<Vec<usize>>,
}

impl GlobalMap {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn to_point_cloud(&self) -> PointCloud {
        let normals = self
            .geo_features
            .iter()
            .map(|f| {
                let n = Vector3::new(f[0], f[1], f[2]);
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        PointCloud {
            positions: self.positions.clone(),
            normals: Some(normals),
            colors: Some(self.color_features.iter().map(|f| [f[0] as f32, f[1] as f32, f[2] as f32]).collect()),
        }
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        ply::save_point_cloud(path, &self.to_point_cloud(), ply::PlyEncoding::BinaryLittleEndian)
    }

    /// Positions moved by `t`; features unchanged.
    pub fn transformed(&self, t: &Pose) -> GlobalMap {
        GlobalMap {
            positions: self.positions.iter().map(|p| t.transform_point(p)).collect(),
            ..self.clone()
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Merges all submaps. Points connected through correspondence links are
/// replaced by one point at the arithmetic mean of their positions and of
/// each feature vector. Output order follows the first member of each group.
pub fn fuse_features(submaps: &[Submap]) -> Result<GlobalMap> {
    let mut offset = BTreeMap::new();
    let mut total = 0;
    for s in submaps {
        if offset.insert(s.id, total).is_some() {
            return Err(SlamError::InvalidInput(format!("duplicate submap id {}", s.id)));
        }
        total += s.len();
    }
    let mut parent: Vec<usize> = (0..total).collect();
    for s in submaps {
        for (&i, &(ps, pj)) in &s.links {
            let prev = submaps.iter().find(|m| m.id == ps);
            let Some(prev) = prev.filter(|m| pj < m.len()) else {
                return Err(SlamError::BrokenLink(format!("submap {} point {i} links to missing ({ps}, {pj})", s.id)));
            };
            if i >= s.len() {
                return Err(SlamError::BrokenLink(format!("submap {} links missing local point {i}", s.id)));
            }
            let a = find(&mut parent, offset[&s.id] + i);
            let b = find(&mut parent, offset[&prev.id] + pj);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for s in submaps {
        for i in 0..s.len() {
            let root = find(&mut parent, offset[&s.id] + i);
            groups.entry(root).or_default().push((s.id, i));
        }
    }
    let by_id: BTreeMap<usize, &Submap> = submaps.iter().map(|s| (s.id, s)).collect();
    let mut map = GlobalMap {
        positions: Vec::with_capacity(groups.len()),
        geo_features: Vec::with_capacity(groups.len()),
        color_features: Vec::with_capacity(groups.len()),
        provenance: Vec::with_capacity(groups.len()),
    };
    for members in groups.values() {
        let n = members.len() as f64;
        let mut p = Vector3::zeros();
        let mut g = [0.0; FEATURE_DIM];
        let mut c = [0.0; FEATURE_DIM];
        let mut ids = Vec::new();
        for &(sid, i) in members {
            let s = by_id[&sid];
            p += s.positions[i];
            for d in 0..FEATURE_DIM {
                g[d] += s.geo_features[i][d];
                c[d] += s.color_features[i][d];
            }
            ids.push(sid);
        }
        ids.sort_unstable();
        ids.dedup();
        map.positions.push(p / n);
        map.geo_features.push(g.map(|v| v / n));
        map.color_features.push(c.map(|v| v / n));
        map.provenance.push(ids);
    }
    Ok(map)
}

/// Concatenated link CSV of all submaps with a header row.
pub fn links_csv(submaps: &[Submap]) -> String {
    let mut out = String::from("submap,index,prev_submap,prev_index\n");
    for s in submaps {
        out.push_str(&s.links_csv());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{DepthImage, Intrinsics};

    fn frame_with_depth(depth: f32) -> Frame {
        let k = Intrinsics::new(50.0, 50.0, 31.5, 23.5, 64, 48).unwrap();
        let mut gray = GrayImage::new(64, 48);
        for (i, g) in gray.data.iter_mut().enumerate() {
            *g = if (i % 64 / 8 + i / 64 / 8) % 2 == 0 { 0.2 } else { 0.8 };
        }
        Frame {
            id: 0,
            timestamp: 0.0,
            depth: DepthImage::from_vec(64, 48, vec![depth; 64 * 48]).unwrap(),
            gray,
            color: None,
            intrinsics: k,
            pose: Pose::identity(),
        }
    }

    #[test]
    fn first_submap_starts_empty() {
        let s = create_submap(0, &frame_with_depth(1.0), None, DensityParams::default());
        assert!(s.is_empty() && s.links.is_empty());
    }

    #[test]
    fn re_adding_a_frame_adds_nothing() {
        let f = frame_with_depth(1.0);
        let mut s = create_submap(0, &f, None, DensityParams::default());
        let n = add_points(&mut s, &f, &Pose::identity(), 2000, 1);
        assert!(n > 0);
        assert_eq!(add_points(&mut s, &f, &Pose::identity(), 2000, 1), 0);
        s.validate().unwrap();
        // added points respect their radii
        for i in 0..s.len() {
            for j in 0..i {
                let d = (s.positions[i] - s.positions[j]).norm();
                assert!(d >= s.radii[i].min(s.radii[j]) - 1e-9);
            }
        }
        // normals face the camera on a fronto-parallel plane
        for i in 0..s.len() {
            let n = s.normal(i);
            if n.norm() > 0.5 {
                assert!((n + Vector3::z()).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_depth_adds_nothing() {
        let f = frame_with_depth(0.0);
        let mut s = create_submap(0, &f, None, DensityParams::default());
        assert_eq!(add_points(&mut s, &f, &Pose::identity(), 500, 1), 0);
    }

    #[test]
    fn previous_points_behind_the_camera_are_not_copied() {
        let f = frame_with_depth(1.0);
        let mut prev = create_submap(0, &f, None, DensityParams::default());
        add_points(&mut prev, &f, &Pose::identity(), 500, 3);
        let mut kf = frame_with_depth(1.0);
        kf.pose = Pose::from_axis_angle(&Vector3::y(), std::f64::consts::PI, Vector3::zeros());
        let s = create_submap(1, &kf, Some(&prev), DensityParams::default());
        assert!(s.is_empty());
        let same = create_submap(1, &f, Some(&prev), DensityParams::default());
        assert_eq!(same.len(), prev.len());
        assert!(same.links.iter().all(|(i, (ps, j))| *ps == 0 && i == j));
    }

    #[test]
    fn corrections_compose() {
        let f = frame_with_depth(1.5);
        let mut s = create_submap(0, &f, None, DensityParams::default());
        add_points(&mut s, &f, &Pose::identity(), 300, 2);
        s.frames.push((0, Pose::identity()));
        let t1 = Pose::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.4, Vector3::new(0.1, -0.3, 0.2));
        let t2 = Pose::from_axis_angle(&Vector3::new(-0.3, 0.2, 1.0), -0.9, Vector3::new(1.0, 0.0, 0.5));
        let mut a = s.clone();
        a.apply_correction(&t1);
        a.apply_correction(&t2);
        let mut b = s.clone();
        b.apply_correction(&t2.compose(&t1));
        for (p, q) in a.positions.iter().zip(&b.positions) {
            assert!((p - q).norm() < 1e-9);
        }
        let (angle, dist) = a.frames[0].1.distance_to(&b.frames[0].1);
        assert!(angle < 1e-9 && dist < 1e-9);
        let mut c = s.clone();
        c.apply_correction(&Pose::identity());
        assert_eq!(c.positions, s.positions);
        assert_eq!(c.geo_features, s.geo_features);
        let shift = Vector3::new(0.25, -1.0, 3.0);
        let mut d = s.clone();
        d.apply_correction(&Pose::from_translation(shift));
        for (p, q) in d.positions.iter().zip(&s.positions) {
            assert_eq!(*p, q + shift);
        }
        assert_eq!(d.radii, s.radii);
    }

    #[test]
    fn gradient_normalization_is_bounded() {
        let f = frame_with_depth(1.0);
        let g = normalized_gradient(&f.gray, &f.depth);
        assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(g.iter().any(|v| *v == 1.0));
    }
}
