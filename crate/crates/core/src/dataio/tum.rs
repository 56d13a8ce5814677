//! TUM RGB-D directory layout: `rgb/`, `depth/`, `rgb.txt`, `depth.txt` and
//! `groundtruth.txt`, plus the optional `odometry.txt` (input poses for
//! backend runs) and `intrinsics.txt` (`fx fy cx cy width height`).

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Result, SlamError};
use crate::geometry::{Pose, Trajectory};
use crate::sensor::{DepthImage, Frame, GrayImage, Intrinsics};

/// Raw 16-bit depth units per meter.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;
/// Maximum timestamp difference for associating streams, in seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// Frames of one sequence with their reference trajectories. Frame `i` has id
/// `i`; trajectory entries use the same ids.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub ground_truth: Trajectory,
    pub odometry: Option<Trajectory>,
    /// Frames dropped because some stream had no match within tolerance.
    pub dropped: usize,
    /// Frames skipped because an image could not be decoded.
    pub skipped: usize,
}

pub fn depth_from_raw(raw: u16) -> f32 {
    (raw as f64 / TUM_DEPTH_SCALE) as f32
}

pub fn depth_to_raw(meters: f32) -> u16 {
    (meters as f64 * TUM_DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Reads `timestamp path` lines.
pub fn read_index(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SlamError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let ts = parts
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| SlamError::parse(i + 1, "bad timestamp"))?;
        let file = parts.next().ok_or_else(|| SlamError::parse(i + 1, "missing file name"))?;
        out.push((ts, file.to_string()));
    }
    Ok(out)
}

/// For every query time, the index of the nearest reference time if it lies
/// within `tolerance` (inclusive, up to rounding of the text format).
pub fn associate(queries: &[f64], references: &[f64], tolerance: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..references.len()).collect();
    order.sort_by(|&a, &b| references[a].total_cmp(&references[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| references[i]).collect();
    queries
        .iter()
        .map(|&q| {
            let pos = sorted.partition_point(|&r| r < q);
            let mut best: Option<(usize, f64)> = None;
            for cand in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
                if let Some(&r) = sorted.get(cand) {
                    let d = (r - q).abs();
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((cand, d));
                    }
                }
            }
            best.filter(|(_, d)| *d <= tolerance + 1e-9).map(|(i, _)| order[i])
        })
        .collect()
}

fn read_intrinsics(dir: &Path) -> Result<Intrinsics> {
    let path = dir.join("intrinsics.txt");
    if !path.exists() {
        return Ok(Intrinsics::tum_fr1());
    }
    let text = std::fs::read_to_string(&path)?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| SlamError::parse(1, format!("intrinsics: {e}")))?;
    if v.len() != 6 {
        return Err(SlamError::parse(1, "intrinsics need `fx fy cx cy width height`"));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
}

fn load_depth(path: &Path, k: &Intrinsics) -> Result<DepthImage> {
    let img = image::open(path)?.into_luma16();
    if img.width() as usize != k.width || img.height() as usize != k.height {
        return Err(SlamError::InvalidInput(format!("{} has unexpected size", path.display())));
    }
    let data = img.pixels().map(|p| depth_from_raw(p.0[0])).collect();
    DepthImage::from_vec(k.width, k.height, data)
}

fn load_color(path: &Path, k: &Intrinsics) -> Result<(GrayImage, Vec<[f32; 3]>)> {
    let img = image::open(path)?.into_rgb8();
    if img.width() as usize != k.width || img.height() as usize != k.height {
        return Err(SlamError::InvalidInput(format!("{} has unexpected size", path.display())));
    }
    let color: Vec<[f32; 3]> = img.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
    let gray = color.iter().map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect();
    Ok((GrayImage::from_vec(k.width, k.height, gray)?, color))
}

fn load_trajectory_times(path: &Path) -> Result<Trajectory> {
    Trajectory::load(path).map_err(|e| match e {
        SlamError::Io(io) => SlamError::InvalidInput(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

/// Reads a sequence directory. Color frames are matched to the nearest depth
/// and ground-truth samples (and odometry, when present); frames lacking any
/// match within [`ASSOCIATION_TOLERANCE`] are dropped and counted.
pub fn read_tum_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let intrinsics = read_intrinsics(dir)?;
    let rgb = read_index(&dir.join("rgb.txt"))?;
    let depth = read_index(&dir.join("depth.txt"))?;
    let gt = load_trajectory_times(&dir.join("groundtruth.txt"))?;
    let odo_path = dir.join("odometry.txt");
    let odo = if odo_path.exists() { Some(load_trajectory_times(&odo_path)?) } else { None };

    let rgb_times: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let depth_times: Vec<f64> = depth.iter().map(|d| d.0).collect();
    let gt_times: Vec<f64> = gt.entries().iter().map(|e| e.timestamp).collect();
    let depth_match = associate(&rgb_times, &depth_times, ASSOCIATION_TOLERANCE);
    let gt_match = associate(&rgb_times, &gt_times, ASSOCIATION_TOLERANCE);
    let odo_match = odo.as_ref().map(|o| {
        let times: Vec<f64> = o.entries().iter().map(|e| e.timestamp).collect();
        associate(&rgb_times, &times, ASSOCIATION_TOLERANCE)
    });

    let mut frames = Vec::new();
    let mut ground_truth = Trajectory::new();
    let mut odometry = odo.as_ref().map(|_| Trajectory::new());
    let (mut dropped, mut skipped) = (0, 0);
    for (i, (ts, rgb_file)) in rgb.iter().enumerate() {
        let odo_pose = match (&odo, &odo_match) {
            (Some(o), Some(m)) => match m[i] {
                Some(j) => Some(o.entries()[j].pose),
                None => {
                    dropped += 1;
                    continue;
                }
            },
            _ => None,
        };
        let (Some(di), Some(gi)) = (depth_match[i], gt_match[i]) else {
            dropped += 1;
            continue;
        };
        let loaded = load_depth(&dir.join(&depth[di].1), &intrinsics)
            .and_then(|d| load_color(&dir.join(rgb_file), &intrinsics).map(|c| (d, c)));
        let (depth_img, (gray, color)) = match loaded {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping frame at {ts:.6}: {e}");
                skipped += 1;
                continue;
            }
        };
        let id = frames.len() as u64;
        ground_truth.push(id, *ts, gt.entries()[gi].pose)?;
        if let (Some(traj), Some(pose)) = (odometry.as_mut(), odo_pose) {
            traj.push(id, *ts, pose)?;
        }
        frames.push(Frame {
            id,
            timestamp: *ts,
            depth: depth_img,
            gray,
            color: Some(color),
            intrinsics,
            pose: Pose::identity(),
        });
    }
    if dropped > 0 || skipped > 0 {
        log::info!("{}: {dropped} frames without association, {skipped} unreadable", dir.display());
    }
    Ok(Sequence {
        intrinsics,
        frames,
        ground_truth,
        odometry,
        dropped,
        skipped,
    })
}

/// Writes frames and trajectories in the layout read by [`read_tum_sequence`].
/// Depth is quantized to the 16-bit format; color falls back to gray.
pub fn write_tum_sequence(dir: impl AsRef<Path>, seq: &Sequence) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let k = &seq.intrinsics;
    std::fs::write(
        dir.join("intrinsics.txt"),
        format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )?;
    let mut rgb_index = String::from("# timestamp filename\n");
    let mut depth_index = String::from("# timestamp filename\n");
    for f in &seq.frames {
        let name = format!("{:.6}.png", f.timestamp);
        let (w, h) = (f.intrinsics.width as u32, f.intrinsics.height as u32);
        let depth: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(w, h, |u, v| Luma([depth_to_raw(f.depth.get(u as usize, v as usize))]));
        depth.save(dir.join("depth").join(&name))?;
        let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |u, v| {
            Rgb(f.rgb(u as usize, v as usize).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        rgb.save(dir.join("rgb").join(&name))?;
        rgb_index.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
        depth_index.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
    }
    std::fs::write(dir.join("rgb.txt"), rgb_index)?;
    std::fs::write(dir.join("depth.txt"), depth_index)?;
    seq.ground_truth.save(dir.join("groundtruth.txt"))?;
    if let Some(odo) = &seq.odometry {
        odo.save(dir.join("odometry.txt"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_scale_is_exact() {
        assert_eq!(depth_from_raw(5000), 1.0);
        assert_eq!(depth_to_raw(1.0), 5000);
        assert_eq!(depth_from_raw(0), 0.0);
        assert_eq!(depth_to_raw(2.5), 12500);
    }

    #[test]
    fn association_tolerance_boundary() {
        let m = associate(&[0.0, 1.0, 2.0], &[0.019, 1.021, 2.02], 0.02);
        assert_eq!(m, vec![Some(0), None, Some(2)]);
    }

    #[test]
    fn association_picks_nearest_from_unsorted_references() {
        let m = associate(&[0.5], &[0.51, 0.2, 0.495, 0.9], 0.02);
        assert_eq!(m, vec![Some(2)]);
    }
}
