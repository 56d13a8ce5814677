//! FAST corners and oriented binary patch descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::sensor::GrayImage;

/// Bresenham circle of radius 3 used by the segment test.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Contiguous circle pixels that must all be brighter or all darker.
const ARC_LENGTH: usize = 9;
/// Sampling pairs lie within this radius of the keypoint.
const PATTERN_RADIUS: f64 = 12.0;
const ORIENTATION_RADIUS: i32 = 7;
/// Keypoints closer than this to the border are discarded.
pub const BORDER: usize = 16;
pub const DESCRIPTOR_BITS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f32,
    /// Orientation from the intensity centroid, radians.
    pub angle: f64,
}

pub type Descriptor = [u64; DESCRIPTOR_BITS / 64];

fn segment_score(img: &GrayImage, x: usize, y: usize, threshold: f32) -> Option<f32> {
    let c = img.get(x, y);
    let ring: [f32; 16] = CIRCLE.map(|(dx, dy)| img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize));
    let classify = |v: f32| -> i8 {
        if v > c + threshold {
            1
        } else if v < c - threshold {
            -1
        } else {
            0
        }
    };
    let classes = ring.map(classify);
    for sign in [1i8, -1] {
        let mut run = 0;
        for i in 0..32 {
            if classes[i % 16] == sign {
                run += 1;
                if run >= ARC_LENGTH {
                    let score = ring.iter().map(|v| ((v - c).abs() - threshold).max(0.0)).sum();
                    return Some(score);
                }
            } else {
                run = 0;
            }
        }
    }
    None
}

/// FAST-9 corners with 3 × 3 non-maximum suppression, strongest first.
pub fn detect_fast(img: &GrayImage, threshold: f32, max_keypoints: usize) -> Vec<Keypoint> {
    let (w, h) = (img.width, img.height);
    if w <= 2 * BORDER || h <= 2 * BORDER {
        return Vec::new();
    }
    let mut scores = vec![0f32; w * h];
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            if let Some(s) = segment_score(img, x, y, threshold) {
                scores[y * w + x] = s;
            }
        }
    }
    let mut out = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let s = scores[y * w + x];
            if s <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let o = scores[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                    // ties go to the earlier pixel in scan order
                    if o > s || (o == s && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                out.push(Keypoint {
                    x,
                    y,
                    score: s,
                    angle: intensity_centroid_angle(img, x, y),
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.y, a.x).cmp(&(b.y, b.x))));
    out.truncate(max_keypoints);
    out
}

fn intensity_centroid_angle(img: &GrayImage, x: usize, y: usize) -> f64 {
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    let r = ORIENTATION_RADIUS;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let radius = (3.0 * sigma).ceil() as i32;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let sum: f64 = k.iter().sum();
        k.iter().map(|v| (v / sum) as f32).collect()
    };
    let (w, h) = (img.width as i32, img.height as i32);
    let pass = |src: &GrayImage, horizontal: bool| {
        let mut out = GrayImage::new(src.width, src.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let o = i as i32 - radius;
                    let (sx, sy) = if horizontal { ((x + o).clamp(0, w - 1), y) } else { (x, (y + o).clamp(0, h - 1)) };
                    acc += kv * src.get(sx as usize, sy as usize);
                }
                out.set(x as usize, y as usize, acc);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Seeded test-point pairs drawn from an isotropic Gaussian and clipped to
/// the pattern disc.
#[derive(Clone, Debug, PartialEq)]
pub struct BriefPattern {
    pairs: Vec<[(f64, f64); 2]>,
}

impl BriefPattern {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, PATTERN_RADIUS / 2.0).expect("valid sigma");
        let point = |rng: &mut ChaCha8Rng| loop {
            let p: (f64, f64) = (normal.sample(rng), normal.sample(rng));
            if p.0 * p.0 + p.1 * p.1 <= PATTERN_RADIUS * PATTERN_RADIUS {
                return p;
            }
        };
        let pairs = (0..DESCRIPTOR_BITS).map(|_| [point(&mut rng), point(&mut rng)]).collect();
        Self { pairs }
    }

    /// Descriptor of a keypoint on a pre-smoothed image, with the pattern
    /// rotated by the keypoint orientation.
    pub fn describe(&self, smoothed: &GrayImage, kp: &Keypoint) -> Descriptor {
        let (s, c) = kp.angle.sin_cos();
        let sample = |(px, py): (f64, f64)| {
            let x = (kp.x as f64 + c * px - s * py).round() as usize;
            let y = (kp.y as f64 + s * px + c * py).round() as usize;
            smoothed.get(x, y)
        };
        let mut d = [0u64; DESCRIPTOR_BITS / 64];
        for (i, [a, b]) in self.pairs.iter().enumerate() {
            if sample(*a) < sample(*b) {
                d[i / 64] |= 1 << (i % 64);
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> GrayImage {
        let mut img = GrayImage::new(64, 64);
        for y in 24..40 {
            for x in 24..40 {
                img.set(x, y, 1.0);
            }
        }
        img
    }

    #[test]
    fn corners_of_a_bright_square_are_detected() {
        let kps = detect_fast(&square_image(), 0.1, 100);
        assert_eq!(kps.len(), 4);
        for kp in &kps {
            assert!([24, 39].iter().any(|c| kp.x.abs_diff(*c) <= 1));
            assert!([24, 39].iter().any(|c| kp.y.abs_diff(*c) <= 1));
        }
    }

    #[test]
    fn uniform_image_has_no_corners() {
        let mut img = GrayImage::new(64, 64);
        img.data.iter_mut().for_each(|v| *v = 0.5);
        assert!(detect_fast(&img, 0.05, 100).is_empty());
    }

    #[test]
    fn orientation_points_toward_the_bright_side() {
        let mut img = GrayImage::new(40, 40);
        for y in 0..40 {
            for x in 21..40 {
                img.set(x, y, 1.0);
            }
        }
        assert!(intensity_centroid_angle(&img, 20, 20).abs() < 1e-9);
    }

    #[test]
    fn pattern_is_deterministic_and_bounded() {
        let a = BriefPattern::new(3);
        assert_eq!(a, BriefPattern::new(3));
        assert_ne!(a, BriefPattern::new(4));
        for [p, q] in &a.pairs {
            assert!(p.0.hypot(p.1) <= PATTERN_RADIUS && q.0.hypot(q.1) <= PATTERN_RADIUS);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = GrayImage::new(20, 10);
        img.data.iter_mut().for_each(|v| *v = 0.25);
        let out = gaussian_blur(&img, 2.0);
        assert!(out.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
