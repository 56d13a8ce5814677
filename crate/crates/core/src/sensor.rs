//! Camera model and RGB-D frame types.

use nalgebra::{Vector2, Vector3};

use crate::error::{Result, SlamError};
use crate::geometry::Pose;

/// Pinhole intrinsics. Integer pixel coordinates address pixel centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Default calibration of the TUM RGB-D `freiburg1` sequences.
    pub fn tum_fr1() -> Self {
        Self {
            fx: 517.3,
            fy: 516.5,
            cx: 318.6,
            cy: 255.3,
            width: 640,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SlamError::InvalidInput("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(SlamError::InvalidInput("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a camera-frame point; `None` if it is behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Nearest pixel of a projected point if it lies inside the image.
    pub fn pixel_of(&self, uv: &Vector2<f64>) -> Option<(usize, usize)> {
        let u = uv.x.round();
        let v = uv.y.round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }

    /// Unit-depth ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.backproject(u, v, 1.0)
    }

    /// Intrinsics for an image downscaled by an integer factor.
    pub fn scaled(&self, factor: usize) -> Intrinsics {
        let f = factor as f64;
        Intrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Row-major image of `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(SlamError::InvalidInput(format!(
                "image buffer has {} samples, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Depth in meters; zero marks a missing measurement.
pub type DepthImage = Image;
/// Intensity in [0, 1].
pub type GrayImage = Image;

/// One RGB-D observation together with its current pose estimate
/// (world from camera).
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub depth: DepthImage,
    pub gray: GrayImage,
    pub color: Option<Vec<[f32; 3]>>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        if self.depth.width != w || self.depth.height != h || self.gray.width != w || self.gray.height != h {
            return Err(SlamError::InvalidInput(format!("frame {} resolution differs from intrinsics", self.id)));
        }
        if self.depth.data.iter().any(|d| *d < 0.0 || d.is_nan()) {
            return Err(SlamError::InvalidInput(format!("frame {} has negative depth", self.id)));
        }
        Ok(())
    }

    /// RGB at a pixel, falling back to the gray value.
    pub fn rgb(&self, u: usize, v: usize) -> [f32; 3] {
        match &self.color {
            Some(c) => c[v * self.intrinsics.width + u],
            None => {
                let g = self.gray.get(u, v);
                [g, g, g]
            }
        }
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data.iter().filter(|d| **d > 0.0).count()
    }
}
