//! RGB-D frames, dataset ingestion, surface normals and synthetic scenes.

mod normals;
pub mod synthetic;
mod tum;

pub use normals::{compute_normals, NormalMap};
pub use synthetic::{generate_synthetic_scene, SceneError, SceneSpec, SyntheticScene};
pub use tum::{load_tum_sequence, write_tum_dataset, DatasetError, FrameEntry, LoadOptions, TumSequence};

use crate::geometry::CameraIntrinsics;
use image::RgbImage;
use nalgebra::{Vector2, Vector3};

/// Depth in meters, row-major; `0.0` marks an invalid reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Non-finite and negative values are stored as invalid.
    pub fn from_vec(width: usize, height: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "depth buffer size mismatch");
        for v in &mut data {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: f32) {
        self.data[y * self.width + x] = if z.is_finite() && z > 0.0 { z } else { 0.0 };
    }

    /// Depth at a sub-pixel location.
    ///
    /// Inverse depth is interpolated bilinearly when the four neighbours are
    /// valid and close to each other (exact on planar surfaces); otherwise the
    /// nearest pixel is used.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        if self.width >= 2 && self.height >= 2 {
            let z = [
                self.get(x0, y0),
                self.get(x0 + 1, y0),
                self.get(x0, y0 + 1),
                self.get(x0 + 1, y0 + 1),
            ];
            if z.iter().all(|&d| d > 0.0) {
                let (lo, hi) = z.iter().fold((f32::MAX, 0.0f32), |(lo, hi), &d| (lo.min(d), hi.max(d)));
                if hi / lo < 1.05 {
                    let fx = u - x0 as f64;
                    let fy = v - y0 as f64;
                    let inv = |d: f32| 1.0 / d as f64;
                    let top = inv(z[0]) * (1.0 - fx) + inv(z[1]) * fx;
                    let bottom = inv(z[2]) * (1.0 - fx) + inv(z[3]) * fx;
                    return Some(1.0 / (top * (1.0 - fy) + bottom * fy));
                }
            }
        }
        let d = self.get(u.round() as usize, v.round() as usize);
        (d > 0.0).then_some(d as f64)
    }
}

/// Single-channel float image (0..255 scale).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_rgb(rgb: &RgbImage) -> Self {
        let (w, h) = rgb.dimensions();
        let data = rgb
            .pixels()
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Separable 5-tap binomial blur with clamped borders.
    pub fn blurred(&self) -> Self {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wk) in K.iter().enumerate() {
                    let xx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                    acc += wk * self.data[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wk) in K.iter().enumerate() {
                    let yy = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                    acc += wk * tmp[yy * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        Self {
            width: w,
            height: h,
            data: out,
        }
    }

    /// Sobel gradients scaled by 1/8; zero on the one-pixel border.
    pub fn sobel(&self) -> (Vec<f32>, Vec<f32>) {
        let (w, h) = (self.width, self.height);
        let mut gx = vec![0.0f32; w * h];
        let mut gy = vec![0.0f32; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let p = |dx: isize, dy: isize| self.data[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                gx[y * w + x] = ((p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1))) / 8.0;
                gy[y * w + x] = ((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1))) / 8.0;
            }
        }
        (gx, gy)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("rgb is {rgb_w}x{rgb_h}, depth is {depth_w}x{depth_h}, intrinsics expect {w}x{h}")]
    SizeMismatch {
        rgb_w: usize,
        rgb_h: usize,
        depth_w: usize,
        depth_h: usize,
        w: usize,
        h: usize,
    },
}

/// One registered colour + depth capture.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    pub fn new(
        timestamp: f64,
        rgb: RgbImage,
        depth: DepthMap,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, FrameError> {
        let (rw, rh) = (rgb.width() as usize, rgb.height() as usize);
        if rw != depth.width() || rh != depth.height() || rw != intrinsics.width || rh != intrinsics.height {
            return Err(FrameError::SizeMismatch {
                rgb_w: rw,
                rgb_h: rh,
                depth_w: depth.width(),
                depth_h: depth.height(),
                w: intrinsics.width,
                h: intrinsics.height,
            });
        }
        Ok(Self {
            timestamp,
            rgb,
            depth,
            intrinsics,
        })
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn intensity(&self) -> IntensityImage {
        IntensityImage::from_rgb(&self.rgb)
    }

    /// Camera-frame point at an integer pixel, if its depth is valid.
    pub fn point_at(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let z = self.depth.get(x, y);
        (z > 0.0).then(|| self.intrinsics.back_project_metric(x as f64, y as f64, z as f64))
    }

    /// Camera-frame point at a sub-pixel location (see [`DepthMap::sample`]).
    pub fn point_at_subpixel(&self, pixel: &Vector2<f64>) -> Option<Vector3<f64>> {
        let z = self.depth.sample(pixel.x, pixel.y)?;
        Some(self.intrinsics.back_project_metric(pixel.x, pixel.y, z))
    }
}

/// Nearest-neighbour association of two timestamp lists.
///
/// Candidate pairs within `tolerance` are taken greedily in order of
/// increasing time difference; each entry is used at most once. The result
/// is sorted by the index into `a`.
pub fn associate_timestamps(a: &[f64], b: &[f64], tolerance: f64) -> Vec<(usize, usize)> {
    let mut b_sorted: Vec<(f64, usize)> = b.iter().copied().zip(0..).collect();
    b_sorted.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut candidates = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        let start = b_sorted.partition_point(|&(tb, _)| tb < ta - tolerance);
        for &(tb, j) in &b_sorted[start..] {
            if tb > ta + tolerance {
                break;
            }
            candidates.push(((ta - tb).abs(), i, j));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}
