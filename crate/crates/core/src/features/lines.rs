//! Line segments by region growing over gradient orientation, and robust
//! 3D fitting from depth.

use super::LineSegment;
use crate::sensor::RgbdFrame;
use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LineParams {
    pub min_length: f64,
    /// Minimum gradient magnitude (intensity units per pixel).
    pub gradient_threshold: f32,
    /// Orientation tolerance for region growing (degrees).
    pub angle_tolerance_deg: f64,
    /// Fraction of samples along a segment that need valid depth.
    pub min_valid_depth: f64,
    pub ransac_iterations: usize,
    /// RANSAC inlier distance (meters).
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for LineParams {
    fn default() -> Self {
        Self {
            min_length: 30.0,
            gradient_threshold: 5.2,
            angle_tolerance_deg: 22.5,
            min_valid_depth: 0.6,
            ransac_iterations: 100,
            inlier_threshold: 0.02,
            seed: 42,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LineFitError {
    #[error("{valid} of {total} samples have valid depth")]
    InsufficientDepth { valid: usize, total: usize },
    #[error("samples do not determine a line")]
    DegenerateFit,
}

/// Maximum spread across a region (pixels) for it to count as a line.
const MAX_WIDTH_STD: f64 = 1.5;

/// Detects straight segments at least `params.min_length` pixels long.
///
/// Pixels with strong gradients are grouped into 8-connected regions of
/// consistent level-line orientation (modulo π), seeded strongest first.
/// Each region is summarized by a gradient-weighted principal axis; its
/// endpoints are the extreme pixel projections onto that axis.
pub fn detect_lines(frame: &RgbdFrame, params: &LineParams) -> Vec<LineSegment> {
    let img = frame.intensity();
    let (w, h) = (img.width, img.height);
    let (gx, gy) = img.sobel();
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    // Doubled level-line angle makes orientation sign-free.
    let doubled: Vec<(f64, f64)> = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| {
            let t = (a as f64).atan2(-(b as f64));
            ((2.0 * t).cos(), (2.0 * t).sin())
        })
        .collect();
    let mut seeds: Vec<usize> = (0..w * h).filter(|&i| mag[i] > params.gradient_threshold).collect();
    seeds.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    let cos_tol = (2.0 * params.angle_tolerance_deg.to_radians()).cos();

    let mut used = vec![false; w * h];
    let mut segments = Vec::new();
    let mut queue = VecDeque::new();
    let mut region: Vec<usize> = Vec::new();
    for seed in seeds {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        region.clear();
        region.push(seed);
        queue.push_back(seed);
        let mut sum = doubled[seed];
        while let Some(p) = queue.pop_front() {
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            let norm = (sum.0 * sum.0 + sum.1 * sum.1).sqrt().max(1e-12);
            let mean = (sum.0 / norm, sum.1 / norm);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if used[q] || mag[q] <= params.gradient_threshold {
                        continue;
                    }
                    if doubled[q].0 * mean.0 + doubled[q].1 * mean.1 >= cos_tol {
                        used[q] = true;
                        region.push(q);
                        queue.push_back(q);
                        sum.0 += doubled[q].0;
                        sum.1 += doubled[q].1;
                    }
                }
            }
        }
        if (region.len() as f64) < params.min_length {
            continue;
        }
        if let Some(seg) = fit_region(&region, &mag, w, params.min_length) {
            segments.push(seg);
        }
    }
    segments
}

fn fit_region(region: &[usize], mag: &[f32], w: usize, min_length: f64) -> Option<LineSegment> {
    let mut total = 0.0;
    let mut mean = Vector2::zeros();
    for &p in region {
        let m = mag[p] as f64;
        total += m;
        mean += Vector2::new((p % w) as f64, (p / w) as f64) * m;
    }
    mean /= total;
    let mut cov = Matrix2::zeros();
    for &p in region {
        let d = Vector2::new((p % w) as f64, (p / w) as f64) - mean;
        cov += d * d.transpose() * (mag[p] as f64);
    }
    cov /= total;
    let eig = SymmetricEigen::new(cov);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    if eig.eigenvalues[minor].max(0.0).sqrt() > MAX_WIDTH_STD {
        return None;
    }
    let dir: Vector2<f64> = eig.eigenvectors.column(major).into();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &p in region {
        let t = (Vector2::new((p % w) as f64, (p / w) as f64) - mean).dot(&dir);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if hi - lo < min_length {
        return None;
    }
    // Start is the endpoint with the smaller x (then y).
    let (a, b) = (mean + dir * lo, mean + dir * hi);
    let (start, end) = if a.x < b.x || (a.x == b.x && a.y <= b.y) {
        (a, b)
    } else {
        (b, a)
    };
    Some(LineSegment::new(start, end))
}

fn pca_line(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imax();
    if !(eig.eigenvalues[k] > 1e-18) {
        return None;
    }
    Some((c, eig.eigenvectors.column(k).into()))
}

fn distance_to_line(p: &Vector3<f64>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    (p - origin).cross(dir).norm()
}

/// Fits a 3D line to the depth samples along a 2D segment.
///
/// One sample is taken per pixel of length. The segment is rejected when
/// fewer than `params.min_valid_depth` of the samples have depth. Otherwise a
/// seeded RANSAC finds the consensus set, the line is refit to it by least
/// squares, and the endpoints are the extreme inlier projections. Returns the
/// segment with its 3D fields filled in.
pub fn fit_line_3d(seg: &LineSegment, frame: &RgbdFrame, params: &LineParams) -> Result<LineSegment, LineFitError> {
    let length = seg.length();
    let n = (length.ceil() as usize + 1).max(2);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let p = seg.start + (seg.end - seg.start) * (i as f64 / (n - 1) as f64);
        if let Some(x) = frame.point_at_subpixel(&p) {
            samples.push(x);
        }
    }
    if (samples.len() as f64) < params.min_valid_depth * n as f64 || samples.len() < 2 {
        return Err(LineFitError::InsufficientDepth {
            valid: samples.len(),
            total: n,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..params.ransac_iterations.max(1) {
        let i = rng.random_range(0..samples.len());
        let j = rng.random_range(0..samples.len());
        let Some(dir) = (samples[j] - samples[i]).try_normalize(1e-9) else {
            continue;
        };
        let inliers: Vec<usize> = (0..samples.len())
            .filter(|&k| distance_to_line(&samples[k], &samples[i], &dir) < params.inlier_threshold)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
            if best.len() == samples.len() {
                break;
            }
        }
    }
    if best.len() < 2 {
        return Err(LineFitError::DegenerateFit);
    }
    let inliers: Vec<Vector3<f64>> = best.iter().map(|&k| samples[k]).collect();
    let (center, mut dir) = pca_line(&inliers).ok_or(LineFitError::DegenerateFit)?;
    // Orient from the start of the 2D segment toward its end.
    if (inliers[inliers.len() - 1] - inliers[0]).dot(&dir) < 0.0 {
        dir = -dir;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &inliers {
        let t = (p - center).dot(&dir);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if hi - lo <= 1e-9 {
        return Err(LineFitError::DegenerateFit);
    }
    let a = center + dir * lo;
    let b = center + dir * hi;
    let mut out = seg.clone();
    out.endpoints_3d = Some((a, b));
    out.direction_3d = Some((b - a).normalize());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::sensor::DepthMap;
    use image::{Rgb, RgbImage};

    fn flat_frame(rgb: RgbImage, depth: f32) -> RgbdFrame {
        let (w, h) = rgb.dimensions();
        let k = CameraIntrinsics::new(
            100.0,
            100.0,
            w as f64 / 2.0,
            h as f64 / 2.0,
            1.0,
            w as usize,
            h as usize,
        )
        .unwrap();
        let d = DepthMap::from_vec(w as usize, h as usize, vec![depth; (w * h) as usize]);
        RgbdFrame::new(0.0, rgb, d, k).unwrap()
    }

    #[test]
    fn vertical_edge_gives_one_segment() {
        let img = RgbImage::from_fn(
            100,
            80,
            |x, _| if x < 50 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) },
        );
        let segs = detect_lines(&flat_frame(img, 2.0), &LineParams::default());
        assert_eq!(segs.len(), 1);
        let s = &segs[0];
        assert!((s.start.x - 49.5).abs() < 1.0 && (s.end.x - 49.5).abs() < 1.0);
        let deviation = (s.angle() - std::f64::consts::FRAC_PI_2).abs().to_degrees();
        assert!(deviation < 1.0);
    }

    #[test]
    fn uniform_image_has_no_segments() {
        let img = RgbImage::from_pixel(100, 80, Rgb([90, 90, 90]));
        assert!(detect_lines(&flat_frame(img, 2.0), &LineParams::default()).is_empty());
    }

    #[test]
    fn zero_depth_is_insufficient() {
        let img = RgbImage::from_pixel(100, 80, Rgb([90, 90, 90]));
        let frame = flat_frame(img, 0.0);
        let seg = LineSegment::new(Vector2::new(10.0, 10.0), Vector2::new(60.0, 10.0));
        assert!(matches!(
            fit_line_3d(&seg, &frame, &LineParams::default()),
            Err(LineFitError::InsufficientDepth { .. })
        ));
    }

    #[test]
    fn fit_on_flat_wall_is_exact() {
        let img = RgbImage::from_pixel(100, 80, Rgb([90, 90, 90]));
        let frame = flat_frame(img, 2.0);
        let seg = LineSegment::new(Vector2::new(10.0, 20.0), Vector2::new(80.0, 55.0));
        let fit = fit_line_3d(&seg, &frame, &LineParams::default()).unwrap();
        let k = frame.intrinsics;
        let truth = (k.back_project_metric(80.0, 55.0, 2.0) - k.back_project_metric(10.0, 20.0, 2.0)).normalize();
        let dir = fit.direction_3d.unwrap();
        assert!(dir.dot(&truth) > 0.1f64.to_radians().cos());
        let (a, b) = fit.endpoints_3d.unwrap();
        assert!((a - k.back_project_metric(10.0, 20.0, 2.0)).norm() < 1e-5);
        assert!((b - k.back_project_metric(80.0, 55.0, 2.0)).norm() < 1e-5);
    }
}
