//! FAST-9 corners scored by the Harris response, spread over a grid,
//! refined to sub-pixel accuracy and described by rotated 256-bit BRIEF.

use super::PointFeature;
use crate::sensor::{IntensityImage, RgbdFrame};
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq)]
pub struct PointParams {
    pub target_count: usize,
    pub fast_threshold: f32,
    pub grid_cell: usize,
}

impl Default for PointParams {
    fn default() -> Self {
        Self {
            target_count: 400,
            fast_threshold: 20.0,
            grid_cell: 16,
        }
    }
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

const PATCH_RADIUS: i32 = 15;
/// Pixels closer than this to the border are not described.
const BORDER: usize = 19;
const HARRIS_RADIUS: i32 = 3;
const REFINE_RADIUS: i32 = 3;

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

/// Sampling pairs of the binary test, fixed for the lifetime of the program.
fn brief_pattern() -> &'static [[f64; 4]; 256] {
    static PATTERN: OnceLock<[[f64; 4]; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b1e_f00d);
        let mut out = [[0.0; 4]; 256];
        let r = (PATCH_RADIUS - 2) as f64;
        let sample = |rng: &mut ChaCha8Rng| loop {
            let x: f64 = rng.random_range(-r..=r);
            let y: f64 = rng.random_range(-r..=r);
            if x * x + y * y <= r * r {
                return (x.round(), y.round());
            }
        };
        for pair in &mut out {
            let (a, b) = sample(&mut rng);
            let (c, d) = sample(&mut rng);
            *pair = [a, b, c, d];
        }
        out
    })
}

fn is_fast_corner(img: &IntensityImage, x: usize, y: usize, t: f32) -> bool {
    let c = img.get(x, y);
    let ring: [i8; 16] = std::array::from_fn(|k| {
        let (dx, dy) = CIRCLE[k];
        let p = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
        if p > c + t {
            1
        } else if p < c - t {
            -1
        } else {
            0
        }
    });
    // Quick rejection on the four compass points.
    let compass = [ring[0], ring[4], ring[8], ring[12]];
    if compass.iter().filter(|&&s| s == 1).count() < 2 && compass.iter().filter(|&&s| s == -1).count() < 2 {
        return false;
    }
    for sign in [1i8, -1] {
        let mut run = 0;
        for k in 0..32 {
            if ring[k % 16] == sign {
                run += 1;
                if run >= 9 {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

fn harris(gx: &[f32], gy: &[f32], w: usize, x: usize, y: usize) -> f64 {
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for dy in -HARRIS_RADIUS..=HARRIS_RADIUS {
        for dx in -HARRIS_RADIUS..=HARRIS_RADIUS {
            let i = (y as i32 + dy) as usize * w + (x as i32 + dx) as usize;
            let (u, v) = (gx[i] as f64, gy[i] as f64);
            a += u * u;
            b += u * v;
            c += v * v;
        }
    }
    a * c - b * b - 0.04 * (a + c) * (a + c)
}

/// Bilinear interpolation; the caller keeps `(x, y)` inside the image.
fn bilinear(img: &IntensityImage, x: f64, y: f64) -> f64 {
    let x0 = (x.floor() as usize).min(img.width - 2);
    let y0 = (y.floor() as usize).min(img.height - 2);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p = |xx: usize, yy: usize| img.get(xx, yy) as f64;
    (p(x0, y0) * (1.0 - fx) + p(x0 + 1, y0) * fx) * (1.0 - fy)
        + (p(x0, y0 + 1) * (1.0 - fx) + p(x0 + 1, y0 + 1) * fx) * fy
}

/// Moves a corner to the point where the window gradients are orthogonal
/// to the displacement from it. Returns `None` if it drifts away.
fn refine_corner(gx: &[f32], gy: &[f32], w: usize, h: usize, start: Vector2<f64>) -> Option<Vector2<f64>> {
    let mut q = start;
    for _ in 0..10 {
        let cx = q.x.round() as i32;
        let cy = q.y.round() as i32;
        let mut m = Matrix2::zeros();
        let mut rhs = Vector2::zeros();
        for dy in -REFINE_RADIUS..=REFINE_RADIUS {
            for dx in -REFINE_RADIUS..=REFINE_RADIUS {
                let (x, y) = (cx + dx, cy + dy);
                if x < 1 || y < 1 || x >= w as i32 - 1 || y >= h as i32 - 1 {
                    continue;
                }
                let i = y as usize * w + x as usize;
                let g = Vector2::new(gx[i] as f64, gy[i] as f64);
                let p = Vector2::new(x as f64, y as f64);
                let dist2 = (p - q).norm_squared();
                let wgt = (-dist2 / (2.0 * 2.0 * 2.0)).exp();
                let ggt = g * g.transpose() * wgt;
                m += ggt;
                rhs += ggt * p;
            }
        }
        if m.determinant() <= 1e-9 * m.trace().powi(2).max(1e-12) {
            return None;
        }
        let next = m.lu().solve(&rhs)?;
        let step = (next - q).norm();
        q = next;
        if step < 1e-3 {
            break;
        }
    }
    ((q - start).norm() <= REFINE_RADIUS as f64).then_some(q)
}

fn orientation(img: &IntensityImage, x: usize, y: usize) -> f64 {
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            if dx * dx + dy * dy > PATCH_RADIUS * PATCH_RADIUS {
                continue;
            }
            let v = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

fn describe(smooth: &IntensityImage, pixel: &Vector2<f64>, angle: f64) -> Descriptor {
    let (s, c) = angle.sin_cos();
    let mut bits = [0u64; 4];
    for (k, p) in brief_pattern().iter().enumerate() {
        let a = bilinear(smooth, pixel.x + c * p[0] - s * p[1], pixel.y + s * p[0] + c * p[1]);
        let b = bilinear(smooth, pixel.x + c * p[2] - s * p[3], pixel.y + s * p[2] + c * p[3]);
        if a < b {
            bits[k / 64] |= 1 << (k % 64);
        }
    }
    Descriptor(bits)
}

/// Detects up to `params.target_count` oriented corners with descriptors.
///
/// Candidates are FAST-9 corners kept by 3×3 non-maximum suppression of the
/// Harris response. At most `ceil(target / cells)` corners survive per grid
/// cell, the strongest overall are kept, and each is refined to sub-pixel
/// accuracy. Output is sorted by row, then column, of the detection.
pub fn detect_and_describe_points(frame: &RgbdFrame, params: &PointParams) -> Vec<PointFeature> {
    let img = frame.intensity();
    let (w, h) = (img.width, img.height);
    if w <= 2 * BORDER + 2 || h <= 2 * BORDER + 2 || params.target_count == 0 {
        return Vec::new();
    }
    let (gx, gy) = img.sobel();
    let mut score = vec![f64::NEG_INFINITY; w * h];
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            if is_fast_corner(&img, x, y, params.fast_threshold) {
                score[y * w + x] = harris(&gx, &gy, w, x, y);
            }
        }
    }
    let cell = params.grid_cell.max(1);
    let (cols, rows) = (w.div_ceil(cell), h.div_ceil(cell));
    let mut per_cell: Vec<Vec<(f64, usize)>> = vec![Vec::new(); cols * rows];
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let s = score[y * w + x];
            if !(s > 0.0) {
                continue;
            }
            let is_max = (-1i32..=1).all(|dy| {
                (-1i32..=1).all(|dx| {
                    let j = (y as i32 + dy) as usize * w + (x as i32 + dx) as usize;
                    (dx == 0 && dy == 0) || score[j] < s || (score[j] == s && j > y * w + x)
                })
            });
            if is_max {
                per_cell[(y / cell) * cols + x / cell].push((s, y * w + x));
            }
        }
    }
    let cap = params.target_count.div_ceil(cols * rows).max(1);
    let mut kept: Vec<(f64, usize)> = Vec::new();
    for mut c in per_cell {
        c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        kept.extend(c.into_iter().take(cap));
    }
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    kept.truncate(params.target_count);
    kept.sort_by_key(|k| k.1);

    let smooth = img.blurred();
    let limit = |v: f64, n: usize| v >= BORDER as f64 - 2.0 && v <= (n - BORDER) as f64 + 1.0;
    kept.into_iter()
        .filter_map(|(response, idx)| {
            let (x, y) = (idx % w, idx / w);
            let pixel = refine_corner(&gx, &gy, w, h, Vector2::new(x as f64, y as f64))?;
            if !limit(pixel.x, w) || !limit(pixel.y, h) {
                return None;
            }
            let angle = orientation(&img, x, y);
            Some(PointFeature {
                pixel,
                descriptor: describe(&smooth, &pixel, angle),
                depth: frame.depth.sample(pixel.x, pixel.y),
                angle,
                response,
                landmark_id: None,
            })
        })
        .collect()
}

/// Mutual nearest neighbours by Hamming distance that pass the absolute
/// threshold and the ratio test. Returns `(index in a, index in b)` sorted by
/// the index in `a`.
pub fn match_points(a: &[PointFeature], b: &[PointFeature], max_distance: u32, ratio: f64) -> Vec<(usize, usize)> {
    let best_of = |from: &[PointFeature], to: &[PointFeature]| -> Vec<Option<(usize, u32, u32)>> {
        from.iter()
            .map(|f| {
                let mut best: Option<(usize, u32)> = None;
                let mut second = u32::MAX;
                for (j, g) in to.iter().enumerate() {
                    let d = f.descriptor.distance(&g.descriptor);
                    match best {
                        Some((_, bd)) if d >= bd => second = second.min(d),
                        _ => {
                            if let Some((_, bd)) = best {
                                second = second.min(bd);
                            }
                            best = Some((j, d));
                        }
                    }
                }
                best.map(|(j, d)| (j, d, second))
            })
            .collect()
    };
    let forward = best_of(a, b);
    let backward = best_of(b, a);
    let mut out = Vec::new();
    for (i, f) in forward.iter().enumerate() {
        let Some((j, d, second)) = *f else { continue };
        if d > max_distance {
            continue;
        }
        if second != u32::MAX && d as f64 >= ratio * second as f64 {
            continue;
        }
        if backward[j].map(|(k, _, _)| k) == Some(i) {
            out.push((i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::sensor::DepthMap;
    use image::{Rgb, RgbImage};

    fn frame(rgb: RgbImage) -> RgbdFrame {
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
        RgbdFrame::new(0.0, rgb, DepthMap::new(w as usize, h as usize), k).unwrap()
    }

    fn checkerboard(w: u32, h: u32, square: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            // Offset inner squares so corners are L-shaped rather than X-shaped.
            let (cx, cy) = (x / square, y / square);
            let (fx, fy) = (x % square, y % square);
            let inner = fx >= square / 4 && fx < 3 * square / 4 && fy >= square / 4 && fy < 3 * square / 4;
            let base = if (cx + cy) % 2 == 0 { 60 } else { 190 };
            let v = if inner { 255 - base } else { base };
            Rgb([v, v, v])
        })
    }

    #[test]
    fn uniform_image_has_no_points() {
        let f = frame(RgbImage::from_pixel(160, 120, Rgb([128, 128, 128])));
        assert!(detect_and_describe_points(&f, &PointParams::default()).is_empty());
    }

    #[test]
    fn checkerboard_points_respect_grid_cap() {
        let f = frame(checkerboard(320, 240, 24));
        let params = PointParams {
            target_count: 500,
            ..PointParams::default()
        };
        let pts = detect_and_describe_points(&f, &params);
        assert!(pts.len() >= 100, "{}", pts.len());
        let cap = 500usize.div_ceil(20 * 15);
        let mut counts = std::collections::HashMap::new();
        for p in &pts {
            let key = (p.pixel.x.round() as usize / 16, p.pixel.y.round() as usize / 16);
            *counts.entry(key).or_insert(0) += 1;
        }
        // Sub-pixel refinement can move a corner across a cell boundary.
        assert!(counts.values().all(|&c| c <= cap + 1));
        assert_eq!(pts, detect_and_describe_points(&f, &params));
    }

    #[test]
    fn subpixel_corner_accuracy() {
        // A bright square with corners at (40.5, 30.5) and (80.5, 70.5) in
        // pixel-centre coordinates.
        let img = RgbImage::from_fn(120, 100, |x, y| {
            let v = if (41..=80).contains(&x) && (31..=70).contains(&y) {
                200
            } else {
                50
            };
            Rgb([v, v, v])
        });
        let pts = detect_and_describe_points(&frame(img), &PointParams::default());
        let corners = [(40.5, 30.5), (80.5, 30.5), (40.5, 70.5), (80.5, 70.5)];
        for (cx, cy) in corners {
            let best = pts
                .iter()
                .map(|p| (p.pixel - Vector2::new(cx, cy)).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.2, "corner ({cx}, {cy}) off by {best}");
        }
    }

    fn feature(bits: [u64; 4]) -> PointFeature {
        PointFeature {
            pixel: Vector2::zeros(),
            descriptor: Descriptor(bits),
            depth: None,
            angle: 0.0,
            response: 1.0,
            landmark_id: None,
        }
    }

    #[test]
    fn identical_lists_match_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..50).map(|_| feature(rng.random())).collect();
        let m = match_points(&a, &a, 64, 0.8);
        assert_eq!(m, (0..50).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn random_descriptors_do_not_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<_> = (0..200).map(|_| feature(rng.random())).collect();
        let b: Vec<_> = (0..200).map(|_| feature(rng.random())).collect();
        assert!(match_points(&a, &b, 50, 0.8).is_empty());
    }

    #[test]
    fn ambiguous_feature_fails_ratio_test() {
        let a = vec![feature([0; 4])];
        let b = vec![feature([1, 0, 0, 0]), feature([2, 0, 0, 0])];
        assert!(match_points(&a, &b, 64, 0.8).is_empty());
    }
}
