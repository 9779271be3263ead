use super::RgbdFrame;
use nalgebra::Vector3;

/// Per-pixel unit normals in the camera frame; `None` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl NormalMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        self.normals[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_some()).count()
    }
}

/// Summed-area tables of back-projected points and valid-pixel counts.
struct Integral {
    stride: usize,
    sum: Vec<[f64; 4]>,
}

impl Integral {
    fn new(frame: &RgbdFrame) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let stride = w + 1;
        let mut sum = vec![[0.0; 4]; stride * (h + 1)];
        for y in 0..h {
            let mut row = [0.0; 4];
            for x in 0..w {
                if let Some(p) = frame.point_at(x, y) {
                    row[0] += p.x;
                    row[1] += p.y;
                    row[2] += p.z;
                    row[3] += 1.0;
                }
                let above = sum[y * stride + x + 1];
                sum[(y + 1) * stride + x + 1] = [
                    above[0] + row[0],
                    above[1] + row[1],
                    above[2] + row[2],
                    above[3] + row[3],
                ];
            }
        }
        Self { stride, sum }
    }

    /// Sum over the inclusive rectangle `[x0, x1] × [y0, y1]`.
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> [f64; 4] {
        let s = self.stride;
        let a = self.sum[y0 * s + x0];
        let b = self.sum[y0 * s + x1 + 1];
        let c = self.sum[(y1 + 1) * s + x0];
        let d = self.sum[(y1 + 1) * s + x1 + 1];
        [
            d[0] - b[0] - c[0] + a[0],
            d[1] - b[1] - c[1] + a[1],
            d[2] - b[2] - c[2] + a[2],
            d[3] - b[3] - c[3] + a[3],
        ]
    }

    fn mean(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Option<Vector3<f64>> {
        let s = self.rect(x0, y0, x1, y1);
        (s[3] > 0.0).then(|| Vector3::new(s[0], s[1], s[2]) / s[3])
    }
}

/// Surface normals from averaged tangent vectors over a `patch × patch`
/// window, evaluated with integral images.
///
/// The horizontal tangent is the difference between the mean points of the
/// right and left halves of the window, the vertical tangent likewise for the
/// bottom and top halves. Pixels closer than `patch / 2` to the border, with
/// invalid depth, or whose window is more than half invalid get no normal.
/// Valid normals point toward the camera.
pub fn compute_normals(frame: &RgbdFrame, patch: usize) -> NormalMap {
    assert!(patch >= 3, "normal patch must be at least 3 pixels");
    let (w, h) = (frame.width(), frame.height());
    let mut normals = vec![None; w * h];
    let r = patch / 2;
    if w <= 2 * r || h <= 2 * r {
        return NormalMap {
            width: w,
            height: h,
            normals,
        };
    }
    let integral = Integral::new(frame);
    let window_area = ((2 * r + 1) * (2 * r + 1)) as f64;
    for y in r..h - r {
        for x in r..w - r {
            let Some(center) = frame.point_at(x, y) else {
                continue;
            };
            let total = integral.rect(x - r, y - r, x + r, y + r);
            if total[3] * 2.0 < window_area {
                continue;
            }
            let (Some(left), Some(right), Some(top), Some(bottom)) = (
                integral.mean(x - r, y - r, x - 1, y + r),
                integral.mean(x + 1, y - r, x + r, y + r),
                integral.mean(x - r, y - r, x + r, y - 1),
                integral.mean(x - r, y + 1, x + r, y + r),
            ) else {
                continue;
            };
            let th = right - left;
            let tv = bottom - top;
            let Some(mut n) = th.cross(&tv).try_normalize(1e-12) else {
                continue;
            };
            if n.dot(&center) > 0.0 {
                n = -n;
            }
            normals[y * w + x] = Some(n);
        }
    }
    NormalMap {
        width: w,
        height: h,
        normals,
    }
}
