//! Plane instances from depth, plane association and inter-plane relations.

use super::PlaneObservation;
use crate::geometry::PlaneHessian;
use crate::sensor::{NormalMap, RgbdFrame};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneParams {
    /// Flood-fill normal agreement (degrees).
    pub angle_threshold_deg: f64,
    /// Flood-fill and inlier point-to-plane distance (meters).
    pub distance_threshold: f64,
    pub min_inliers: usize,
}

impl Default for PlaneParams {
    fn default() -> Self {
        Self {
            angle_threshold_deg: 5.0,
            distance_threshold: 0.02,
            min_inliers: 1000,
        }
    }
}

/// Running first and second moments of a point set.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Moments {
    n: f64,
    sum: Vector3<f64>,
    outer: Matrix3<f64>,
}

impl Moments {
    pub(crate) fn new() -> Self {
        Self {
            n: 0.0,
            sum: Vector3::zeros(),
            outer: Matrix3::zeros(),
        }
    }

    pub(crate) fn add(&mut self, p: &Vector3<f64>) {
        self.n += 1.0;
        self.sum += p;
        self.outer += p * p.transpose();
    }

    pub(crate) fn centroid(&self) -> Vector3<f64> {
        self.sum / self.n
    }

    /// Least-squares plane: smallest eigenvector of the centred scatter.
    /// The normal sign follows `hint`.
    pub(crate) fn fit(&self, hint: &Vector3<f64>) -> Option<PlaneHessian> {
        if self.n < 3.0 {
            return None;
        }
        let c = self.centroid();
        let scatter = self.outer / self.n - c * c.transpose();
        let eig = SymmetricEigen::new(scatter);
        let k = eig.eigenvalues.imin();
        let mut n: Vector3<f64> = eig.eigenvectors.column(k).into();
        n = n.try_normalize(1e-12)?;
        if n.dot(hint) < 0.0 {
            n = -n;
        }
        Some(PlaneHessian {
            normal: n,
            d: -n.dot(&c),
        })
    }

    /// Uncertainty of `plane` as a fit to these points, from the residual
    /// spread and the narrowest in-plane extent.
    pub(crate) fn variance(&self, plane: &PlaneHessian) -> Option<PlaneVariance> {
        if self.n < 4.0 {
            return None;
        }
        let n = plane.normal;
        let c = self.centroid();
        let rss = n.dot(&(self.outer * n)) + 2.0 * plane.d * n.dot(&self.sum) + self.n * plane.d * plane.d;
        let sigma2 = rss.max(0.0) / (self.n - 3.0);
        let scatter = self.outer - self.n * c * c.transpose();
        let tangent = Matrix3::identity() - n * n.transpose();
        let mut spread: Vec<f64> = SymmetricEigen::new(tangent * scatter * tangent)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        spread.sort_by(f64::total_cmp);
        // The smallest eigenvalue belongs to the normal itself.
        if !(spread[1] > 0.0) {
            return None;
        }
        let angle = sigma2 / spread[1];
        let lever = c - n * n.dot(&c);
        Some(PlaneVariance {
            angle,
            offset: sigma2 / self.n + angle * lever.norm_squared(),
        })
    }
}

/// Variance of a fitted plane's normal direction (rad²) and offset (m²).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlaneVariance {
    pub angle: f64,
    pub offset: f64,
}

/// Fit uncertainty of `plane` over `points`; `None` for fewer than four
/// points or a degenerate (collinear) spread.
pub fn fit_variance(points: &[Vector3<f64>], plane: &PlaneHessian) -> Option<PlaneVariance> {
    let mut m = Moments::new();
    for p in points {
        m.add(p);
    }
    m.variance(plane)
}

/// Least-squares plane through `points`, normal sign following `hint`.
pub fn fit_plane(points: &[Vector3<f64>], hint: &Vector3<f64>) -> Option<PlaneHessian> {
    let mut m = Moments::new();
    for p in points {
        m.add(p);
    }
    m.fit(hint)
}

/// Segments planar regions by flood fill over 4-connected pixels.
///
/// A region grows from a seed pixel while neighbours have normals within
/// the angle threshold of the region plane and lie within the distance
/// threshold of it; the region plane is refit as the region doubles in
/// size. Regions that end with at least `min_inliers` pixels are refit once
/// more, their inliers re-checked against the final plane, and reported in
/// canonical form.
pub fn segment_planes(frame: &RgbdFrame, normals: &NormalMap, params: &PlaneParams) -> Vec<PlaneObservation> {
    let (w, h) = (frame.width(), frame.height());
    let cos_tol = params.angle_threshold_deg.to_radians().cos();
    let points: Vec<Option<Vector3<f64>>> = (0..w * h).map(|i| frame.point_at(i % w, i / w)).collect();
    let mut taken = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let mut region = Vec::new();
    for seed in 0..w * h {
        if taken[seed] {
            continue;
        }
        let (Some(n0), Some(p0)) = (normals.normals[seed], points[seed]) else {
            continue;
        };
        taken[seed] = true;
        region.clear();
        region.push(seed);
        queue.push_back(seed);
        let mut moments = Moments::new();
        moments.add(&p0);
        let mut plane = PlaneHessian {
            normal: n0,
            d: -n0.dot(&p0),
        };
        let mut next_refit = 16;
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            let neighbours = [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ];
            for q in neighbours.into_iter().flatten() {
                if taken[q] {
                    continue;
                }
                let (Some(nq), Some(pq)) = (normals.normals[q], points[q]) else {
                    continue;
                };
                if nq.dot(&plane.normal) < cos_tol || plane.signed_distance(&pq).abs() >= params.distance_threshold {
                    continue;
                }
                taken[q] = true;
                region.push(q);
                queue.push_back(q);
                moments.add(&pq);
                if region.len() >= next_refit {
                    if let Some(refit) = moments.fit(&plane.normal) {
                        plane = refit;
                    }
                    next_refit *= 2;
                }
            }
        }
        if region.len() < params.min_inliers {
            continue;
        }
        let Some(fitted) = moments.fit(&plane.normal) else {
            continue;
        };
        let inlier_pixels: Vec<(u32, u32)> = region
            .iter()
            .filter(|&&p| {
                fitted
                    .signed_distance(&points[p].expect("region pixels have depth"))
                    .abs()
                    < params.distance_threshold
            })
            .map(|&p| ((p % w) as u32, (p / w) as u32))
            .collect();
        if inlier_pixels.len() < params.min_inliers {
            continue;
        }
        let inlier_points: Vec<Vector3<f64>> = inlier_pixels
            .iter()
            .map(|&(x, y)| points[y as usize * w + x as usize].expect("inliers have depth"))
            .collect();
        let centroid = inlier_points.iter().sum::<Vector3<f64>>() / inlier_points.len() as f64;
        out.push(PlaneObservation {
            plane: fitted.canonical(),
            inlier_pixels,
            inlier_points,
            centroid,
            landmark_id: None,
        });
    }
    out
}

/// Matches each observation to at most one map plane (both in the camera
/// frame).
///
/// Candidates are map planes whose normal lies within `theta_n_deg` of the
/// observed normal (orientation ignored); among those, the one with the
/// smallest distance from the observation centroid is taken if that
/// distance is below `theta_p`. Ties go to the lower map index. Several
/// observations may select the same map plane.
pub fn associate_planes(
    observed: &[PlaneObservation],
    map_planes: &[PlaneHessian],
    theta_n_deg: f64,
    theta_p: f64,
) -> Vec<Option<usize>> {
    let theta_n = theta_n_deg.to_radians();
    observed
        .iter()
        .map(|obs| {
            let mut best: Option<(f64, usize)> = None;
            for (j, m) in map_planes.iter().enumerate() {
                if obs.plane.normal_angle(m) >= theta_n {
                    continue;
                }
                let dist = m.signed_distance(&obs.centroid).abs();
                if dist < theta_p && best.is_none_or(|(bd, _)| dist < bd) {
                    best = Some((dist, j));
                }
            }
            best.map(|(_, j)| j)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    Parallel,
    Perpendicular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relation {
    pub a: usize,
    pub b: usize,
    pub kind: RelationKind,
}

/// Parallel and perpendicular pairs by normal angle alone (offsets ignored).
/// Pairs are reported with `a < b` in index order.
pub fn detect_plane_relations(
    planes: &[PlaneHessian],
    parallel_tol_deg: f64,
    perpendicular_tol_deg: f64,
) -> Vec<Relation> {
    let mut out = Vec::new();
    for i in 0..planes.len() {
        for j in i + 1..planes.len() {
            let angle = planes[i].normal_angle(&planes[j]).to_degrees();
            let kind = if angle < parallel_tol_deg {
                RelationKind::Parallel
            } else if (90.0 - angle).abs() < perpendicular_tol_deg {
                RelationKind::Perpendicular
            } else {
                continue;
            };
            out.push(Relation { a: i, b: j, kind });
        }
    }
    out
}
