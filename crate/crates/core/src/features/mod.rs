//! Point, line and plane features of a single frame, and their matches
//! against the map.

mod lines;
mod planes;
mod points;

pub use lines::{detect_lines, fit_line_3d, LineFitError, LineParams};
pub use planes::{
    associate_planes, detect_plane_relations, fit_plane, fit_variance, segment_planes, PlaneParams, PlaneVariance,
    Relation, RelationKind,
};
pub use points::{detect_and_describe_points, match_points, Descriptor, PointParams};

use crate::geometry::PlaneHessian;
use crate::mapping::LandmarkId;
use nalgebra::{Vector2, Vector3};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct PointFeature {
    pub pixel: Vector2<f64>,
    pub descriptor: Descriptor,
    /// Depth in meters when the depth map is valid at the pixel.
    pub depth: Option<f64>,
    /// Patch orientation in radians.
    pub angle: f64,
    pub response: f64,
    pub landmark_id: Option<LandmarkId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSegment {
    pub start: Vector2<f64>,
    pub end: Vector2<f64>,
    /// Camera-frame endpoints when a 3D fit succeeded.
    pub endpoints_3d: Option<(Vector3<f64>, Vector3<f64>)>,
    pub direction_3d: Option<Vector3<f64>>,
    pub landmark_id: Option<LandmarkId>,
}

impl LineSegment {
    pub fn new(start: Vector2<f64>, end: Vector2<f64>) -> Self {
        Self {
            start,
            end,
            endpoints_3d: None,
            direction_3d: None,
            landmark_id: None,
        }
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    /// Orientation of the 2D segment in `[0, π)`.
    pub fn angle(&self) -> f64 {
        let d = self.end - self.start;
        d.y.atan2(d.x).rem_euclid(std::f64::consts::PI)
    }

    pub fn length_3d(&self) -> Option<f64> {
        self.endpoints_3d.map(|(a, b)| (b - a).norm())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneObservation {
    /// Camera-frame plane in canonical form (`d <= 0`).
    pub plane: PlaneHessian,
    pub inlier_pixels: Vec<(u32, u32)>,
    pub inlier_points: Vec<Vector3<f64>>,
    pub centroid: Vector3<f64>,
    pub landmark_id: Option<LandmarkId>,
}

impl PlaneObservation {
    pub fn area_proxy(&self) -> usize {
        self.inlier_points.len()
    }
}

/// Everything extracted from one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameFeatures {
    pub points: Vec<PointFeature>,
    pub lines: Vec<LineSegment>,
    pub planes: Vec<PlaneObservation>,
}

/// Observed pixel ↔ world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMatch {
    pub feature: usize,
    pub landmark: LandmarkId,
    pub pixel: Vector2<f64>,
    pub position: Vector3<f64>,
    pub weight: f64,
}

/// Observed 2D segment ↔ world 3D segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMatch {
    pub feature: usize,
    pub landmark: LandmarkId,
    /// Normalized line function of the observed segment.
    pub line: Vector3<f64>,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub weight: f64,
}

/// Observed camera-frame plane ↔ world map plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneMatch {
    pub observation: usize,
    pub landmark: LandmarkId,
    pub observed: PlaneHessian,
    pub map_plane: PlaneHessian,
    /// Information weights on (azimuth, elevation, offset).
    pub weight: Vector3<f64>,
}

/// Observed plane ↔ map plane related to it by parallelism or orthogonality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationMatch {
    pub observation: usize,
    pub landmark: LandmarkId,
    pub kind: RelationKind,
    /// Camera-frame normal of the observation.
    pub observed_normal: Vector3<f64>,
    /// World-frame normal of the related map plane.
    pub map_normal: Vector3<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub points: Vec<PointMatch>,
    pub lines: Vec<LineMatch>,
    pub planes: Vec<PlaneMatch>,
    pub relations: Vec<RelationMatch>,
}

impl MatchSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.lines.is_empty() && self.planes.is_empty() && self.relations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len() + self.lines.len() + self.planes.len()
    }

    /// Whether every feature and landmark appears at most once per category.
    pub fn is_one_to_one(&self) -> bool {
        fn unique<T: Ord>(items: impl Iterator<Item = T>) -> bool {
            let mut seen = BTreeSet::new();
            items.into_iter().all(|x| seen.insert(x))
        }
        unique(self.points.iter().map(|m| m.feature))
            && unique(self.points.iter().map(|m| m.landmark))
            && unique(self.lines.iter().map(|m| m.feature))
            && unique(self.lines.iter().map(|m| m.landmark))
            && unique(self.planes.iter().map(|m| m.observation))
            && unique(self.planes.iter().map(|m| m.landmark))
    }
}

/// Normalized line function through two pixels:
/// `(p̃s × p̃e) / (‖p̃s‖‖p̃e‖)` with homogeneous `p̃ = (u, v, 1)`.
pub fn line_function(start: &Vector2<f64>, end: &Vector2<f64>) -> Result<Vector3<f64>, crate::tracking::TrackingError> {
    if (start - end).norm() <= 1e-12 {
        return Err(crate::tracking::TrackingError::DegenerateEndpoints);
    }
    let a = start.push(1.0);
    let b = end.push(1.0);
    Ok(a.cross(&b) / (a.norm() * b.norm()))
}
