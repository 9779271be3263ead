//! Guided matching of frame features against the local map at a pose guess.

use super::TrackerParams;
use crate::features::{
    associate_planes, fit_variance, line_function, FrameFeatures, LineMatch, MatchSet, PlaneMatch, PointMatch,
    RelationMatch,
};
use crate::geometry::{transform_plane, CameraIntrinsics, Pose};
use crate::mapping::{LandmarkId, LocalMap};
use nalgebra::{Vector2, Vector3};
use std::collections::{BTreeMap, HashMap};

/// Search radii around projected landmarks (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWindows {
    pub point_radius: f64,
    pub line_radius: f64,
}

/// Keeps the best-scored proposal per feature and per landmark, scanning
/// proposals in ascending score (ties by landmark then feature index).
fn one_to_one(mut proposals: Vec<(f64, usize, usize)>) -> Vec<(usize, usize)> {
    proposals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_landmark = std::collections::BTreeSet::new();
    let mut used_feature = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (_, landmark, feature) in proposals {
        if used_landmark.contains(&landmark) || used_feature.contains(&feature) {
            continue;
        }
        used_landmark.insert(landmark);
        used_feature.insert(feature);
        out.push((landmark, feature));
    }
    out
}

fn match_points(
    features: &FrameFeatures,
    local: &LocalMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    radius: f64,
    params: &TrackerParams,
) -> Vec<PointMatch> {
    let cell = radius.max(1.0);
    let cell_of = |p: &Vector2<f64>| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, f) in features.points.iter().enumerate() {
        grid.entry(cell_of(&f.pixel)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut proposals = Vec::new();
    for (li, (_, position, descriptor)) in local.points.iter().enumerate() {
        let xc = pose.transform_point(position);
        let Ok(px) = k.project(&xc) else { continue };
        if !k.contains(&px, 0.0) {
            continue;
        }
        let (cx, cy) = cell_of(&px);
        let mut candidates = Vec::new();
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                for &fi in grid.get(&(gx, gy)).map(Vec::as_slice).unwrap_or(&[]) {
                    let f = &features.points[fi];
                    let d2 = (f.pixel - px).norm_squared();
                    if d2 <= r2 {
                        candidates.push((f.descriptor.distance(descriptor), d2, fi));
                    }
                }
            }
        }
        candidates.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        let Some(&(dist, d2, fi)) = candidates.first() else {
            continue;
        };
        let ambiguous = candidates
            .get(1)
            .is_some_and(|c| dist as f64 >= params.match_ratio * c.0 as f64);
        if dist > params.max_hamming || ambiguous {
            continue;
        }
        proposals.push((dist as f64 + d2.sqrt() * 1e-3, li, fi));
    }
    let weight = 1.0 / (params.sigma_point * params.sigma_point);
    one_to_one(proposals)
        .into_iter()
        .map(|(li, fi)| PointMatch {
            feature: fi,
            landmark: local.points[li].0,
            pixel: features.points[fi].pixel,
            position: local.points[li].1,
            weight,
        })
        .collect()
}

/// Line function, unit image direction and pixel length of a segment.
type ObservedLine = (Vector3<f64>, Vector2<f64>, f64);

fn match_lines(
    features: &FrameFeatures,
    local: &LocalMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    radius: f64,
    params: &TrackerParams,
) -> Vec<LineMatch> {
    let cos_tol = params.line_angle_tolerance.to_radians().cos();
    let observed: Vec<Option<ObservedLine>> = features
        .lines
        .iter()
        .map(|l| {
            let line = line_function(&l.start, &l.end).ok()?;
            let dir = (l.end - l.start) / l.length();
            Some((line, dir, l.length()))
        })
        .collect();
    let mut proposals = Vec::new();
    for (li, (_, start, end)) in local.lines.iter().enumerate() {
        let (Ok(a), Ok(b)) = (
            k.project(&pose.transform_point(start)),
            k.project(&pose.transform_point(end)),
        ) else {
            continue;
        };
        let span = b - a;
        let len = span.norm();
        if len < 1.0 {
            continue;
        }
        let dir = span / len;
        for (fi, obs) in observed.iter().enumerate() {
            let Some((line, odir, olen)) = obs else { continue };
            if dir.dot(odir).abs() < cos_tol {
                continue;
            }
            let norm = (line.x * line.x + line.y * line.y).sqrt();
            let dist = |p: &Vector2<f64>| (line.x * p.x + line.y * p.y + line.z).abs() / norm;
            let (da, db) = (dist(&a), dist(&b));
            if da > radius || db > radius {
                continue;
            }
            // The projected segment must overlap the observed one.
            let s = features.lines[fi].start;
            let (ta, tb) = ((a - s).dot(odir), (b - s).dot(odir));
            let (lo, hi) = (ta.min(tb), ta.max(tb));
            if hi < -radius || lo > olen + radius {
                continue;
            }
            proposals.push((da + db, li, fi));
        }
    }
    let weight = 1.0 / (params.sigma_line * params.sigma_line);
    one_to_one(proposals)
        .into_iter()
        .map(|(li, fi)| LineMatch {
            feature: fi,
            landmark: local.lines[li].0,
            line: observed[fi].expect("proposals come from valid lines").0,
            start: local.lines[li].1,
            end: local.lines[li].2,
            weight,
        })
        .collect()
}

/// Plane matches weighted by the configured noise plus the fit
/// uncertainty of both the observation and the landmark, so thin or
/// sparsely supported planes count for less.
fn match_planes(features: &FrameFeatures, local: &LocalMap, pose: &Pose, params: &TrackerParams) -> Vec<PlaneMatch> {
    let in_camera: Vec<_> = local.planes.iter().map(|(_, p, _)| transform_plane(p, pose)).collect();
    let assigned = associate_planes(
        &features.planes,
        &in_camera,
        params.association_angle,
        params.association_distance,
    );
    let proposals = assigned
        .iter()
        .enumerate()
        .filter_map(|(oi, m)| {
            let j = (*m)?;
            let dist = in_camera[j].signed_distance(&features.planes[oi].centroid).abs();
            Some((dist, j, oi))
        })
        .collect();
    let angle_var = params.sigma_plane_angle * params.sigma_plane_angle;
    let dist_var = params.sigma_plane_distance * params.sigma_plane_distance;
    one_to_one(proposals)
        .into_iter()
        .map(|(j, oi)| {
            let obs = &features.planes[oi];
            let seen = fit_variance(&obs.inlier_points, &obs.plane).unwrap_or_default();
            let mapped = local.planes[j].2;
            let angle = 1.0 / (angle_var + seen.angle + mapped.angle);
            PlaneMatch {
                observation: oi,
                landmark: local.planes[j].0,
                observed: obs.plane,
                map_plane: local.planes[j].1,
                weight: Vector3::new(angle, angle, 1.0 / (dist_var + seen.offset + mapped.offset)),
            }
        })
        .collect()
}

/// For every matched plane, the map planes related to its landmark.
fn relation_matches(
    features: &FrameFeatures,
    local: &LocalMap,
    planes: &[PlaneMatch],
    params: &TrackerParams,
) -> Vec<RelationMatch> {
    let normals: BTreeMap<LandmarkId, (Vector3<f64>, f64)> = local
        .planes
        .iter()
        .map(|(id, p, v)| (*id, (p.normal, v.angle)))
        .collect();
    let mut related: BTreeMap<LandmarkId, Vec<(LandmarkId, crate::features::RelationKind)>> = BTreeMap::new();
    for &(a, b, kind) in &local.relations {
        related.entry(a).or_default().push((b, kind));
        related.entry(b).or_default().push((a, kind));
    }
    let base = params.sigma_relation * params.sigma_relation;
    let mut out = Vec::new();
    for m in planes {
        let obs = &features.planes[m.observation];
        let seen = fit_variance(&obs.inlier_points, &obs.plane).unwrap_or_default().angle;
        for &(other, kind) in related.get(&m.landmark).map(Vec::as_slice).unwrap_or(&[]) {
            let Some(&(n, mapped)) = normals.get(&other) else {
                continue;
            };
            out.push(RelationMatch {
                observation: m.observation,
                landmark: other,
                kind,
                observed_normal: obs.plane.normal,
                map_normal: n,
                weight: 1.0 / (base + seen + mapped),
            });
        }
    }
    out
}

/// Matches points (projection window plus descriptor), lines (projected
/// segment near the observed line) and planes (normal angle and offset
/// gates) one-to-one against the local map, plus the relation constraints
/// implied by the matched planes when `relations` is set.
pub fn match_local_map(
    features: &FrameFeatures,
    local: &LocalMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    windows: MatchWindows,
    params: &TrackerParams,
    relations: bool,
) -> MatchSet {
    let points = match_points(features, local, pose, k, windows.point_radius, params);
    let lines = match_lines(features, local, pose, k, windows.line_radius, params);
    let planes = match_planes(features, local, pose, params);
    let relations = if relations {
        relation_matches(features, local, &planes, params)
    } else {
        Vec::new()
    };
    MatchSet {
        points,
        lines,
        planes,
        relations,
    }
}
