//! Decoupled pose tracking: translation under a fixed rotation, then joint
//! refinement against the local map.

mod matching;
mod residuals;
mod solver;

pub use matching::{match_local_map, MatchWindows};
pub use residuals::{line_residual, parallel_residual, perpendicular_residual, plane_residual, point_residual};
pub use solver::{solve, Gate, Kernel, LmParams, Parameters, ResidualBlock, SolveOutcome};

use crate::features::{MatchSet, RelationKind};
use crate::geometry::{normal_angles, CameraIntrinsics, Pose};
use nalgebra::{Matrix3x6, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum TrackingError {
    #[error("line endpoints coincide")]
    DegenerateEndpoints,
    #[error("point projects behind the camera")]
    BehindCamera,
    #[error("constraints do not determine the pose")]
    Underconstrained,
    #[error("optimization diverged")]
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerParams {
    /// Pixel noise of point observations.
    pub sigma_point: f64,
    /// Pixel noise of line observations.
    pub sigma_line: f64,
    /// Noise of plane azimuth/elevation (radians).
    pub sigma_plane_angle: f64,
    /// Noise of plane offsets (meters).
    pub sigma_plane_distance: f64,
    /// Noise of parallel/perpendicular relations (radians).
    pub sigma_relation: f64,
    pub huber_point: f64,
    pub huber_line: f64,
    /// Chi-square bound for point and line inliers.
    pub chi2_gate: f64,
    /// Componentwise Huber threshold and inlier bound on plane angles
    /// (radians).
    pub plane_gate_angle: f64,
    /// Same for plane offsets (meters).
    pub plane_gate_distance: f64,
    /// Huber threshold and inlier bound on relation residuals (radians).
    pub relation_gate: f64,
    pub lm: LmParams,
    /// Fewer inliers than this after refinement marks the frame lost.
    pub min_inliers: usize,
    pub max_hamming: u32,
    pub match_ratio: f64,
    /// Maximum orientation difference of matched 2D lines (degrees).
    pub line_angle_tolerance: f64,
    pub association_angle: f64,
    pub association_distance: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            sigma_point: 1.0,
            sigma_line: 1.0,
            sigma_plane_angle: 0.002,
            sigma_plane_distance: 0.002,
            sigma_relation: 0.01,
            huber_point: 5.99f64.sqrt(),
            huber_line: 5.99f64.sqrt(),
            chi2_gate: 5.99,
            plane_gate_angle: 0.05,
            plane_gate_distance: 0.05,
            relation_gate: 0.05,
            lm: LmParams::default(),
            min_inliers: 10,
            max_hamming: 64,
            match_ratio: 0.8,
            line_angle_tolerance: 10.0,
            association_angle: 10.0,
            association_distance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InlierCounts {
    pub points: usize,
    pub lines: usize,
    pub planes: usize,
    pub relations: usize,
}

impl InlierCounts {
    /// Feature inliers; relations are constraints between planes already
    /// counted and are left out.
    pub fn total(&self) -> usize {
        self.points + self.lines + self.planes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingStatus {
    /// Rotation came from the Manhattan stage and refinement succeeded.
    GoodMW,
    /// The Manhattan stage failed; the pose comes from refinement alone.
    RefinedOnly,
    Lost,
}

impl TrackingStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackingStatus::GoodMW => "good_mw",
            TrackingStatus::RefinedOnly => "refined_only",
            TrackingStatus::Lost => "lost",
        }
    }
}

/// Per-match inlier flags, parallel to the vectors of a [`MatchSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InlierMask {
    pub points: Vec<bool>,
    /// A line counts when both endpoint residuals are inliers.
    pub lines: Vec<bool>,
    pub planes: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    pub pose: Pose,
    pub inliers: InlierCounts,
    pub mask: InlierMask,
    pub cost: f64,
    pub status: TrackingStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Point(usize),
    /// Line match index and endpoint (0 start, 1 end).
    Line(usize, u8),
    Plane(usize),
    Relation(usize),
}

fn scalar_block(
    value: f64,
    row: nalgebra::RowVector6<f64>,
    information: f64,
    kernel: Kernel,
    gate: Gate,
) -> ResidualBlock {
    let mut jacobian = Matrix3x6::zeros();
    jacobian.set_row(0, &row);
    ResidualBlock {
        residual: Vector3::new(value, 0.0, 0.0),
        jacobian,
        information: Vector3::new(information, 0.0, 0.0),
        dim: 1,
        kernel,
        gate,
    }
}

/// Residual layout of a match set: one entry per block.
fn layout(matches: &MatchSet, relations: bool) -> Vec<Source> {
    let mut out: Vec<Source> = (0..matches.points.len()).map(Source::Point).collect();
    out.extend((0..matches.lines.len()).flat_map(|i| [Source::Line(i, 0), Source::Line(i, 1)]));
    out.extend((0..matches.planes.len()).map(Source::Plane));
    if relations {
        out.extend((0..matches.relations.len()).map(Source::Relation));
    }
    out
}

fn evaluate_block(
    source: Source,
    matches: &MatchSet,
    pose: &Pose,
    k: &CameraIntrinsics,
    params: &TrackerParams,
) -> Option<ResidualBlock> {
    match source {
        Source::Point(i) => {
            let m = &matches.points[i];
            let (r, j) = point_residual(&m.pixel, &m.position, pose, k).ok()?;
            let mut jacobian = Matrix3x6::zeros();
            jacobian.fixed_view_mut::<2, 6>(0, 0).copy_from(&j);
            Some(ResidualBlock {
                residual: Vector3::new(r.x, r.y, 0.0),
                jacobian,
                information: Vector3::new(m.weight, m.weight, 0.0),
                dim: 2,
                kernel: Kernel::Huber(params.huber_point),
                gate: Gate::Chi2(params.chi2_gate),
            })
        }
        Source::Line(i, end) => {
            let m = &matches.lines[i];
            let endpoint = if end == 0 { &m.start } else { &m.end };
            let (r, j) = line_residual(&m.line, endpoint, pose, k).ok()?;
            // Scales the line function to a pixel distance.
            let norm2 = m.line.x * m.line.x + m.line.y * m.line.y;
            Some(scalar_block(
                r,
                j,
                m.weight / norm2.max(1e-300),
                Kernel::Huber(params.huber_line),
                Gate::Chi2(params.chi2_gate),
            ))
        }
        Source::Plane(i) => {
            let m = &matches.planes[i];
            let (r, jacobian) = plane_residual(&m.observed, &m.map_plane, pose);
            // Azimuth is ill-defined toward the poles: its weight fades and its
            // bound widens with the elevation, as if the residual were
            // measured along the circle of latitude.
            let cos_psi = normal_angles(&m.observed.normal).1.cos().max(1e-6);
            let information = Vector3::new(m.weight.x * cos_psi * cos_psi, m.weight.y, m.weight.z);
            let bounds = Vector3::new(
                params.plane_gate_angle / cos_psi,
                params.plane_gate_angle,
                params.plane_gate_distance,
            );
            Some(ResidualBlock {
                residual: r,
                jacobian,
                information,
                dim: 3,
                kernel: Kernel::ComponentHuber(bounds),
                gate: Gate::Componentwise(bounds),
            })
        }
        Source::Relation(i) => {
            let m = &matches.relations[i];
            let bounds = Vector3::repeat(params.relation_gate);
            match m.kind {
                RelationKind::Parallel => {
                    let (r, j) = parallel_residual(&m.observed_normal, &m.map_normal, pose);
                    let cos_psi = normal_angles(&m.observed_normal).1.cos().max(1e-6);
                    let bounds = Vector3::new(params.relation_gate / cos_psi, params.relation_gate, 0.0);
                    let mut jacobian = Matrix3x6::zeros();
                    jacobian.fixed_view_mut::<2, 6>(0, 0).copy_from(&j);
                    Some(ResidualBlock {
                        residual: Vector3::new(r.x, r.y, 0.0),
                        jacobian,
                        information: Vector3::new(m.weight * cos_psi * cos_psi, m.weight, 0.0),
                        dim: 2,
                        kernel: Kernel::ComponentHuber(bounds),
                        gate: Gate::Componentwise(bounds),
                    })
                }
                RelationKind::Perpendicular => {
                    let (r, j) = perpendicular_residual(&m.observed_normal, &m.map_normal, pose);
                    Some(scalar_block(
                        r,
                        j,
                        m.weight,
                        Kernel::ComponentHuber(bounds),
                        Gate::Componentwise(bounds),
                    ))
                }
            }
        }
    }
}

fn inlier_mask(sources: &[Source], inliers: &[bool], matches: &MatchSet) -> InlierMask {
    let mut mask = InlierMask {
        points: vec![false; matches.points.len()],
        lines: vec![true; matches.lines.len()],
        planes: vec![false; matches.planes.len()],
    };
    for (s, &ok) in sources.iter().zip(inliers) {
        match *s {
            Source::Point(i) => mask.points[i] = ok,
            Source::Line(i, _) => mask.lines[i] &= ok,
            Source::Plane(i) => mask.planes[i] = ok,
            Source::Relation(_) => {}
        }
    }
    mask
}

fn count_inliers(sources: &[Source], inliers: &[bool]) -> InlierCounts {
    let mut counts = InlierCounts::default();
    let mut line_ends = std::collections::BTreeMap::<usize, u8>::new();
    for (s, &ok) in sources.iter().zip(inliers) {
        if !ok {
            continue;
        }
        match s {
            Source::Point(_) => counts.points += 1,
            Source::Line(i, _) => *line_ends.entry(*i).or_default() += 1,
            Source::Plane(_) => counts.planes += 1,
            Source::Relation(_) => counts.relations += 1,
        }
    }
    counts.lines = line_ends.values().filter(|&&n| n == 2).count();
    counts
}

fn run(
    matches: &MatchSet,
    initial: &Pose,
    k: &CameraIntrinsics,
    params: &TrackerParams,
    mode: Parameters,
) -> Result<(SolveOutcome, InlierCounts, InlierMask), TrackingError> {
    let sources = layout(matches, mode == Parameters::Full);
    let evaluate = |pose: &Pose| -> Vec<Option<ResidualBlock>> {
        sources
            .iter()
            .map(|&s| evaluate_block(s, matches, pose, k, params))
            .collect()
    };
    let outcome = solve(initial, evaluate, mode, &params.lm)?;
    let counts = count_inliers(&sources, &outcome.inliers);
    let mask = inlier_mask(&sources, &outcome.inliers, matches);
    Ok((outcome, counts, mask))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationEstimate {
    /// Input rotation (bit for bit) with the estimated translation.
    pub pose: Pose,
    pub inliers: InlierCounts,
    pub cost: f64,
}

/// Translation under the fixed rotation of `initial`, from point, line
/// endpoint and plane matches. Relation matches constrain rotation only and
/// are ignored here.
pub fn estimate_translation(
    matches: &MatchSet,
    initial: &Pose,
    k: &CameraIntrinsics,
    params: &TrackerParams,
) -> Result<TranslationEstimate, TrackingError> {
    let (outcome, inliers, _) = run(matches, initial, k, params, Parameters::TranslationOnly)?;
    Ok(TranslationEstimate {
        pose: outcome.pose,
        inliers,
        cost: outcome.cost,
    })
}

/// Joint 6-DoF refinement over all matches including plane relations.
///
/// `manhattan_converged` only selects the reported status. A solver failure
/// keeps the initial pose and reports the frame as lost.
pub fn refine_pose(
    initial: &Pose,
    matches: &MatchSet,
    k: &CameraIntrinsics,
    manhattan_converged: bool,
    params: &TrackerParams,
) -> TrackingResult {
    match run(matches, initial, k, params, Parameters::Full) {
        Ok((outcome, inliers, mask)) => {
            let status = if inliers.total() < params.min_inliers {
                TrackingStatus::Lost
            } else if manhattan_converged {
                TrackingStatus::GoodMW
            } else {
                TrackingStatus::RefinedOnly
            };
            TrackingResult {
                pose: outcome.pose,
                inliers,
                mask,
                cost: outcome.cost,
                status,
            }
        }
        Err(_) => TrackingResult {
            pose: *initial,
            inliers: InlierCounts::default(),
            mask: InlierMask::default(),
            cost: 0.0,
            status: TrackingStatus::Lost,
        },
    }
}
