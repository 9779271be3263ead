//! Frame-by-frame driver: feature extraction, Manhattan initialization,
//! decoupled rotation/translation tracking, refinement and mapping.

use crate::config::Config;
use crate::evaluation::{Trajectory, TrajectoryError};
use crate::features::{
    detect_and_describe_points, detect_lines, fit_line_3d, segment_planes, FrameFeatures, LineParams, PlaneParams,
    PointParams,
};
use crate::geometry::{compose_world_rotation, nearest_rotation, ManhattanFrame, Pose};
use crate::manhattan::{
    collect_directions, initialize_from_samples, track_manhattan_rotation, ManhattanError, MeanShiftParams,
};
use crate::mapping::{KeyframeId, SparseMap};
use crate::meshing::{mesh_map, MeshReport, PlanarMesh};
use crate::sensor::{compute_normals, RgbdFrame};
use crate::tracking::{
    estimate_translation, match_local_map, refine_pose, InlierCounts, MatchWindows, TrackerParams, TrackingStatus,
};
use nalgebra::Matrix3;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlamError {
    #[error("tracking initialization failed")]
    Initialization(#[from] ManhattanError),
}

/// Outcome of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    /// Still waiting for a frame with enough structure.
    Uninitialized,
    /// This frame defined the world and Manhattan frames.
    Initialized,
    Tracked(TrackingStatus),
}

impl FrameStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameStatus::Uninitialized => "uninitialized",
            FrameStatus::Initialized => "initialized",
            FrameStatus::Tracked(s) => s.as_str(),
        }
    }
}

/// Wall-clock time of the tracking stages.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub features: Duration,
    pub rotation: Duration,
    pub translation: Duration,
    pub refinement: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLog {
    pub index: usize,
    pub timestamp: f64,
    pub status: FrameStatus,
    pub inliers: InlierCounts,
    pub feature_counts: [usize; 3],
    pub keyframe: Option<KeyframeId>,
    /// World -> camera rotation from the Manhattan stage when it converged,
    /// before refinement. The initializing frame reports the identity.
    pub manhattan_rotation: Option<Matrix3<f64>>,
    pub timings: StageTimings,
}

impl FrameLog {
    /// One whitespace-separated record; see [`FrameLog::HEADER`].
    pub fn to_line(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        format!(
            "{} {:.6} {} {} {} {} {} {} {} {} {} {:.3} {:.3} {:.3} {:.3}",
            self.index,
            self.timestamp,
            self.status.as_str(),
            self.feature_counts[0],
            self.feature_counts[1],
            self.feature_counts[2],
            self.inliers.points,
            self.inliers.lines,
            self.inliers.planes,
            self.inliers.relations,
            self.keyframe.map_or("-".to_string(), |k| k.to_string()),
            ms(self.timings.features),
            ms(self.timings.rotation),
            ms(self.timings.translation),
            ms(self.timings.refinement),
        )
    }

    pub const HEADER: &'static str = "# frame timestamp status points lines planes inlier_points inlier_lines \
inlier_planes inlier_relations keyframe features_ms rotation_ms translation_ms refinement_ms";
}

/// Parameters of every stage, resolved once from a [`Config`].
#[derive(Debug, Clone)]
struct Stages {
    normals_patch: usize,
    points: PointParams,
    lines: LineParams,
    planes: PlaneParams,
    mean_shift: MeanShiftParams,
    tracker: TrackerParams,
    wide: MatchWindows,
    narrow: MatchWindows,
    init_frames: usize,
}

/// Points, lines (with 3D fits where depth allows) and planes of a frame.
/// The three detectors run concurrently.
pub fn extract_features(
    frame: &RgbdFrame,
    normals_patch: usize,
    points: &PointParams,
    lines: &LineParams,
    planes: &PlaneParams,
) -> FrameFeatures {
    std::thread::scope(|s| {
        let p = s.spawn(|| detect_and_describe_points(frame, points));
        let l = s.spawn(|| {
            detect_lines(frame, lines)
                .into_iter()
                .map(|seg| fit_line_3d(&seg, frame, lines).unwrap_or(seg))
                .collect::<Vec<_>>()
        });
        let normals = compute_normals(frame, normals_patch);
        let planes = segment_planes(frame, &normals, planes);
        FrameFeatures {
            points: p.join().expect("point detector panicked"),
            lines: l.join().expect("line detector panicked"),
            planes,
        }
    })
}

struct Tracked {
    manhattan: ManhattanFrame,
    reference: KeyframeId,
    last: Pose,
    before_last: Option<Pose>,
}

pub struct Slam {
    stages: Stages,
    map: SparseMap,
    state: Option<Tracked>,
    failed_inits: usize,
    frames_seen: usize,
    trajectory: Vec<(f64, Pose)>,
    logs: Vec<FrameLog>,
}

fn landmark_seeds(features: &FrameFeatures) -> usize {
    features.points.iter().filter(|p| p.depth.is_some()).count()
        + features.lines.iter().filter(|l| l.endpoints_3d.is_some()).count()
        + features.planes.len()
}

impl Slam {
    pub fn new(config: &Config) -> Self {
        Self {
            stages: Stages {
                normals_patch: config.normals_patch,
                points: config.point_params(),
                lines: config.line_params(),
                planes: config.plane_params(),
                mean_shift: config.mean_shift_params(),
                tracker: config.tracker_params(),
                wide: config.wide_windows(),
                narrow: config.narrow_windows(),
                init_frames: config.init_frames,
            },
            map: SparseMap::new(config.map_params()),
            state: None,
            failed_inits: 0,
            frames_seen: 0,
            trajectory: Vec::new(),
            logs: Vec::new(),
        }
    }

    pub fn map(&self) -> &SparseMap {
        &self.map
    }

    pub fn logs(&self) -> &[FrameLog] {
        &self.logs
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    pub fn manhattan_frame(&self) -> Option<&ManhattanFrame> {
        self.state.as_ref().map(|s| &s.manhattan)
    }

    /// Estimated world -> camera poses of every frame since initialization.
    pub fn trajectory(&self) -> Result<Trajectory, TrajectoryError> {
        Trajectory::new(self.trajectory.clone())
    }

    pub fn mesh(&self, config: &Config) -> (PlanarMesh, MeshReport) {
        mesh_map(&self.map, &config.mesh_params())
    }

    /// Processes one frame. Fails only when initialization has been tried
    /// on the configured number of frames without success.
    pub fn process(&mut self, frame: &RgbdFrame) -> Result<&FrameLog, SlamError> {
        let index = self.frames_seen;
        self.frames_seen += 1;
        let st = &self.stages;
        let start = Instant::now();
        let mut features = extract_features(frame, st.normals_patch, &st.points, &st.lines, &st.planes);
        let mut timings = StageTimings {
            features: start.elapsed(),
            ..StageTimings::default()
        };
        let feature_counts = [features.points.len(), features.lines.len(), features.planes.len()];
        let samples = collect_directions(&features.planes, &features.lines);

        let Some(state) = self.state.as_mut() else {
            let t = Instant::now();
            let init = initialize_from_samples(&samples, &st.mean_shift);
            timings.rotation = t.elapsed();
            let (status, keyframe) = match init {
                Ok((manhattan, _)) => {
                    let pose = Pose::identity();
                    let seeds = landmark_seeds(&features);
                    let report = self
                        .map
                        .insert_keyframe(frame.timestamp, &pose, &features, &frame.intrinsics, seeds);
                    self.state = Some(Tracked {
                        manhattan,
                        reference: report.keyframe,
                        last: pose,
                        before_last: None,
                    });
                    self.trajectory.push((frame.timestamp, pose));
                    (FrameStatus::Initialized, Some(report.keyframe))
                }
                Err(_) => {
                    self.failed_inits += 1;
                    if self.failed_inits >= st.init_frames {
                        return Err(SlamError::Initialization(ManhattanError::InitializationFailed {
                            frames: self.failed_inits,
                        }));
                    }
                    (FrameStatus::Uninitialized, None)
                }
            };
            self.logs.push(FrameLog {
                index,
                timestamp: frame.timestamp,
                status,
                inliers: InlierCounts::default(),
                feature_counts,
                keyframe,
                manhattan_rotation: self.state.as_ref().map(|_| Matrix3::identity()),
                timings,
            });
            return Ok(self.logs.last().expect("just pushed"));
        };

        // Constant-velocity prediction.
        let predicted = match state.before_last {
            Some(b) => {
                let p = state.last.compose(&b.inverse()).compose(&state.last);
                p.with_rotation(nearest_rotation(p.rotation()))
            }
            None => state.last,
        };

        let t = Instant::now();
        let r_mw = state.manhattan.r_mw;
        let predicted_rcm: Matrix3<f64> = predicted.rotation() * r_mw.transpose();
        let mw = track_manhattan_rotation(&samples, &predicted_rcm, &st.mean_shift);
        let rotation = if mw.converged {
            compose_world_rotation(&mw.rotation, &state.manhattan)
        } else {
            *predicted.rotation()
        };
        let oriented = predicted.with_rotation(rotation);
        timings.rotation = t.elapsed();

        let t = Instant::now();
        let k = &frame.intrinsics;
        let local = self.map.build_local_map(state.reference);
        let coarse = match_local_map(&features, &local, &oriented, k, st.wide, &st.tracker, false);
        let translated = estimate_translation(&coarse, &oriented, k, &st.tracker)
            .map(|e| e.pose)
            .unwrap_or(oriented);
        timings.translation = t.elapsed();

        let t = Instant::now();
        let windows = if mw.converged { st.narrow } else { st.wide };
        let matches = match_local_map(&features, &local, &translated, k, windows, &st.tracker, true);
        let result = refine_pose(&translated, &matches, k, mw.converged, &st.tracker);
        timings.refinement = t.elapsed();

        let lost = result.status == TrackingStatus::Lost;
        let pose = if lost { predicted } else { result.pose };
        let mut keyframe = None;
        if !lost {
            for (m, _) in matches.points.iter().zip(&result.mask.points).filter(|(_, &ok)| ok) {
                features.points[m.feature].landmark_id = Some(m.landmark);
            }
            for (m, _) in matches.lines.iter().zip(&result.mask.lines).filter(|(_, &ok)| ok) {
                features.lines[m.feature].landmark_id = Some(m.landmark);
            }
            for (m, _) in matches.planes.iter().zip(&result.mask.planes).filter(|(_, &ok)| ok) {
                features.planes[m.observation].landmark_id = Some(m.landmark);
            }
            let inliers = result.inliers.total();
            if self.map.needs_keyframe(state.reference, &pose, inliers) {
                let report = self.map.insert_keyframe(frame.timestamp, &pose, &features, k, inliers);
                self.map.cull_landmarks();
                state.reference = report.keyframe;
                keyframe = Some(report.keyframe);
            }
        }
        // A lost frame says nothing about motion: hold the pose until
        // matches return instead of extrapolating blind.
        state.before_last = if lost { None } else { Some(state.last) };
        state.last = pose;
        self.trajectory.push((frame.timestamp, pose));
        self.logs.push(FrameLog {
            index,
            timestamp: frame.timestamp,
            status: FrameStatus::Tracked(result.status),
            inliers: result.inliers,
            feature_counts,
            keyframe,
            manhattan_rotation: mw.converged.then_some(rotation),
            timings,
        });
        Ok(self.logs.last().expect("just pushed"))
    }
}
