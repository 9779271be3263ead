//! Frame-to-frame visual odometry: descriptor matches against the previous
//! frame only, 6-DoF refinement, poses chained. No map, no Manhattan frame,
//! so rotation errors accumulate.

use planeslam::features::{detect_and_describe_points, match_points, MatchSet, PointFeature, PointMatch};
use planeslam::mapping::LandmarkId;
use planeslam::nalgebra::Vector3;
use planeslam::sensor::RgbdFrame;
use planeslam::tracking::{refine_pose, TrackingStatus};
use planeslam::{Config, Pose};

struct Previous {
    points: Vec<PointFeature>,
    /// Camera-frame position of every point with valid depth.
    positions: Vec<Option<Vector3<f64>>>,
}

/// World -> camera pose of every frame, the first frame being the world.
pub fn frame_to_frame(frames: &[RgbdFrame], config: &Config) -> Vec<Pose> {
    let point_params = config.point_params();
    let tracker = config.tracker_params();
    let mut poses = Vec::with_capacity(frames.len());
    let mut previous: Option<Previous> = None;
    let mut velocity = Pose::identity();
    for frame in frames {
        let k = &frame.intrinsics;
        let points = detect_and_describe_points(frame, &point_params);
        let pose = match &previous {
            None => Pose::identity(),
            Some(prev) => {
                let mut set = MatchSet::default();
                for (i, j) in match_points(&prev.points, &points, tracker.max_hamming, tracker.match_ratio) {
                    let Some(position) = prev.positions[i] else { continue };
                    set.points.push(PointMatch {
                        feature: j,
                        landmark: LandmarkId(i as u64),
                        pixel: points[j].pixel,
                        position,
                        weight: 1.0 / (tracker.sigma_point * tracker.sigma_point),
                    });
                }
                let result = refine_pose(&velocity, &set, k, false, &tracker);
                if result.status != TrackingStatus::Lost {
                    velocity = result.pose;
                }
                velocity.compose(poses.last().expect("previous pose"))
            }
        };
        poses.push(pose);
        let positions = points
            .iter()
            .map(|p| p.depth.map(|z| k.back_project_metric(p.pixel.x, p.pixel.y, z)))
            .collect();
        previous = Some(Previous { points, positions });
    }
    poses
}
