//! Trajectory and reconstruction error metrics.
//!
//! Trajectories hold world -> camera poses like the rest of the crate; TUM
//! files store camera -> world poses and are converted at the boundary.

use crate::geometry::{rotation_angle, Pose};
use crate::meshing::KdTree;
use crate::sensor::associate_timestamps;
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Accepted deviation of a quaternion norm from 1 before normalization.
/// Published TUM ground truth is printed with four decimals, so exact unit
/// norm cannot be required.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: quaternion norm {norm} is not close to 1")]
    BadQuaternion { line: usize, norm: f64 },
    #[error("line {line}: timestamps must strictly increase")]
    NonIncreasing { line: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("only {pairs} associated pose pair(s); need at least {needed}")]
    NoOverlap { pairs: usize, needed: usize },
    #[error("model point set is empty")]
    EmptyModel,
}

/// Timestamped world -> camera poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self, TrajectoryError> {
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(TrajectoryError::NonIncreasing { line: i + 2 });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(|e| e.1).collect()
    }

    /// Camera centres in world coordinates.
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|e| e.1.camera_center()).collect()
    }

    /// Applies `transform` (world -> new world) to every pose.
    pub fn transformed(&self, transform: &Pose) -> Self {
        let inv = transform.inverse();
        Self {
            entries: self.entries.iter().map(|(t, p)| (*t, p.compose(&inv))).collect(),
        }
    }

    /// Parses `timestamp tx ty tz qx qy qz qw` lines (camera -> world).
    pub fn parse_tum(text: &str) -> Result<Self, TrajectoryError> {
        let mut entries: Vec<(f64, Pose)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let values = content
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TrajectoryError::Malformed {
                    line,
                    message: e.to_string(),
                })?;
            if values.len() != 8 {
                return Err(TrajectoryError::Malformed {
                    line,
                    message: format!("expected 8 values, got {}", values.len()),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TrajectoryError::Malformed {
                    line,
                    message: "non-finite value".into(),
                });
            }
            let q = nalgebra::Quaternion::new(values[7], values[4], values[5], values[6]);
            let norm = q.norm();
            if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
                return Err(TrajectoryError::BadQuaternion { line, norm });
            }
            if let Some(last) = entries.last() {
                if !(values[0] > last.0) {
                    return Err(TrajectoryError::NonIncreasing { line });
                }
            }
            let r_wc = UnitQuaternion::from_quaternion(q);
            let t_wc = Pose::from_quaternion(&r_wc, Vector3::new(values[1], values[2], values[3]));
            entries.push((values[0], t_wc.inverse()));
        }
        Ok(Self { entries })
    }

    pub fn to_tum_string(&self) -> String {
        let mut s = String::new();
        for (t, pose) in &self.entries {
            let c = pose.camera_center();
            let q = pose.inverse().quaternion();
            let _ = writeln!(
                s,
                "{t:.6} {:.10} {:.10} {:.10} {:.10} {:.10} {:.10} {:.10}",
                c.x, c.y, c.z, q.i, q.j, q.k, q.w
            );
        }
        s
    }

    pub fn read_tum(path: &Path) -> Result<Self, TrajectoryError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrajectoryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_tum(&text)
    }

    pub fn write_tum(&self, path: &Path) -> Result<(), TrajectoryError> {
        std::fs::write(path, self.to_tum_string()).map_err(|source| TrajectoryError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Index pairs `(estimate, ground truth)` whose timestamps agree within
/// `tolerance`, sorted by estimate index.
pub fn associate(estimate: &Trajectory, ground_truth: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    associate_timestamps(&estimate.timestamps(), &ground_truth.timestamps(), tolerance)
}

/// Least-squares rigid transform `(R, t)` minimizing `Σ‖R·src + t − dst‖²`.
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    assert_eq!(src.len(), dst.len());
    if src.is_empty() {
        return (Matrix3::identity(), Vector3::zeros());
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - mu_s) * (d - mu_d).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v");
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    (r, mu_d - r * mu_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub pairs: usize,
    /// Maps estimate world coordinates into ground-truth world coordinates.
    pub alignment: Pose,
    /// `(timestamp, position error)` per associated pair after alignment.
    pub errors: Vec<(f64, f64)>,
}

/// Absolute trajectory error after optimal rigid alignment.
pub fn ate(estimate: &Trajectory, ground_truth: &Trajectory, tolerance: f64) -> Result<AteResult, EvalError> {
    let pairs = associate(estimate, ground_truth, tolerance);
    if pairs.len() < 2 {
        return Err(EvalError::NoOverlap {
            pairs: pairs.len(),
            needed: 2,
        });
    }
    let est = estimate.positions();
    let gt = ground_truth.positions();
    let src: Vec<_> = pairs.iter().map(|&(i, _)| est[i]).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| gt[j]).collect();
    let (r, t) = align_rigid(&src, &dst);
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .zip(src.iter().zip(&dst))
        .map(|(&(i, _), (s, d))| (estimate.entries[i].0, (r * s + t - d).norm()))
        .collect();
    let rmse = (errors.iter().map(|e| e.1 * e.1).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(AteResult {
        rmse,
        pairs: pairs.len(),
        alignment: Pose::new(r, t).unwrap_or_default(),
        errors,
    })
}

pub fn ate_rmse(estimate: &Trajectory, ground_truth: &Trajectory, tolerance: f64) -> Result<f64, EvalError> {
    ate(estimate, ground_truth, tolerance).map(|a| a.rmse)
}

/// Rigid transform from the estimate's world into the ground truth's that
/// best overlays whole poses: each camera centre plus the points one meter
/// along its axes. Unlike the position-only alignment of [`ate`], it stays
/// determined on short or straight paths.
pub fn pose_alignment(estimate: &Trajectory, ground_truth: &Trajectory, tolerance: f64) -> Result<Pose, EvalError> {
    let pairs = associate(estimate, ground_truth, tolerance);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap { pairs: 0, needed: 1 });
    }
    let frame_points = |pose: &Pose| {
        let to_world = pose.inverse();
        [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()].map(|p| to_world.transform_point(&p))
    };
    let src: Vec<_> = pairs
        .iter()
        .flat_map(|&(i, _)| frame_points(&estimate.entries[i].1))
        .collect();
    let dst: Vec<_> = pairs
        .iter()
        .flat_map(|&(_, j)| frame_points(&ground_truth.entries[j].1))
        .collect();
    let (r, t) = align_rigid(&src, &dst);
    Ok(Pose::new(r, t).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpeResult {
    /// RMSE of relative translation errors (meters per interval).
    pub trans_rmse: f64,
    /// RMSE of relative rotation errors (degrees per interval).
    pub rot_rmse_deg: f64,
    pub pairs: usize,
    /// `(timestamp, translation error, rotation error in degrees)`.
    pub errors: Vec<(f64, f64, f64)>,
}

/// Relative pose error over a fixed frame interval.
pub fn rpe(
    estimate: &Trajectory,
    ground_truth: &Trajectory,
    interval: usize,
    tolerance: f64,
) -> Result<RpeResult, EvalError> {
    let interval = interval.max(1);
    let pairs = associate(estimate, ground_truth, tolerance);
    if pairs.len() < interval + 1 {
        return Err(EvalError::NoOverlap {
            pairs: pairs.len(),
            needed: interval + 1,
        });
    }
    // Camera -> world poses.
    let p: Vec<Pose> = pairs.iter().map(|&(i, _)| estimate.entries[i].1.inverse()).collect();
    let q: Vec<Pose> = pairs
        .iter()
        .map(|&(_, j)| ground_truth.entries[j].1.inverse())
        .collect();
    let mut errors = Vec::with_capacity(pairs.len() - interval);
    for i in 0..pairs.len() - interval {
        let rel_gt = q[i].inverse().compose(&q[i + interval]);
        let rel_est = p[i].inverse().compose(&p[i + interval]);
        let e = rel_gt.inverse().compose(&rel_est);
        errors.push((
            estimate.entries[pairs[i].0].0,
            e.translation().norm(),
            rotation_angle(e.rotation()).to_degrees(),
        ));
    }
    let n = errors.len() as f64;
    Ok(RpeResult {
        trans_rmse: (errors.iter().map(|e| e.1 * e.1).sum::<f64>() / n).sqrt(),
        rot_rmse_deg: (errors.iter().map(|e| e.2 * e.2).sum::<f64>() / n).sqrt(),
        pairs: errors.len(),
        errors,
    })
}

/// RMSE of nearest-neighbour distances from each predicted point to the
/// ground-truth model.
pub fn reconstruction_rmse(predicted: &[Vector3<f64>], model: &[Vector3<f64>]) -> Result<f64, EvalError> {
    if predicted.is_empty() || model.is_empty() {
        return Err(EvalError::EmptyModel);
    }
    let tree = KdTree::build(model).map_err(|_| EvalError::EmptyModel)?;
    let sum: f64 = predicted
        .iter()
        .map(|p| tree.nearest(p).expect("non-empty tree").1)
        .sum();
    Ok((sum / predicted.len() as f64).sqrt())
}

/// Distance between the first and last camera centres (loop sequences).
pub fn accumulated_drift(trajectory: &Trajectory) -> Option<f64> {
    let first = trajectory.entries.first()?;
    let last = trajectory.entries.last()?;
    Some((first.1.camera_center() - last.1.camera_center()).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ate_rmse: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    pub reconstruction_rmse: Option<f64>,
    pub pairs: usize,
}

impl MetricReport {
    pub fn compute(
        estimate: &Trajectory,
        ground_truth: &Trajectory,
        interval: usize,
        tolerance: f64,
    ) -> Result<Self, EvalError> {
        let a = ate(estimate, ground_truth, tolerance)?;
        let r = rpe(estimate, ground_truth, interval, tolerance)?;
        Ok(Self {
            ate_rmse: a.rmse,
            rpe_trans: r.trans_rmse,
            rpe_rot: r.rot_rmse_deg,
            reconstruction_rmse: None,
            pairs: a.pairs,
        })
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs:        {}", self.pairs);
        let _ = writeln!(s, "ATE RMSE:     {:.6} m", self.ate_rmse);
        let _ = writeln!(s, "RPE trans:    {:.6} m", self.rpe_trans);
        let _ = writeln!(s, "RPE rot:      {:.6} deg", self.rpe_rot);
        if let Some(r) = self.reconstruction_rmse {
            let _ = writeln!(s, "recon RMSE:   {r:.6} m");
        }
        s
    }

    /// `key = value` lines with full precision.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs = {}", self.pairs);
        let _ = writeln!(s, "ate_rmse = {:e}", self.ate_rmse);
        let _ = writeln!(s, "rpe_trans = {:e}", self.rpe_trans);
        let _ = writeln!(s, "rpe_rot = {:e}", self.rpe_rot);
        if let Some(r) = self.reconstruction_rmse {
            let _ = writeln!(s, "reconstruction_rmse = {r:e}");
        }
        s
    }
}
