//! Flat run configuration: every tunable is one snake_case key with a
//! default and an accepted range. The same registry drives the config file
//! parser, the command-line flags and the effective-config dump.

use crate::features::{LineParams, PlaneParams, PointParams};
use crate::io::kv::{format_kv, parse_kv, KvError};
use crate::manhattan::MeanShiftParams;
use crate::mapping::MapParams;
use crate::meshing::MeshParams;
use crate::sensor::LoadOptions;
use crate::tracking::{LmParams, MatchWindows, TrackerParams};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error(transparent)]
    Syntax(#[from] KvError),
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { key: String, line: usize },
    #[error("`{key}`: cannot parse `{value}`")]
    Parse { key: String, value: String },
    #[error("`{key}` = {value} is outside [{min}, {max}]")]
    OutOfRange {
        key: String,
        value: String,
        min: f64,
        max: f64,
    },
    #[error("{0}")]
    Inconsistent(String),
}

/// Metadata of one key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
    pub min: f64,
    pub max: f64,
}

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn as_f64(&self) -> f64;
    fn render(&self) -> String;
}

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn as_f64(&self) -> f64 {
        *self
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

macro_rules! int_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn as_f64(&self) -> f64 {
                *self as f64
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
int_value!(usize, u32, u64);

macro_rules! registry {
    ($($(#[doc = $doc:literal])+ $name:ident: $ty:ty = $default:expr, $min:expr, $max:expr;)*) => {
        /// All run parameters. Angles are in degrees, lengths in meters and
        /// image distances in pixels unless the key says otherwise.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $($(#[doc = $doc])+ pub $name: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        pub const KEYS: &[KeySpec] = &[
            $(KeySpec {
                name: stringify!($name),
                help: concat!($($doc),+),
                min: $min as f64,
                max: $max as f64,
            },)*
        ];

        impl Config {
            /// Sets one key from its textual value, checking the range.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $(stringify!($name) => {
                        let v = <$ty as Value>::parse_value(value).ok_or_else(|| ConfigError::Parse {
                            key: key.into(),
                            value: value.into(),
                        })?;
                        let (min, max) = ($min as f64, $max as f64);
                        if !(min..=max).contains(&v.as_f64()) {
                            return Err(ConfigError::OutOfRange { key: key.into(), value: value.into(), min, max });
                        }
                        self.$name = v;
                        Ok(())
                    })*
                    _ => Err(ConfigError::UnknownKey { key: key.into(), line: 0 }),
                }
            }

            /// Every key with its current value, in registry order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), Value::render(&self.$name)),)*]
            }
        }
    };
}

registry! {
    /// Window size of the depth normal estimator (pixels).
    normals_patch: usize = 10, 3, 64;
    /// FAST intensity threshold.
    fast_threshold: f64 = 20.0, 1, 255;
    /// Maximum number of point features per frame.
    target_points: usize = 400, 1, 100_000;
    /// Grid cell size used to spread point features (pixels).
    grid_cell: usize = 16, 4, 256;
    /// Largest accepted descriptor Hamming distance.
    max_hamming: u32 = 64, 0, 256;
    /// Best-to-second-best descriptor distance ratio.
    match_ratio: f64 = 0.8, 0.01, 1;
    /// Shortest accepted 2D line segment (pixels).
    line_min_length: f64 = 30.0, 2, 10_000;
    /// Minimum gradient magnitude for line support pixels.
    line_gradient_threshold: f64 = 5.2, 0, 1000;
    /// Orientation tolerance of line region growing.
    line_region_angle: f64 = 22.5, 1, 90;
    /// Fraction of samples along a line that need depth.
    line_min_valid_depth: f64 = 0.6, 0, 1;
    /// RANSAC iterations for 3D line fitting.
    line_ransac_iterations: usize = 100, 1, 100_000;
    /// RANSAC inlier distance for 3D line fitting.
    line_inlier_dist: f64 = 0.02, 1e-6, 1;
    /// Normal agreement for plane region growing.
    plane_angle_threshold: f64 = 5.0, 0.1, 90;
    /// Point-to-plane distance for plane region growing and inliers.
    plane_inlier_dist: f64 = 0.02, 1e-6, 1;
    /// Smallest plane segment and landmark support.
    min_plane_inliers: usize = 1000, 3, 10_000_000;
    /// Normal angle gate for plane association.
    association_angle: f64 = 10.0, 0.1, 90;
    /// Offset gate for plane association.
    association_distance: f64 = 0.1, 1e-4, 10;
    /// Angle tolerance for parallel plane relations.
    parallel_tol: f64 = 10.0, 0.1, 45;
    /// Angle tolerance for perpendicular plane relations.
    perpendicular_tol: f64 = 10.0, 0.1, 45;
    /// Mean-shift kernel bandwidth.
    mw_bandwidth: f64 = 10.0, 0.1, 90;
    /// Directions farther than this from an axis do not vote for it.
    mw_cone: f64 = 30.0, 1, 44;
    /// Mean-shift iteration cap.
    mw_max_iterations: usize = 20, 1, 1000;
    /// Mean-shift convergence threshold on the rotation update.
    mw_tolerance: f64 = 0.05, 1e-6, 10;
    /// Frames tried for Manhattan initialization before giving up.
    init_frames: usize = 5, 1, 100_000;
    /// Point reprojection noise (pixels).
    sigma_point: f64 = 1.0, 1e-6, 100;
    /// Line reprojection noise (pixels).
    sigma_line: f64 = 1.0, 1e-6, 100;
    /// Plane normal angle noise (radians).
    sigma_plane_angle: f64 = 0.002, 1e-6, 1;
    /// Plane offset noise (meters).
    sigma_plane_distance: f64 = 0.002, 1e-6, 1;
    /// Plane relation noise (radians).
    sigma_relation: f64 = 0.01, 1e-6, 1;
    /// Huber threshold on whitened point residuals.
    huber_point: f64 = 5.99f64.sqrt(), 1e-3, 100;
    /// Huber threshold on whitened line residuals.
    huber_line: f64 = 5.99f64.sqrt(), 1e-3, 100;
    /// Chi-square inlier bound for points and lines.
    chi2_gate: f64 = 5.99, 1e-3, 1000;
    /// Plane angle Huber threshold and inlier bound (radians).
    plane_gate_angle: f64 = 0.05, 1e-6, 1;
    /// Plane offset Huber threshold and inlier bound (meters).
    plane_gate_distance: f64 = 0.05, 1e-6, 10;
    /// Relation Huber threshold and inlier bound (radians).
    relation_gate: f64 = 0.05, 1e-6, 1;
    /// Initial Levenberg-Marquardt damping.
    lm_initial_lambda: f64 = 1e-4, 1e-12, 1e6;
    /// Levenberg-Marquardt iterations per round.
    lm_max_iterations: usize = 10, 1, 1000;
    /// Solve and re-gate rounds.
    lm_rounds: usize = 2, 1, 10;
    /// Fewer tracking inliers than this marks the frame lost.
    min_inliers: usize = 10, 0, 100_000;
    /// Point search radius while estimating translation (pixels).
    point_window_wide: f64 = 20.0, 0.5, 1000;
    /// Line search radius while estimating translation (pixels).
    line_window_wide: f64 = 10.0, 0.5, 1000;
    /// Point search radius during refinement (pixels).
    point_window_narrow: f64 = 6.0, 0.5, 1000;
    /// Line search radius during refinement (pixels).
    line_window_narrow: f64 = 4.0, 0.5, 1000;
    /// Orientation tolerance for matching projected lines.
    line_match_angle: f64 = 10.0, 0.1, 90;
    /// New keyframe when inliers drop below this fraction of the reference.
    keyframe_inlier_ratio: f64 = 0.6, 0, 1;
    /// New keyframe after this much translation.
    keyframe_translation: f64 = 0.15, 0, 1000;
    /// New keyframe after this much rotation.
    keyframe_rotation: f64 = 10.0, 0, 180;
    /// Voxel edge for plane support clouds.
    voxel_size: f64 = 0.05, 1e-4, 10;
    /// Covisible keyframes in the local map.
    local_keyframes: usize = 10, 0, 10_000;
    /// Keyframes a new point or line gets to be observed again.
    cull_window: u64 = 3, 1, 10_000;
    /// Upper bound of the triangulation neighbour radius.
    mesh_search_radius: f64 = 5.0, 1e-4, 1000;
    /// Triangulation radius as a multiple of the nearest-neighbour distance.
    mesh_multiplier: f64 = 5.0, 0.1, 1000;
    /// Neighbours considered per triangulation fringe point.
    mesh_max_neighbors: usize = 25, 3, 1000;
    /// Smallest triangle angle.
    mesh_min_angle: f64 = 10.0, 0, 59;
    /// Largest triangle angle.
    mesh_max_angle: f64 = 120.0, 61, 180;
    /// Largest rgb/depth timestamp gap when pairing images (seconds).
    association_tolerance: f64 = 0.02, 0, 10;
    /// Raw depth units per meter; 0 keeps the dataset value.
    depth_scale: f64 = 0.0, 0, 1e6;
    /// Frames decoded ahead of the tracker.
    prefetch: usize = 4, 1, 1024;
    /// Seed of every randomized step.
    seed: u64 = 42, 0, u64::MAX;
}

impl Config {
    /// Parses a `key = value` file on top of the defaults. Unknown and
    /// repeated keys are errors.
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        config.apply_kv_str(text)?;
        Ok(config)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for entry in parse_kv(text)? {
            if !seen.insert(entry.key.clone()) {
                return Err(ConfigError::Duplicate {
                    key: entry.key,
                    line: entry.line,
                });
            }
            self.set(&entry.key, &entry.value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: entry.line },
                other => other,
            })?;
        }
        self.validate()
    }

    /// Cross-key constraints that a single range cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mesh_min_angle >= self.mesh_max_angle {
            return Err(ConfigError::Inconsistent(
                "mesh_min_angle must be below mesh_max_angle".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        format_kv(self.entries())
    }

    pub fn point_params(&self) -> PointParams {
        PointParams {
            target_count: self.target_points,
            fast_threshold: self.fast_threshold as f32,
            grid_cell: self.grid_cell,
        }
    }

    pub fn line_params(&self) -> LineParams {
        LineParams {
            min_length: self.line_min_length,
            gradient_threshold: self.line_gradient_threshold as f32,
            angle_tolerance_deg: self.line_region_angle,
            min_valid_depth: self.line_min_valid_depth,
            ransac_iterations: self.line_ransac_iterations,
            inlier_threshold: self.line_inlier_dist,
            seed: self.seed,
        }
    }

    pub fn plane_params(&self) -> PlaneParams {
        PlaneParams {
            angle_threshold_deg: self.plane_angle_threshold,
            distance_threshold: self.plane_inlier_dist,
            min_inliers: self.min_plane_inliers,
        }
    }

    pub fn mean_shift_params(&self) -> MeanShiftParams {
        MeanShiftParams {
            bandwidth: self.mw_bandwidth.to_radians(),
            cone: self.mw_cone.to_radians(),
            max_iterations: self.mw_max_iterations,
            tolerance: self.mw_tolerance.to_radians(),
        }
    }

    pub fn tracker_params(&self) -> TrackerParams {
        TrackerParams {
            sigma_point: self.sigma_point,
            sigma_line: self.sigma_line,
            sigma_plane_angle: self.sigma_plane_angle,
            sigma_plane_distance: self.sigma_plane_distance,
            sigma_relation: self.sigma_relation,
            huber_point: self.huber_point,
            huber_line: self.huber_line,
            chi2_gate: self.chi2_gate,
            plane_gate_angle: self.plane_gate_angle,
            plane_gate_distance: self.plane_gate_distance,
            relation_gate: self.relation_gate,
            lm: LmParams {
                initial_lambda: self.lm_initial_lambda,
                max_iterations: self.lm_max_iterations,
                rounds: self.lm_rounds,
                ..LmParams::default()
            },
            min_inliers: self.min_inliers,
            max_hamming: self.max_hamming,
            match_ratio: self.match_ratio,
            line_angle_tolerance: self.line_match_angle,
            association_angle: self.association_angle,
            association_distance: self.association_distance,
        }
    }

    pub fn map_params(&self) -> MapParams {
        MapParams {
            voxel_size: self.voxel_size,
            plane_inlier_dist: self.plane_inlier_dist,
            min_plane_inliers: self.min_plane_inliers,
            cull_window: self.cull_window,
            local_keyframes: self.local_keyframes,
            parallel_tol_deg: self.parallel_tol,
            perpendicular_tol_deg: self.perpendicular_tol,
            keyframe_inlier_ratio: self.keyframe_inlier_ratio,
            keyframe_translation: self.keyframe_translation,
            keyframe_rotation_deg: self.keyframe_rotation,
        }
    }

    pub fn mesh_params(&self) -> MeshParams {
        MeshParams {
            search_radius: self.mesh_search_radius,
            multiplier: self.mesh_multiplier,
            max_neighbors: self.mesh_max_neighbors,
            min_angle_deg: self.mesh_min_angle,
            max_angle_deg: self.mesh_max_angle,
        }
    }

    pub fn wide_windows(&self) -> MatchWindows {
        MatchWindows {
            point_radius: self.point_window_wide,
            line_radius: self.line_window_wide,
        }
    }

    pub fn narrow_windows(&self) -> MatchWindows {
        MatchWindows {
            point_radius: self.point_window_narrow,
            line_radius: self.line_window_narrow,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            tolerance: self.association_tolerance,
            intrinsics: None,
            depth_scale: (self.depth_scale > 0.0).then_some(self.depth_scale),
        }
    }
}
