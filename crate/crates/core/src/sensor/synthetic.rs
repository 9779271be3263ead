//! Ray-cast rendering of textured box rooms with exact ground truth.
//!
//! World coordinates are z-up. A room of size `(sx, sy, sz)` spans
//! `x ∈ [-sx/2, sx/2]`, `y ∈ [-sy/2, sy/2]`, `z ∈ [0, sz]`; its six faces are
//! planes 0..6 in the order floor, ceiling, x-, x+, y-, y+. Extra `plane`
//! entries follow. Each textured plane is tiled with squares carrying a
//! smaller inset square; the inset corners are the ground-truth point
//! correspondences.

use super::{DepthMap, RgbdFrame};
use crate::evaluation::Trajectory;
use crate::geometry::{CameraIntrinsics, GeometryError, PlaneHessian, Pose};
use crate::io::kv::{format_kv, parse_kv, KvError};
use crate::io::ply::LabeledCloud;
use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Spec(#[from] KvError),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("camera of frame {frame} is outside the room")]
    OutsideRoom { frame: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Orbit,
    Static,
    Waypoints,
}

/// Scene description, readable from and writable to `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
    pub room: Option<Vector3<f64>>,
    /// Unbounded planes `n·X + d = 0` in world coordinates.
    pub planes: Vec<PlaneHessian>,
    /// `(center, radius)`.
    pub spheres: Vec<(Vector3<f64>, f64)>,
    pub textured: bool,
    /// Plane indices rendered without texture.
    pub untextured: Vec<usize>,
    pub tile_size: f64,
    pub supersample: usize,
    pub trajectory: TrajectoryKind,
    pub frames: usize,
    pub frame_rate: f64,
    pub orbit_center: Vector2<f64>,
    pub orbit_radius: f64,
    pub camera_height: f64,
    /// Degrees.
    pub orbit_sweep: f64,
    pub orbit_start: f64,
    pub yaw_offset: f64,
    pub pitch: f64,
    pub position: Vector3<f64>,
    pub yaw: f64,
    /// `(x, y, z, yaw°, pitch°)` visited at evenly spaced frames.
    pub waypoints: Vec<[f64; 5]>,
    /// Depth noise standard deviation `σ0 + σ2 z²` (meters).
    pub depth_noise: f64,
    pub depth_noise_quadratic: f64,
    /// Standard deviation of the per-pixel image sampling jitter (pixels).
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            fx: 250.0,
            fy: 250.0,
            cx: 159.5,
            cy: 119.5,
            depth_scale: 5000.0,
            room: Some(Vector3::new(4.0, 4.0, 3.0)),
            planes: Vec::new(),
            spheres: Vec::new(),
            textured: true,
            untextured: Vec::new(),
            tile_size: 0.2,
            supersample: 3,
            trajectory: TrajectoryKind::Orbit,
            frames: 60,
            frame_rate: 30.0,
            orbit_center: Vector2::zeros(),
            orbit_radius: 0.5,
            camera_height: 1.4,
            orbit_sweep: 90.0,
            orbit_start: 0.0,
            yaw_offset: 0.0,
            pitch: -20.0,
            position: Vector3::new(0.0, 0.0, 1.4),
            yaw: 0.0,
            waypoints: Vec::new(),
            depth_noise: 0.0,
            depth_noise_quadratic: 0.0,
            pixel_noise: 0.0,
            seed: 42,
        }
    }
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let mut s = Self::default();
        let mut planes = Vec::new();
        let mut spheres = Vec::new();
        let mut waypoints = Vec::new();
        let mut untextured = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for e in parse_kv(text)? {
            let repeatable = matches!(e.key.as_str(), "plane" | "sphere" | "waypoint" | "untextured");
            if !repeatable && !seen.insert(e.key.clone()) {
                return Err(KvError::Duplicate {
                    line: e.line,
                    key: e.key.clone(),
                }
                .into());
            }
            let v3 = |e: &crate::io::kv::KvEntry| e.parse_floats(3).map(|v| Vector3::new(v[0], v[1], v[2]));
            match e.key.as_str() {
                "width" => s.width = e.parse()?,
                "height" => s.height = e.parse()?,
                "fx" => s.fx = e.parse()?,
                "fy" => s.fy = e.parse()?,
                "cx" => s.cx = e.parse()?,
                "cy" => s.cy = e.parse()?,
                "depth_scale" => s.depth_scale = e.parse()?,
                "room" => {
                    s.room = if e.value == "none" { None } else { Some(v3(&e)?) };
                }
                "plane" => {
                    let v = e.parse_floats(4)?;
                    let p = PlaneHessian::new(Vector3::new(v[0], v[1], v[2]), v[3])
                        .map_err(|err| e.invalid(err.to_string()))?;
                    planes.push(p);
                }
                "sphere" => {
                    let v = e.parse_floats(4)?;
                    if v[3] <= 0.0 {
                        return Err(e.invalid("radius must be positive").into());
                    }
                    spheres.push((Vector3::new(v[0], v[1], v[2]), v[3]));
                }
                "textured" => s.textured = e.parse_bool()?,
                "untextured" => untextured.push(e.parse()?),
                "tile_size" => s.tile_size = e.parse()?,
                "supersample" => s.supersample = e.parse()?,
                "trajectory" => {
                    s.trajectory = match e.value.as_str() {
                        "orbit" => TrajectoryKind::Orbit,
                        "static" => TrajectoryKind::Static,
                        "waypoints" => TrajectoryKind::Waypoints,
                        other => return Err(e.invalid(format!("unknown trajectory `{other}`")).into()),
                    }
                }
                "frames" => s.frames = e.parse()?,
                "frame_rate" => s.frame_rate = e.parse()?,
                "orbit_center" => {
                    let v = e.parse_floats(2)?;
                    s.orbit_center = Vector2::new(v[0], v[1]);
                }
                "orbit_radius" => s.orbit_radius = e.parse()?,
                "camera_height" => s.camera_height = e.parse()?,
                "orbit_sweep" => s.orbit_sweep = e.parse()?,
                "orbit_start" => s.orbit_start = e.parse()?,
                "yaw_offset" => s.yaw_offset = e.parse()?,
                "pitch" => s.pitch = e.parse()?,
                "position" => s.position = v3(&e)?,
                "yaw" => s.yaw = e.parse()?,
                "waypoint" => {
                    let v = e.parse_floats(5)?;
                    waypoints.push([v[0], v[1], v[2], v[3], v[4]]);
                }
                "depth_noise" => s.depth_noise = e.parse()?,
                "depth_noise_quadratic" => s.depth_noise_quadratic = e.parse()?,
                "pixel_noise" => s.pixel_noise = e.parse()?,
                "seed" => s.seed = e.parse()?,
                _ => {
                    return Err(KvError::UnknownKey {
                        line: e.line,
                        key: e.key.clone(),
                    }
                    .into())
                }
            }
        }
        s.planes = planes;
        s.spheres = spheres;
        s.waypoints = waypoints;
        s.untextured = untextured;
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv_string(&self) -> String {
        let v3 = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        let mut e: Vec<(&str, String)> = vec![
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("fx", self.fx.to_string()),
            ("fy", self.fy.to_string()),
            ("cx", self.cx.to_string()),
            ("cy", self.cy.to_string()),
            ("depth_scale", self.depth_scale.to_string()),
            ("room", self.room.as_ref().map_or("none".into(), v3)),
        ];
        for p in &self.planes {
            e.push(("plane", format!("{} {} {} {}", p.normal.x, p.normal.y, p.normal.z, p.d)));
        }
        for (c, r) in &self.spheres {
            e.push(("sphere", format!("{} {r}", v3(c))));
        }
        e.push(("textured", self.textured.to_string()));
        for i in &self.untextured {
            e.push(("untextured", i.to_string()));
        }
        let kind = match self.trajectory {
            TrajectoryKind::Orbit => "orbit",
            TrajectoryKind::Static => "static",
            TrajectoryKind::Waypoints => "waypoints",
        };
        e.extend([
            ("tile_size", self.tile_size.to_string()),
            ("supersample", self.supersample.to_string()),
            ("trajectory", kind.to_string()),
            ("frames", self.frames.to_string()),
            ("frame_rate", self.frame_rate.to_string()),
            (
                "orbit_center",
                format!("{} {}", self.orbit_center.x, self.orbit_center.y),
            ),
            ("orbit_radius", self.orbit_radius.to_string()),
            ("camera_height", self.camera_height.to_string()),
            ("orbit_sweep", self.orbit_sweep.to_string()),
            ("orbit_start", self.orbit_start.to_string()),
            ("yaw_offset", self.yaw_offset.to_string()),
            ("pitch", self.pitch.to_string()),
            ("position", v3(&self.position)),
            ("yaw", self.yaw.to_string()),
        ]);
        for w in &self.waypoints {
            e.push(("waypoint", format!("{} {} {} {} {}", w[0], w[1], w[2], w[3], w[4])));
        }
        e.extend([
            ("depth_noise", self.depth_noise.to_string()),
            ("depth_noise_quadratic", self.depth_noise_quadratic.to_string()),
            ("pixel_noise", self.pixel_noise.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        format_kv(e)
    }

    fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Invalid(m.to_string()));
        if self.width < 8 || self.height < 8 {
            return bad("image must be at least 8x8");
        }
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive");
        }
        if !(self.tile_size > 0.0) {
            return bad("tile_size must be positive");
        }
        if self.supersample == 0 || self.supersample > 8 {
            return bad("supersample must be in 1..=8");
        }
        if self.depth_noise < 0.0 || self.depth_noise_quadratic < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if let Some(r) = self.room {
            if r.iter().any(|&v| !(v > 0.0)) {
                return bad("room dimensions must be positive");
            }
        }
        if self.trajectory == TrajectoryKind::Waypoints && self.waypoints.is_empty() {
            return bad("waypoint trajectory needs at least one waypoint");
        }
        CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.depth_scale,
            self.width,
            self.height,
        )?;
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            depth_scale: self.depth_scale,
            width: self.width,
            height: self.height,
        }
    }

    /// Ground-truth pose (world -> camera) of frame `i`.
    pub fn camera_pose(&self, i: usize) -> Pose {
        let s = if self.frames > 1 {
            i as f64 / (self.frames - 1) as f64
        } else {
            0.0
        };
        let (center, yaw, pitch) = match self.trajectory {
            TrajectoryKind::Orbit => {
                let a = (self.orbit_start + self.orbit_sweep * s).to_radians();
                let c = Vector3::new(
                    self.orbit_center.x + self.orbit_radius * a.cos(),
                    self.orbit_center.y + self.orbit_radius * a.sin(),
                    self.camera_height,
                );
                (c, a + self.yaw_offset.to_radians(), self.pitch.to_radians())
            }
            TrajectoryKind::Static => (self.position, self.yaw.to_radians(), self.pitch.to_radians()),
            TrajectoryKind::Waypoints => {
                let n = self.waypoints.len();
                let f = s * (n - 1) as f64;
                let k = (f.floor() as usize).min(n.saturating_sub(2));
                let w0 = self.waypoints[k];
                let w1 = self.waypoints[(k + 1).min(n - 1)];
                let a = if n > 1 { f - k as f64 } else { 0.0 };
                let lerp = |j: usize| w0[j] + (w1[j] - w0[j]) * a;
                (
                    Vector3::new(lerp(0), lerp(1), lerp(2)),
                    lerp(3).to_radians(),
                    lerp(4).to_radians(),
                )
            }
        };
        Pose::from_camera_center(look_rotation(yaw, pitch), center).expect("look rotation is orthonormal")
    }
}

/// Camera-to-world rotation with columns right, down, forward for a camera
/// with the given heading (about +z) and elevation.
pub fn look_rotation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let forward = Vector3::new(cp * cy, cp * sy, sp);
    let right = Vector3::new(sy, -cy, 0.0);
    let down = forward.cross(&right);
    Matrix3::from_columns(&[right, down, forward])
}

/// A rendered plane: bounded rectangles have finite extents along `u`/`v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlane {
    pub plane: PlaneHessian,
    pub origin: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub extent: Option<(f64, f64)>,
    pub textured: bool,
    tint: [f64; 3],
}

impl ScenePlane {
    fn new(
        plane: PlaneHessian,
        origin: Vector3<f64>,
        u_axis: Vector3<f64>,
        extent: Option<(f64, f64)>,
        id: usize,
    ) -> Self {
        let v_axis = plane.normal.cross(&u_axis);
        let h = |k: u64| 0.8 + 0.2 * unit_hash(&[0x7154, id as u64, k]);
        Self {
            plane,
            origin,
            u_axis,
            v_axis,
            extent,
            textured: true,
            tint: [h(0), h(1), h(2)],
        }
    }

    fn local(&self, p: &Vector3<f64>) -> (f64, f64) {
        let r = p - self.origin;
        (r.dot(&self.u_axis), r.dot(&self.v_axis))
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self.extent {
            None => true,
            Some((lu, lv)) => {
                let (a, b) = self.local(p);
                let eps = 1e-9;
                a >= -eps && a <= lu + eps && b >= -eps && b <= lv + eps
            }
        }
    }
}

/// Which surface a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Plane(usize),
    Sphere(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub surface: Surface,
}

/// Per-frame ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameTruth {
    /// Plane index hit by each pixel centre, `-1` for spheres or empty space.
    pub labels: Vec<i32>,
    /// `(plane index, pixel count)` for every plane seen by at least one pixel.
    pub visible_planes: Vec<(usize, usize)>,
    /// `(corner index, exact pixel)` for unoccluded texture corners.
    pub corners: Vec<(usize, Vector2<f64>)>,
    /// `(room edge index, start pixel, end pixel)` for visible room edges.
    pub edges: Vec<(usize, Vector2<f64>, Vector2<f64>)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub planes: Vec<ScenePlane>,
    pub spheres: Vec<(Vector3<f64>, f64)>,
    /// World positions of texture corners.
    pub corners: Vec<Vector3<f64>>,
    /// Room edges (intersections of adjacent faces) as world segments.
    pub edges: Vec<(Vector3<f64>, Vector3<f64>)>,
    pub poses: Vec<Pose>,
    pub timestamps: Vec<f64>,
    pub frames: Vec<RgbdFrame>,
    pub truth: Vec<FrameTruth>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn unit_hash(keys: &[u64]) -> f64 {
    let h = keys.iter().fold(0x1234_5678_u64, |acc, &k| splitmix(acc ^ k));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Tile appearance: background level, inset level, inset offset and size
/// (fractions of the tile edge).
fn tile_layout(plane: usize, i: i64, j: i64) -> (f64, f64, f64, f64, f64) {
    let h = |k: u64| unit_hash(&[plane as u64, i as u64, j as u64, k]);
    let bg = 40.0 + 175.0 * h(1);
    let delta = 60.0 + 40.0 * h(2);
    let inner = if bg + delta <= 235.0 && (bg - delta < 20.0 || h(3) < 0.5) {
        bg + delta
    } else {
        bg - delta
    };
    let size = 0.35 + 0.25 * h(4);
    let slack = 1.0 - size - 0.2;
    (bg, inner, 0.1 + slack * h(5), 0.1 + slack * h(6), size)
}

fn room_planes(size: &Vector3<f64>) -> Vec<ScenePlane> {
    let (hx, hy, sz) = (size.x / 2.0, size.y / 2.0, size.z);
    let p = |n: Vector3<f64>, d: f64| PlaneHessian { normal: n, d };
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    vec![
        ScenePlane::new(p(z, 0.0), Vector3::new(-hx, -hy, 0.0), x, Some((size.x, size.y)), 0),
        ScenePlane::new(p(-z, sz), Vector3::new(-hx, -hy, sz), y, Some((size.y, size.x)), 1),
        ScenePlane::new(p(x, hx), Vector3::new(-hx, -hy, 0.0), y, Some((size.y, size.z)), 2),
        ScenePlane::new(p(-x, hx), Vector3::new(hx, -hy, 0.0), z, Some((size.z, size.y)), 3),
        ScenePlane::new(p(y, hy), Vector3::new(-hx, -hy, 0.0), z, Some((size.z, size.x)), 4),
        ScenePlane::new(p(-y, hy), Vector3::new(-hx, hy, 0.0), x, Some((size.x, size.z)), 5),
    ]
}

fn room_edges(size: &Vector3<f64>) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let (hx, hy, sz) = (size.x / 2.0, size.y / 2.0, size.z);
    let c = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    let mut out = Vec::new();
    for z in [0.0, sz] {
        out.push((c(-hx, -hy, z), c(hx, -hy, z)));
        out.push((c(hx, -hy, z), c(hx, hy, z)));
        out.push((c(hx, hy, z), c(-hx, hy, z)));
        out.push((c(-hx, hy, z), c(-hx, -hy, z)));
    }
    for (x, y) in [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)] {
        out.push((c(x, y, 0.0), c(x, y, sz)));
    }
    out
}

impl SyntheticScene {
    /// Nearest intersection with `t > 1e-9` along `origin + t·dir`.
    pub fn ray_cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, surface: Surface| {
            if t > 1e-9 && best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, surface });
            }
        };
        for (i, p) in self.planes.iter().enumerate() {
            let denom = p.plane.normal.dot(dir);
            if denom.abs() < 1e-15 {
                continue;
            }
            let t = -(p.plane.signed_distance(origin)) / denom;
            if t > 1e-9 && p.contains(&(origin + dir * t)) {
                consider(t, Surface::Plane(i));
            }
        }
        for (i, (c, r)) in self.spheres.iter().enumerate() {
            let oc = origin - c;
            let a = dir.norm_squared();
            let b = oc.dot(dir);
            let cc = oc.norm_squared() - r * r;
            let disc = b * b - a * cc;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                if t > 1e-9 {
                    consider(t, Surface::Sphere(i));
                    break;
                }
            }
        }
        best
    }

    fn shade(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
        let Some(hit) = self.ray_cast(origin, dir) else {
            return [0.0; 3];
        };
        let p = origin + dir * hit.t;
        match hit.surface {
            Surface::Plane(id) => {
                let plane = &self.planes[id];
                let level = if plane.textured {
                    let (a, b) = plane.local(&p);
                    let ts = self.spec.tile_size;
                    let (i, j) = ((a / ts).floor(), (b / ts).floor());
                    let (fa, fb) = (a / ts - i, b / ts - j);
                    let (bg, inner, ou, ov, size) = tile_layout(id, i as i64, j as i64);
                    if fa >= ou && fa < ou + size && fb >= ov && fb < ov + size {
                        inner
                    } else {
                        bg
                    }
                } else {
                    150.0
                };
                [level * plane.tint[0], level * plane.tint[1], level * plane.tint[2]]
            }
            Surface::Sphere(id) => {
                let n = (p - self.spheres[id].0).normalize();
                let level = 60.0 + 150.0 * n.dot(&dir.normalize()).abs();
                [level, level, level]
            }
        }
    }

    /// Renders one view; `rng` drives the noise (unused when noise is off).
    pub fn render(&self, pose: &Pose, timestamp: f64, rng: &mut ChaCha8Rng) -> (RgbdFrame, Vec<i32>) {
        let k = self.intrinsics;
        let (w, h) = (k.width, k.height);
        let r_wc = pose.rotation().transpose();
        let origin = pose.camera_center();
        let ss = self.spec.supersample;
        let jitter = Normal::new(0.0, self.spec.pixel_noise.max(1e-300)).expect("finite sigma");
        let unit = Normal::new(0.0, 1.0).expect("finite sigma");
        let mut rgb = RgbImage::new(w as u32, h as u32);
        let mut depth = DepthMap::new(w, h);
        let mut labels = vec![-1; w * h];
        for y in 0..h {
            for x in 0..w {
                let (ju, jv) = if self.spec.pixel_noise > 0.0 {
                    (jitter.sample(rng), jitter.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5 + ju;
                        let v = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5 + jv;
                        let c = self.shade(&origin, &(r_wc * k.ray(u, v)));
                        for (a, c) in acc.iter_mut().zip(c) {
                            *a += c;
                        }
                    }
                }
                let n = (ss * ss) as f64;
                let px = acc.map(|a| (a / n).round().clamp(0.0, 255.0) as u8);
                rgb.put_pixel(x as u32, y as u32, Rgb(px));

                let ray = k.ray(x as f64, y as f64);
                if let Some(hit) = self.ray_cast(&origin, &(r_wc * ray)) {
                    // The camera-frame ray has unit z, so `t` is the depth.
                    let mut z = hit.t;
                    let sigma = self.spec.depth_noise + self.spec.depth_noise_quadratic * z * z;
                    if sigma > 0.0 {
                        z += sigma * unit.sample(rng);
                    }
                    depth.set(x, y, z as f32);
                    if let Surface::Plane(id) = hit.surface {
                        labels[y * w + x] = id as i32;
                    }
                }
            }
        }
        let frame = RgbdFrame::new(timestamp, rgb, depth, k).expect("rendered sizes match intrinsics");
        (frame, labels)
    }

    fn frame_truth(&self, pose: &Pose, labels: Vec<i32>) -> FrameTruth {
        let k = &self.intrinsics;
        let origin = pose.camera_center();
        let mut counts = vec![0usize; self.planes.len()];
        for &l in &labels {
            if l >= 0 {
                counts[l as usize] += 1;
            }
        }
        let visible_planes = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i, c))
            .collect();
        let unoccluded = |p: &Vector3<f64>| {
            let dir = p - origin;
            self.ray_cast(&origin, &dir)
                .is_some_and(|hit| (hit.t - 1.0).abs() < 1e-7)
        };
        let mut corners = Vec::new();
        for (i, c) in self.corners.iter().enumerate() {
            let pc = pose.transform_point(c);
            if let Ok(px) = k.project(&pc) {
                if k.contains(&px, 0.0) && unoccluded(c) {
                    corners.push((i, px));
                }
            }
        }
        let mut edges = Vec::new();
        for (i, (a, b)) in self.edges.iter().enumerate() {
            let mut first = None;
            let mut last = None;
            for s in 0..=200 {
                let p = a + (b - a) * (s as f64 / 200.0);
                let pc = pose.transform_point(&p);
                if let Ok(px) = k.project(&pc) {
                    if k.contains(&px, 0.0) && unoccluded(&p) {
                        first.get_or_insert(px);
                        last = Some(px);
                    }
                }
            }
            if let (Some(f), Some(l)) = (first, last) {
                if (f - l).norm() > 1.0 {
                    edges.push((i, f, l));
                }
            }
        }
        FrameTruth {
            labels,
            visible_planes,
            corners,
            edges,
        }
    }

    /// Points on every bounded scene plane on a `step` grid; the reference
    /// model for reconstruction error.
    pub fn model_points(&self, step: f64) -> Vec<Vector3<f64>> {
        self.model_cloud(step).points
    }

    /// [`SyntheticScene::model_points`] labeled with the plane index.
    pub fn model_cloud(&self, step: f64) -> LabeledCloud {
        let mut out = LabeledCloud::default();
        for (id, p) in self.planes.iter().enumerate() {
            let Some((lu, lv)) = p.extent else { continue };
            let (nu, nv) = ((lu / step).floor() as usize, (lv / step).floor() as usize);
            for i in 0..=nu {
                for j in 0..=nv {
                    out.push(
                        p.origin + p.u_axis * (i as f64 * step) + p.v_axis * (j as f64 * step),
                        id as u64,
                    );
                }
            }
        }
        out
    }

    /// Ground-truth trajectory with the frame timestamps.
    pub fn ground_truth(&self) -> Trajectory {
        Trajectory::new(
            self.timestamps
                .iter()
                .copied()
                .zip(self.poses.iter().copied())
                .collect(),
        )
        .expect("timestamps strictly increase")
    }
}

fn texture_corners(planes: &[ScenePlane], tile: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for (id, p) in planes.iter().enumerate() {
        let Some((lu, lv)) = p.extent else { continue };
        if !p.textured {
            continue;
        }
        let (nu, nv) = ((lu / tile).ceil() as i64, (lv / tile).ceil() as i64);
        for i in 0..nu {
            for j in 0..nv {
                let (_, _, ou, ov, size) = tile_layout(id, i, j);
                for (du, dv) in [(0.0, 0.0), (size, 0.0), (size, size), (0.0, size)] {
                    let a = (i as f64 + ou + du) * tile;
                    let b = (j as f64 + ov + dv) * tile;
                    if a < lu - 1e-9 && b < lv - 1e-9 {
                        out.push(p.origin + p.u_axis * a + p.v_axis * b);
                    }
                }
            }
        }
    }
    out
}

/// Builds the scene geometry and renders every frame of the trajectory.
///
/// Frames are rendered in parallel; each frame's noise stream is seeded from
/// `(seed, frame index)`, so output does not depend on the thread count.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let mut planes = spec.room.as_ref().map(room_planes).unwrap_or_default();
    let base = planes.len();
    for (i, p) in spec.planes.iter().enumerate() {
        let u = crate::geometry::any_orthogonal(&p.normal);
        planes.push(ScenePlane::new(*p, -p.normal * p.d, u, None, base + i));
    }
    if planes.len() < 2 {
        return Err(SceneError::DegenerateScene(format!(
            "{} plane(s); at least 2 non-parallel planes are required",
            planes.len()
        )));
    }
    let non_parallel = planes.iter().enumerate().any(|(i, a)| {
        planes[i + 1..]
            .iter()
            .any(|b| a.plane.normal.dot(&b.plane.normal).abs() < 1.0 - 1e-9)
    });
    if !non_parallel {
        return Err(SceneError::DegenerateScene("all planes are parallel".into()));
    }
    for &i in &spec.untextured {
        if i >= planes.len() {
            return Err(SceneError::Invalid(format!("untextured index {i} out of range")));
        }
        planes[i].textured = false;
    }
    if !spec.textured {
        for p in &mut planes {
            p.textured = false;
        }
    }

    let poses: Vec<Pose> = (0..spec.frames).map(|i| spec.camera_pose(i)).collect();
    if let Some(size) = spec.room {
        for (i, pose) in poses.iter().enumerate() {
            let c = pose.camera_center();
            let inside = c.x.abs() < size.x / 2.0 && c.y.abs() < size.y / 2.0 && c.z > 0.0 && c.z < size.z;
            if !inside {
                return Err(SceneError::OutsideRoom { frame: i });
            }
        }
    }
    let timestamps: Vec<f64> = (0..spec.frames).map(|i| i as f64 / spec.frame_rate).collect();

    let mut scene = SyntheticScene {
        spec: spec.clone(),
        intrinsics: spec.intrinsics(),
        corners: texture_corners(&planes, spec.tile_size),
        edges: spec.room.as_ref().map(room_edges).unwrap_or_default(),
        planes,
        spheres: spec.spheres.clone(),
        poses,
        timestamps,
        frames: Vec::new(),
        truth: Vec::new(),
    };
    let rendered: Vec<(RgbdFrame, FrameTruth)> = (0..spec.frames)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ splitmix(i as u64)));
            let (frame, labels) = scene.render(&scene.poses[i], scene.timestamps[i], &mut rng);
            let truth = scene.frame_truth(&scene.poses[i], labels);
            (frame, truth)
        })
        .collect();
    let (frames, truth) = rendered.into_iter().unzip();
    scene.frames = frames;
    scene.truth = truth;
    Ok(scene)
}
