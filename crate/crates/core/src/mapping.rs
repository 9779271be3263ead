//! Keyframe-based sparse map of point, line and plane landmarks.

use crate::features::{
    detect_plane_relations, fit_plane, fit_variance, Descriptor, FrameFeatures, PlaneObservation, PlaneVariance,
    RelationKind,
};
use crate::geometry::{CameraIntrinsics, PlaneHessian, Pose};
use crate::io::ply::LabeledCloud;
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LandmarkId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct KeyframeId(pub u64);

impl std::fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapParams {
    /// Voxel edge for plane support clouds (meters).
    pub voxel_size: f64,
    /// Support points farther than this from the refit plane are pruned.
    pub plane_inlier_dist: f64,
    pub min_plane_inliers: usize,
    /// Keyframe insertions a provisional landmark gets to be re-observed.
    pub cull_window: u64,
    /// Covisible keyframes joining the current one in the local map.
    pub local_keyframes: usize,
    pub parallel_tol_deg: f64,
    pub perpendicular_tol_deg: f64,
    /// New keyframe when tracked inliers fall below this fraction of the
    /// reference keyframe's.
    pub keyframe_inlier_ratio: f64,
    pub keyframe_translation: f64,
    pub keyframe_rotation_deg: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            plane_inlier_dist: 0.02,
            min_plane_inliers: 1000,
            cull_window: 3,
            local_keyframes: 10,
            parallel_tol_deg: 10.0,
            perpendicular_tol_deg: 10.0,
            keyframe_inlier_ratio: 0.6,
            keyframe_translation: 0.15,
            keyframe_rotation_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointLandmark {
    pub position: Vector3<f64>,
    pub descriptor: Descriptor,
    pub observations: BTreeSet<KeyframeId>,
    /// Keyframe counter at creation.
    pub born: u64,
    pub provisional: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineLandmark {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub observations: BTreeSet<KeyframeId>,
    pub born: u64,
    pub provisional: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneLandmark {
    /// World-frame plane in canonical form.
    pub plane: PlaneHessian,
    /// Voxel-compacted world support points.
    pub cloud: Vec<Vector3<f64>>,
    pub observations: BTreeSet<KeyframeId>,
    pub relations: BTreeMap<LandmarkId, RelationKind>,
    /// Fit uncertainty of `plane` over `cloud`.
    pub variance: PlaneVariance,
    /// Inlier count of the most recent observation.
    pub support: usize,
    pub born: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    pub pose: Pose,
    pub landmarks: BTreeSet<LandmarkId>,
    /// Shared landmark count per other keyframe; symmetric and positive.
    pub covisibility: BTreeMap<KeyframeId, usize>,
    /// Tracking inliers when the keyframe was taken.
    pub tracked_inliers: usize,
}

/// Landmarks of the current neighbourhood, copied out of the map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalMap {
    pub keyframes: Vec<KeyframeId>,
    pub points: Vec<(LandmarkId, Vector3<f64>, Descriptor)>,
    pub lines: Vec<(LandmarkId, Vector3<f64>, Vector3<f64>)>,
    pub planes: Vec<(LandmarkId, PlaneHessian, PlaneVariance)>,
    /// Each related pair once, lower id first.
    pub relations: Vec<(LandmarkId, LandmarkId, RelationKind)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InsertReport {
    pub keyframe: KeyframeId,
    pub new_landmarks: Vec<LandmarkId>,
}

/// Keeps the first point of every voxel and drops points within half a
/// voxel edge of one already kept.
pub fn voxel_filter(points: &[Vector3<f64>], edge: f64) -> Vec<Vector3<f64>> {
    let key = |p: &Vector3<f64>| {
        [
            (p.x / edge).floor() as i64,
            (p.y / edge).floor() as i64,
            (p.z / edge).floor() as i64,
        ]
    };
    let min_dist2 = (0.5 * edge) * (0.5 * edge);
    let mut grid: HashMap<[i64; 3], usize> = HashMap::with_capacity(points.len());
    let mut kept = Vec::new();
    'points: for p in points {
        let k = key(p);
        if grid.contains_key(&k) {
            continue;
        }
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(&i) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        let q: &Vector3<f64> = &kept[i];
                        if (q - p).norm_squared() < min_dist2 {
                            continue 'points;
                        }
                    }
                }
            }
        }
        grid.insert(k, kept.len());
        kept.push(*p);
    }
    kept
}

/// Folds a camera-frame observation into a plane landmark: the points go to
/// the world frame, the cloud is voxel-compacted, the plane refit, and
/// points that end up off the refit plane are pruned.
pub fn merge_plane(landmark: &mut PlaneLandmark, observation: &PlaneObservation, pose: &Pose, params: &MapParams) {
    let to_world = pose.inverse();
    let mut cloud = std::mem::take(&mut landmark.cloud);
    cloud.extend(observation.inlier_points.iter().map(|p| to_world.transform_point(p)));
    let mut cloud = voxel_filter(&cloud, params.voxel_size);
    if let Some(refit) = fit_plane(&cloud, &landmark.plane.normal) {
        landmark.plane = refit.canonical();
        cloud.retain(|p| landmark.plane.signed_distance(p).abs() <= params.plane_inlier_dist);
        if let Some(v) = fit_variance(&cloud, &landmark.plane) {
            landmark.variance = v;
        }
    }
    landmark.cloud = cloud;
    landmark.support = observation.inlier_points.len();
}

#[derive(Debug, Clone, Default)]
pub struct SparseMap {
    params: MapParams,
    keyframes: BTreeMap<KeyframeId, Keyframe>,
    points: BTreeMap<LandmarkId, PointLandmark>,
    lines: BTreeMap<LandmarkId, LineLandmark>,
    planes: BTreeMap<LandmarkId, PlaneLandmark>,
    next_landmark: u64,
    next_keyframe: u64,
}

impl SparseMap {
    pub fn new(params: MapParams) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    pub fn params(&self) -> &MapParams {
        &self.params
    }

    pub fn keyframes(&self) -> impl Iterator<Item = (&KeyframeId, &Keyframe)> {
        self.keyframes.iter()
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.get(&id)
    }

    pub fn points(&self) -> impl Iterator<Item = (&LandmarkId, &PointLandmark)> {
        self.points.iter()
    }

    pub fn lines(&self) -> impl Iterator<Item = (&LandmarkId, &LineLandmark)> {
        self.lines.iter()
    }

    pub fn planes(&self) -> impl Iterator<Item = (&LandmarkId, &PlaneLandmark)> {
        self.planes.iter()
    }

    pub fn plane(&self, id: LandmarkId) -> Option<&PlaneLandmark> {
        self.planes.get(&id)
    }

    pub fn landmark_count(&self) -> usize {
        self.points.len() + self.lines.len() + self.planes.len()
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    fn fresh_id(&mut self) -> LandmarkId {
        let id = LandmarkId(self.next_landmark);
        self.next_landmark += 1;
        id
    }

    fn contains(&self, id: LandmarkId) -> bool {
        self.points.contains_key(&id) || self.lines.contains_key(&id) || self.planes.contains_key(&id)
    }

    /// Adds a keyframe. Features carrying a landmark id add an observation to
    /// that landmark (planes are merged); the others create new landmarks,
    /// provisional for points and lines. Points need depth and lines a 3D
    /// fit to become landmarks.
    pub fn insert_keyframe(
        &mut self,
        timestamp: f64,
        pose: &Pose,
        features: &FrameFeatures,
        intrinsics: &CameraIntrinsics,
        tracked_inliers: usize,
    ) -> InsertReport {
        let kf = KeyframeId(self.next_keyframe);
        self.next_keyframe += 1;
        let born = kf.0;
        let to_world = pose.inverse();
        let live = |id: Option<LandmarkId>, map: &Self| id.filter(|id| map.contains(*id));
        let mut landmarks = BTreeSet::new();
        let mut new_landmarks = Vec::new();

        for f in &features.points {
            if let Some(id) = live(f.landmark_id, self) {
                if let Some(p) = self.points.get_mut(&id) {
                    p.observations.insert(kf);
                    landmarks.insert(id);
                }
                continue;
            }
            let Some(depth) = f.depth else { continue };
            let id = self.fresh_id();
            let camera_point = intrinsics.back_project_metric(f.pixel.x, f.pixel.y, depth);
            self.points.insert(
                id,
                PointLandmark {
                    position: to_world.transform_point(&camera_point),
                    descriptor: f.descriptor,
                    observations: BTreeSet::from([kf]),
                    born,
                    provisional: true,
                },
            );
            landmarks.insert(id);
            new_landmarks.push(id);
        }

        for l in &features.lines {
            if let Some(id) = live(l.landmark_id, self) {
                if let Some(line) = self.lines.get_mut(&id) {
                    line.observations.insert(kf);
                    landmarks.insert(id);
                }
                continue;
            }
            let Some((a, b)) = l.endpoints_3d else { continue };
            let id = self.fresh_id();
            self.lines.insert(
                id,
                LineLandmark {
                    start: to_world.transform_point(&a),
                    end: to_world.transform_point(&b),
                    observations: BTreeSet::from([kf]),
                    born,
                    provisional: true,
                },
            );
            landmarks.insert(id);
            new_landmarks.push(id);
        }

        for obs in &features.planes {
            if let Some(id) = live(obs.landmark_id, self) {
                if let Some(plane) = self.planes.get_mut(&id) {
                    merge_plane(plane, obs, pose, &self.params);
                    plane.observations.insert(kf);
                    landmarks.insert(id);
                }
                continue;
            }
            let id = self.fresh_id();
            let mut landmark = PlaneLandmark {
                plane: crate::geometry::transform_plane(&obs.plane, &to_world).canonical(),
                cloud: Vec::new(),
                observations: BTreeSet::from([kf]),
                relations: BTreeMap::new(),
                variance: PlaneVariance::default(),
                support: 0,
                born,
            };
            merge_plane(&mut landmark, obs, pose, &self.params);
            self.planes.insert(id, landmark);
            landmarks.insert(id);
            new_landmarks.push(id);
        }

        self.keyframes.insert(
            kf,
            Keyframe {
                id: kf,
                timestamp,
                pose: *pose,
                landmarks,
                covisibility: BTreeMap::new(),
                tracked_inliers,
            },
        );
        self.promote();
        self.rebuild_covisibility();
        self.refresh_relations();
        InsertReport {
            keyframe: kf,
            new_landmarks,
        }
    }

    fn promote(&mut self) {
        for p in self.points.values_mut() {
            if p.provisional && p.observations.len() >= 2 {
                p.provisional = false;
            }
        }
        for l in self.lines.values_mut() {
            if l.provisional && l.observations.len() >= 2 {
                l.provisional = false;
            }
        }
    }

    /// Drops provisional points and lines not re-observed within the cull
    /// window, and planes whose support fell below the minimum once the
    /// window has passed. Returns the removed ids.
    pub fn cull_landmarks(&mut self) -> Vec<LandmarkId> {
        let now = self.next_keyframe;
        let window = self.params.cull_window;
        let expired = |born: u64| now.saturating_sub(born + 1) >= window;
        let mut removed = Vec::new();
        self.points.retain(|id, p| {
            let keep = !(p.provisional && expired(p.born));
            if !keep {
                removed.push(*id);
            }
            keep
        });
        self.lines.retain(|id, l| {
            let keep = !(l.provisional && expired(l.born));
            if !keep {
                removed.push(*id);
            }
            keep
        });
        let min_support = self.params.min_plane_inliers;
        self.planes.retain(|id, p| {
            let keep = !(p.support < min_support && expired(p.born));
            if !keep {
                removed.push(*id);
            }
            keep
        });
        if !removed.is_empty() {
            let gone: BTreeSet<LandmarkId> = removed.iter().copied().collect();
            for kf in self.keyframes.values_mut() {
                kf.landmarks.retain(|id| !gone.contains(id));
            }
            for p in self.planes.values_mut() {
                p.relations.retain(|id, _| !gone.contains(id));
            }
            self.rebuild_covisibility();
        }
        removed.sort();
        removed
    }

    /// Recomputes every covisibility edge from landmark observation sets.
    fn rebuild_covisibility(&mut self) {
        let mut shared: BTreeMap<(KeyframeId, KeyframeId), usize> = BTreeMap::new();
        let observers = self
            .points
            .values()
            .map(|p| &p.observations)
            .chain(self.lines.values().map(|l| &l.observations))
            .chain(self.planes.values().map(|p| &p.observations));
        for obs in observers {
            let ids: Vec<KeyframeId> = obs.iter().copied().filter(|k| self.keyframes.contains_key(k)).collect();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    *shared.entry((*a, *b)).or_default() += 1;
                }
            }
        }
        for kf in self.keyframes.values_mut() {
            kf.covisibility.clear();
        }
        for ((a, b), n) in shared {
            self.keyframes.get_mut(&a).expect("keyframe").covisibility.insert(b, n);
            self.keyframes.get_mut(&b).expect("keyframe").covisibility.insert(a, n);
        }
    }

    /// Recomputes parallel/perpendicular relations among all plane landmarks.
    fn refresh_relations(&mut self) {
        let ids: Vec<LandmarkId> = self.planes.keys().copied().collect();
        let planes: Vec<PlaneHessian> = self.planes.values().map(|p| p.plane).collect();
        let relations =
            detect_plane_relations(&planes, self.params.parallel_tol_deg, self.params.perpendicular_tol_deg);
        for p in self.planes.values_mut() {
            p.relations.clear();
        }
        for r in relations {
            let (a, b) = (ids[r.a], ids[r.b]);
            self.planes.get_mut(&a).expect("plane").relations.insert(b, r.kind);
            self.planes.get_mut(&b).expect("plane").relations.insert(a, r.kind);
        }
    }

    /// The current keyframe, its `local_keyframes` most covisible neighbours
    /// (ties to the newer keyframe), their point and line landmarks, and all
    /// plane landmarks with their relations.
    pub fn build_local_map(&self, current: KeyframeId) -> LocalMap {
        let Some(kf) = self.keyframes.get(&current) else {
            return LocalMap::default();
        };
        let mut neighbours: Vec<(KeyframeId, usize)> = kf.covisibility.iter().map(|(k, n)| (*k, *n)).collect();
        neighbours.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
        neighbours.truncate(self.params.local_keyframes);
        let mut keyframes = vec![current];
        keyframes.extend(neighbours.iter().map(|n| n.0));
        let ids: BTreeSet<LandmarkId> = keyframes
            .iter()
            .flat_map(|k| self.keyframes[k].landmarks.iter().copied())
            .collect();
        let mut local = LocalMap {
            keyframes,
            ..LocalMap::default()
        };
        for id in &ids {
            if let Some(p) = self.points.get(id) {
                local.points.push((*id, p.position, p.descriptor));
            } else if let Some(l) = self.lines.get(id) {
                local.lines.push((*id, l.start, l.end));
            }
        }
        for (id, p) in &self.planes {
            local.planes.push((*id, p.plane, p.variance));
            for (other, kind) in &p.relations {
                if id < other {
                    local.relations.push((*id, *other, *kind));
                }
            }
        }
        local
    }

    /// Keyframe policy relative to the reference keyframe.
    pub fn needs_keyframe(&self, reference: KeyframeId, pose: &Pose, tracked_inliers: usize) -> bool {
        let Some(kf) = self.keyframes.get(&reference) else {
            return true;
        };
        let (rotation, translation) = kf.pose.distance(pose);
        (tracked_inliers as f64) < self.params.keyframe_inlier_ratio * kf.tracked_inliers as f64
            || translation > self.params.keyframe_translation
            || rotation.to_degrees() > self.params.keyframe_rotation_deg
    }

    /// All plane support points labeled by landmark id.
    pub fn labeled_cloud(&self) -> LabeledCloud {
        let mut cloud = LabeledCloud::default();
        for (id, p) in &self.planes {
            for q in &p.cloud {
                cloud.push(*q, id.0);
            }
        }
        cloud
    }

    /// Line-oriented dump of the map:
    ///
    /// ```text
    /// keyframe <id> <timestamp> <tx> <ty> <tz> <qx> <qy> <qz> <qw>   (camera-to-world)
    /// point <id> <x> <y> <z> <observations> <provisional 0|1>
    /// line <id> <x0> <y0> <z0> <x1> <y1> <z1> <observations> <provisional 0|1>
    /// plane <id> <nx> <ny> <nz> <d> <support> <cloud size> <observations>
    /// relation <id> <id> parallel|perpendicular
    /// covisibility <keyframe> <keyframe> <shared>
    /// ```
    pub fn dump(&self) -> String {
        let mut s = String::from("# sparse map dump\n");
        for kf in self.keyframes.values() {
            let twc = kf.pose.inverse();
            let (t, q) = (twc.translation(), twc.quaternion());
            let _ = writeln!(
                s,
                "keyframe {} {:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                kf.id, kf.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
        }
        for (id, p) in &self.points {
            let _ = writeln!(
                s,
                "point {id} {:.6} {:.6} {:.6} {} {}",
                p.position.x,
                p.position.y,
                p.position.z,
                p.observations.len(),
                u8::from(p.provisional)
            );
        }
        for (id, l) in &self.lines {
            let _ = writeln!(
                s,
                "line {id} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {} {}",
                l.start.x,
                l.start.y,
                l.start.z,
                l.end.x,
                l.end.y,
                l.end.z,
                l.observations.len(),
                u8::from(l.provisional)
            );
        }
        for (id, p) in &self.planes {
            let n = p.plane.normal;
            let _ = writeln!(
                s,
                "plane {id} {:.9} {:.9} {:.9} {:.6} {} {} {}",
                n.x,
                n.y,
                n.z,
                p.plane.d,
                p.support,
                p.cloud.len(),
                p.observations.len()
            );
        }
        for (id, p) in &self.planes {
            for (other, kind) in p.relations.range(LandmarkId(id.0 + 1)..) {
                let kind = match kind {
                    RelationKind::Parallel => "parallel",
                    RelationKind::Perpendicular => "perpendicular",
                };
                let _ = writeln!(s, "relation {id} {other} {kind}");
            }
        }
        for kf in self.keyframes.values() {
            for (other, n) in kf.covisibility.range(KeyframeId(kf.id.0 + 1)..) {
                let _ = writeln!(s, "covisibility {} {other} {n}", kf.id);
            }
        }
        s
    }

    /// Structural invariants: symmetric positive covisibility, symmetric
    /// relations, every landmark observed by an existing keyframe.
    pub fn check_invariants(&self) -> Result<(), String> {
        for kf in self.keyframes.values() {
            for (other, n) in &kf.covisibility {
                if *n == 0 {
                    return Err(format!("zero covisibility {} -> {other}", kf.id));
                }
                if self.keyframes.get(other).and_then(|o| o.covisibility.get(&kf.id)) != Some(n) {
                    return Err(format!("asymmetric covisibility {} -> {other}", kf.id));
                }
            }
        }
        for (id, p) in &self.planes {
            for (other, kind) in &p.relations {
                if self.planes.get(other).and_then(|o| o.relations.get(id)) != Some(kind) {
                    return Err(format!("asymmetric relation {id} -> {other}"));
                }
            }
        }
        let observed =
            |obs: &BTreeSet<KeyframeId>| !obs.is_empty() && obs.iter().all(|k| self.keyframes.contains_key(k));
        let all_observed = self.points.values().all(|p| observed(&p.observations))
            && self.lines.values().all(|l| observed(&l.observations))
            && self.planes.values().all(|p| observed(&p.observations));
        if !all_observed {
            return Err("landmark without a live observer".into());
        }
        Ok(())
    }
}
