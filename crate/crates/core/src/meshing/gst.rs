//! Greedy triangulation of a nearly planar point set.
//!
//! Points are projected into a 2-d basis of their plane. Candidate edges join
//! each point to its nearest neighbours within an adaptive radius; they are
//! inserted shortest first whenever they do not cross (or overlap) an edge
//! already accepted. Triangles are the empty 3-cycles of the resulting
//! planar graph that satisfy the angle limits.

use super::kdtree::KdTree;
use super::{MeshError, MeshParams};
use crate::geometry::{any_orthogonal, PlaneHessian};
use nalgebra::{Vector2, Vector3};
use std::collections::{BTreeSet, HashMap};

/// Triangulated fragment of one instance, vertices on the plane.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fragment {
    pub vertices: Vec<Vector3<f64>>,
    /// Counter-clockwise about the plane normal.
    pub triangles: Vec<[u32; 3]>,
    /// Index into the input point list for every output vertex.
    pub source: Vec<usize>,
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn orient(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    cross2(&(b - a), &(c - a))
}

/// Whether segment `a` (endpoints `a0`, `a1`) conflicts with segment `b`:
/// proper crossing, collinear overlap, or an endpoint lying on the interior
/// of the other segment. Sharing an endpoint alone is not a conflict.
fn segments_conflict(pts: &[Vector2<f64>], a: (usize, usize), b: (usize, usize), eps: f64) -> bool {
    let (p0, p1, q0, q1) = (&pts[a.0], &pts[a.1], &pts[b.0], &pts[b.1]);
    let la = (p1 - p0).norm();
    let lb = (q1 - q0).norm();
    let o1 = orient(p0, p1, q0) / la;
    let o2 = orient(p0, p1, q1) / la;
    let o3 = orient(q0, q1, p0) / lb;
    let o4 = orient(q0, q1, p1) / lb;
    let shared = a.0 == b.0 || a.0 == b.1 || a.1 == b.0 || a.1 == b.1;
    let on_segment = |s0: &Vector2<f64>, s1: &Vector2<f64>, p: &Vector2<f64>| {
        let d = s1 - s0;
        let t = (p - s0).dot(&d) / d.norm_squared();
        t > 1e-9 && t < 1.0 - 1e-9
    };
    if shared {
        // Collinear overlap: the non-shared endpoints lie on the same ray.
        let (s, x, y) = if a.0 == b.0 {
            (p0, p1, q1)
        } else if a.0 == b.1 {
            (p0, p1, q0)
        } else if a.1 == b.0 {
            (p1, p0, q1)
        } else {
            (p1, p0, q0)
        };
        let u = x - s;
        let v = y - s;
        return (cross2(&u, &v) / (u.norm() * v.norm())).abs() < 1e-9 && u.dot(&v) > 0.0;
    }
    if o1.abs() <= eps && on_segment(p0, p1, q0) || o2.abs() <= eps && on_segment(p0, p1, q1) {
        return true;
    }
    if o3.abs() <= eps && on_segment(q0, q1, p0) || o4.abs() <= eps && on_segment(q0, q1, p1) {
        return true;
    }
    (o1 > eps && o2 < -eps || o1 < -eps && o2 > eps) && (o3 > eps && o4 < -eps || o3 < -eps && o4 > eps)
}

/// Uniform grid over edges for crossing queries.
struct EdgeGrid {
    origin: Vector2<f64>,
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl EdgeGrid {
    fn key(&self, p: &Vector2<f64>) -> (i64, i64) {
        (
            ((p.x - self.origin.x) / self.cell).floor() as i64,
            ((p.y - self.origin.y) / self.cell).floor() as i64,
        )
    }

    fn span(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> impl Iterator<Item = (i64, i64)> {
        let k0 = self.key(&a.inf(b));
        let k1 = self.key(&a.sup(b));
        (k0.0..=k1.0).flat_map(move |x| (k0.1..=k1.1).map(move |y| (x, y)))
    }
}

fn triangle_angles(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> [f64; 3] {
    let ang = |p: &Vector2<f64>, q: &Vector2<f64>, r: &Vector2<f64>| {
        let u = q - p;
        let v = r - p;
        (u.dot(&v) / (u.norm() * v.norm())).clamp(-1.0, 1.0).acos()
    };
    [ang(a, b, c), ang(b, c, a), ang(c, a, b)]
}

/// Triangulates `points` lying near `plane`.
pub fn greedy_triangulate(
    points: &[Vector3<f64>],
    plane: &PlaneHessian,
    params: &MeshParams,
) -> Result<Fragment, MeshError> {
    let n = plane.normal;
    let u_axis = any_orthogonal(&n);
    let v_axis = n.cross(&u_axis);
    let origin = plane.project_point(&points.first().copied().unwrap_or_else(Vector3::zeros));

    // Project and drop exact duplicates (keeping the first occurrence).
    let mut uv: Vec<Vector2<f64>> = Vec::with_capacity(points.len());
    let mut source: Vec<usize> = Vec::with_capacity(points.len());
    {
        let projected: Vec<Vector3<f64>> = points
            .iter()
            .map(|p| {
                let r = p - origin;
                Vector3::new(r.dot(&u_axis), r.dot(&v_axis), 0.0)
            })
            .collect();
        if projected.is_empty() {
            return Err(MeshError::DegenerateInstance("no points".into()));
        }
        let tree = KdTree::build(&projected).expect("non-empty");
        for (i, p) in projected.iter().enumerate() {
            let dup = tree.radius(p, 1e-9).iter().any(|&(j, _)| j < i);
            if !dup {
                uv.push(Vector2::new(p.x, p.y));
                source.push(i);
            }
        }
    }
    let m = uv.len();
    if m < 3 {
        return Err(MeshError::DegenerateInstance(format!("{m} distinct point(s)")));
    }
    let far = (1..m)
        .max_by(|&a, &b| {
            (uv[a] - uv[0])
                .norm_squared()
                .total_cmp(&(uv[b] - uv[0]).norm_squared())
        })
        .expect("m >= 3");
    let axis = uv[far] - uv[0];
    let span = axis.norm();
    let off_line = uv
        .iter()
        .map(|p| cross2(&axis, &(p - uv[0])).abs() / span)
        .fold(0.0, f64::max);
    if off_line <= 1e-9 * span.max(1e-300) {
        return Err(MeshError::DegenerateInstance("points are collinear".into()));
    }

    let flat: Vec<Vector3<f64>> = uv.iter().map(|p| Vector3::new(p.x, p.y, 0.0)).collect();
    let tree = KdTree::build(&flat).expect("non-empty");
    let k = params.max_neighbors.max(1) + 1;
    let neighbours: Vec<Vec<(usize, f64)>> = flat.iter().map(|p| tree.knn(p, k)).collect();
    let radius: Vec<f64> = neighbours
        .iter()
        .map(|nb| {
            let nn = nb.iter().find(|&&(_, d)| d > 0.0).map_or(0.0, |&(_, d)| d.sqrt());
            params.search_radius.min(params.multiplier * nn)
        })
        .collect();

    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (i, nb) in neighbours.iter().enumerate() {
        for &(j, d2) in nb {
            if j != i && d2.sqrt() <= radius[i].min(radius[j]) {
                candidates.insert((i.min(j), i.max(j)));
            }
        }
    }
    let mut sorted: Vec<(f64, usize, usize)> = candidates
        .into_iter()
        .map(|(i, j)| ((uv[i] - uv[j]).norm(), i, j))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut lengths: Vec<f64> = sorted.iter().map(|e| e.0).collect();
    let cell = if lengths.is_empty() {
        1.0
    } else {
        let mid = lengths.len() / 2;
        *lengths.select_nth_unstable_by(mid, f64::total_cmp).1
    };
    let eps = 1e-9 * cell;
    let mut grid = EdgeGrid {
        origin: uv.iter().fold(Vector2::repeat(f64::INFINITY), |a, p| a.inf(p)),
        cell: cell.max(1e-12),
        cells: HashMap::new(),
    };
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut seen: Vec<usize> = Vec::new();
    for &(len, i, j) in &sorted {
        // Reject edges passing through another point.
        let mid = (flat[i] + flat[j]) / 2.0;
        let blocked = tree.radius(&mid, len / 2.0 + eps).iter().any(|&(p, _)| {
            if p == i || p == j {
                return false;
            }
            let d = uv[j] - uv[i];
            let t = (uv[p] - uv[i]).dot(&d) / d.norm_squared();
            t > 0.0 && t < 1.0 && (cross2(&d, &(uv[p] - uv[i])) / len).abs() <= eps
        });
        if blocked {
            continue;
        }
        seen.clear();
        let mut conflict = false;
        'cells: for key in grid.span(&uv[i], &uv[j]) {
            if let Some(list) = grid.cells.get(&key) {
                for &e in list {
                    if seen.contains(&e) {
                        continue;
                    }
                    seen.push(e);
                    if segments_conflict(&uv, (i, j), edges[e], eps) {
                        conflict = true;
                        break 'cells;
                    }
                }
            }
        }
        if conflict {
            continue;
        }
        let id = edges.len();
        edges.push((i, j));
        let keys: Vec<_> = grid.span(&uv[i], &uv[j]).collect();
        for key in keys {
            grid.cells.entry(key).or_default().push(id);
        }
        adjacency[i].push(j);
        adjacency[j].push(i);
    }

    let edge_set: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    let has_edge = |a: usize, b: usize| edge_set.contains(&(a.min(b), a.max(b)));
    let min_angle = params.min_angle_deg.to_radians();
    let max_angle = params.max_angle_deg.to_radians();
    let mut triangles: BTreeSet<[usize; 3]> = BTreeSet::new();
    for i in 0..m {
        let mut nb = adjacency[i].clone();
        if nb.len() < 2 {
            continue;
        }
        nb.sort_by(|&a, &b| {
            let da = uv[a] - uv[i];
            let db = uv[b] - uv[i];
            da.y.atan2(da.x).total_cmp(&db.y.atan2(db.x)).then(a.cmp(&b))
        });
        for w in 0..nb.len() {
            let a = nb[w];
            let b = nb[(w + 1) % nb.len()];
            if a == b || !has_edge(a, b) {
                continue;
            }
            // Counter-clockwise wedge from a to b must be convex.
            if orient(&uv[i], &uv[a], &uv[b]) <= 0.0 {
                continue;
            }
            let mut tri = [i, a, b];
            tri.sort_unstable();
            if triangles.contains(&tri) {
                continue;
            }
            let (pa, pb, pc) = (&uv[i], &uv[a], &uv[b]);
            let area = orient(pa, pb, pc) / 2.0;
            if area <= 1e-12 {
                continue;
            }
            let angles = triangle_angles(pa, pb, pc);
            if angles.iter().any(|&t| t < min_angle || t > max_angle) {
                continue;
            }
            let centroid = (pa + pb + pc) / 3.0;
            let reach = [pa, pb, pc].iter().map(|p| (*p - centroid).norm()).fold(0.0, f64::max);
            let c3 = Vector3::new(centroid.x, centroid.y, 0.0);
            let occupied = tree.radius(&c3, reach + eps).iter().any(|&(p, _)| {
                p != i
                    && p != a
                    && p != b
                    && orient(pa, pb, &uv[p]) > eps
                    && orient(pb, pc, &uv[p]) > eps
                    && orient(pc, pa, &uv[p]) > eps
            });
            if !occupied {
                triangles.insert(tri);
            }
        }
    }

    // Compact to used vertices, in input order.
    let mut used = vec![false; m];
    for t in &triangles {
        for &v in t {
            used[v] = true;
        }
    }
    let mut remap = vec![u32::MAX; m];
    let mut fragment = Fragment::default();
    for v in 0..m {
        if used[v] {
            remap[v] = fragment.vertices.len() as u32;
            fragment.vertices.push(origin + u_axis * uv[v].x + v_axis * uv[v].y);
            fragment.source.push(source[v]);
        }
    }
    for t in &triangles {
        let [a, b, c] = *t;
        let ccw = orient(&uv[a], &uv[b], &uv[c]) > 0.0;
        let (b, c) = if ccw { (b, c) } else { (c, b) };
        fragment.triangles.push([remap[a], remap[b], remap[c]]);
    }
    Ok(fragment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(f: &Fragment) -> f64 {
        f.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| f.vertices[i as usize]);
                (b - a).cross(&(c - a)).norm() / 2.0
            })
            .sum()
    }

    fn z_plane() -> PlaneHessian {
        PlaneHessian::new(Vector3::z(), 0.0).unwrap()
    }

    #[test]
    fn single_triangle() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.3, 0.8, 0.0),
        ];
        let f = greedy_triangulate(&pts, &z_plane(), &MeshParams::default()).unwrap();
        assert_eq!(f.triangles.len(), 1);
    }

    #[test]
    fn unit_square() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let f = greedy_triangulate(&pts, &z_plane(), &MeshParams::default()).unwrap();
        assert_eq!(f.triangles.len(), 2);
        assert!((area(&f) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn regular_grid() {
        let pts: Vec<_> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0)))
            .collect();
        let f = greedy_triangulate(&pts, &z_plane(), &MeshParams::default()).unwrap();
        assert_eq!(f.triangles.len(), 162);
        assert!((area(&f) - 0.81).abs() < 1e-6);
    }

    #[test]
    fn collinear_is_degenerate() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            greedy_triangulate(&pts, &z_plane(), &MeshParams::default()),
            Err(MeshError::DegenerateInstance(_))
        ));
        assert!(greedy_triangulate(&pts[..2], &z_plane(), &MeshParams::default()).is_err());
    }

    #[test]
    fn winding_follows_normal() {
        let pts: Vec<_> = (0..4)
            .flat_map(|i| (0..4).map(move |j| Vector3::new(i as f64, j as f64 * 1.1, 2.0)))
            .collect();
        let plane = PlaneHessian::new(Vector3::z(), -2.0).unwrap();
        let f = greedy_triangulate(&pts, &plane, &MeshParams::default()).unwrap();
        for t in &f.triangles {
            let [a, b, c] = t.map(|i| f.vertices[i as usize]);
            assert!((b - a).cross(&(c - a)).dot(&plane.normal) > 0.0);
        }
    }
}
