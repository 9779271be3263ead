//! Per-plane-instance meshing of the sparse map.

mod gst;
mod kdtree;

pub use gst::{greedy_triangulate, Fragment};
pub use kdtree::{KdTree, KdTreeError};

use crate::geometry::PlaneHessian;
use crate::mapping::{LandmarkId, PlaneLandmark, SparseMap};
use nalgebra::Vector3;
use rayon::prelude::*;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshParams {
    /// Upper bound on the adaptive neighbour radius (meters).
    pub search_radius: f64,
    /// The adaptive radius of a point is `multiplier` times its
    /// nearest-neighbour distance, capped by `search_radius`.
    pub multiplier: f64,
    pub max_neighbors: usize,
    pub min_angle_deg: f64,
    pub max_angle_deg: f64,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            search_radius: 5.0,
            multiplier: 5.0,
            max_neighbors: 25,
            min_angle_deg: 10.0,
            max_angle_deg: 120.0,
        }
    }
}

/// Triangle mesh whose vertices carry the id of their source plane instance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanarMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub instance_ids: Vec<u64>,
    pub triangles: Vec<[u32; 3]>,
    /// `(instance id, first vertex, first triangle)` per meshed instance.
    pub offsets: Vec<(u64, usize, usize)>,
}

impl PlanarMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    /// Area of the triangles belonging to one instance.
    pub fn instance_area(&self, id: u64) -> f64 {
        self.triangles
            .iter()
            .filter(|t| self.instance_ids[t[0] as usize] == id)
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Appends a fragment under `id`, shifting its indices.
    pub fn push_fragment(&mut self, id: u64, fragment: &Fragment) {
        let base = self.vertices.len() as u32;
        self.offsets.push((id, self.vertices.len(), self.triangles.len()));
        self.vertices.extend_from_slice(&fragment.vertices);
        self.instance_ids
            .extend(std::iter::repeat_n(id, fragment.vertices.len()));
        self.triangles.extend(
            fragment
                .triangles
                .iter()
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }

    /// ASCII PLY. Vertices are written as `x y z instance` with six decimals,
    /// faces as `3 a b c`, lines terminated by `\n`.
    pub fn write_ply_ascii<W: Write>(&self, mut w: W) -> io::Result<()> {
        self.write_ply_header(&mut w, "ascii")?;
        for (v, id) in self.vertices.iter().zip(&self.instance_ids) {
            writeln!(w, "{:.6} {:.6} {:.6} {id}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Little-endian binary PLY with `float` coordinates and an `int`
    /// instance id.
    pub fn write_ply_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        self.write_ply_header(&mut w, "binary_little_endian")?;
        for (v, id) in self.vertices.iter().zip(&self.instance_ids) {
            for c in v.iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
            w.write_all(&(*id as i32).to_le_bytes())?;
        }
        for t in &self.triangles {
            w.write_all(&[3u8])?;
            for &i in t {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn write_ply_header<W: Write>(&self, w: &mut W, format: &str) -> io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format {format} 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "property int instance")?;
        writeln!(w, "element face {}", self.triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")
    }

    /// Wavefront OBJ with positions and faces only.
    pub fn write_obj<W: Write>(&self, mut w: W) -> io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

/// Instances skipped during meshing, with the reason.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeshReport {
    pub meshed: usize,
    pub skipped: Vec<(u64, String)>,
}

/// Meshes each `(id, plane, points)` instance independently (in parallel) and
/// concatenates the fragments in ascending id order.
pub fn mesh_instances(
    instances: &[(u64, PlaneHessian, Vec<Vector3<f64>>)],
    params: &MeshParams,
) -> (PlanarMesh, MeshReport) {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by_key(|&i| instances[i].0);
    let results: Vec<(u64, Result<Fragment, MeshError>)> = order
        .par_iter()
        .map(|&i| {
            let (id, plane, points) = &instances[i];
            (*id, greedy_triangulate(points, plane, params))
        })
        .collect();
    let mut mesh = PlanarMesh::default();
    let mut report = MeshReport::default();
    for (id, result) in results {
        match result {
            Ok(fragment) if !fragment.triangles.is_empty() => {
                mesh.push_fragment(id, &fragment);
                report.meshed += 1;
            }
            Ok(_) => report.skipped.push((id, "no valid triangles".into())),
            Err(e) => report.skipped.push((id, e.to_string())),
        }
    }
    (mesh, report)
}

pub fn greedy_triangulate_instance(landmark: &PlaneLandmark, params: &MeshParams) -> Result<Fragment, MeshError> {
    greedy_triangulate(&landmark.cloud, &landmark.plane, params)
}

/// Meshes every plane landmark of the map.
pub fn mesh_map(map: &SparseMap, params: &MeshParams) -> (PlanarMesh, MeshReport) {
    let instances: Vec<(u64, PlaneHessian, Vec<Vector3<f64>>)> = map
        .planes()
        .map(|(id, p): (&LandmarkId, &PlaneLandmark)| (id.0, p.plane, p.cloud.clone()))
        .collect();
    mesh_instances(&instances, params)
}
