//! Triangle mesh representation with eagerly cached per-face and per-vertex
//! geometry, plus mesh-quality metrics.
//!
//! All lengths are in millimeters. Faces wind counter-clockwise seen from
//! outside, so face normals of closed meshes built by this crate point
//! outward and the signed enclosed volume is positive.

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Interior angles must lie in [30°, 120°] for a triangle to count as good.
pub const GOOD_ANGLE_MIN_RAD: f64 = std::f64::consts::PI / 6.0;
pub const GOOD_ANGLE_MAX_RAD: f64 = 2.0 * std::f64::consts::PI / 3.0;

/// Per-face geometry computed once at mesh construction.
#[derive(Debug, Clone)]
pub struct FaceGeometry {
    /// Unit outward normals; zero vector for degenerate faces.
    pub normals: Vec<Vector3<f64>>,
    /// Face areas in mm².
    pub areas: Vec<f64>,
    /// Face centroids (vertex mean).
    pub centroids: Vec<Point3<f64>>,
    /// Area vectors `normal * area` = half the edge cross product.
    pub area_vectors: Vec<Vector3<f64>>,
    /// Faces with zero area.
    pub degenerate: Vec<bool>,
}

/// Mesh-quality summary based on interior triangle angles.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MeshQualityReport {
    /// Fraction of faces whose three angles all lie in [30°, 120°].
    pub good_angle_ratio: f64,
    /// Smallest interior angle over non-degenerate faces, degrees.
    pub min_angle_deg: f64,
    /// Largest interior angle over non-degenerate faces, degrees.
    pub max_angle_deg: f64,
    pub num_degenerate_faces: usize,
}

/// Immutable triangle mesh. Vertex replacement during optimization goes
/// through [`TriMesh::with_vertices`], which produces a new value with
/// recomputed geometry caches.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    geometry: FaceGeometry,
    dual_areas: Vec<f64>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &vi in f {
                if vi >= n {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {vi} but mesh has {n} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} repeats a vertex: {f:?}"
                )));
            }
        }
        let geometry = compute_face_geometry(&vertices, &faces);
        let dual_areas = compute_dual_areas(n, &faces, &geometry.areas);
        Ok(Self {
            vertices,
            faces,
            geometry,
            dual_areas,
        })
    }

    /// Same connectivity, new vertex positions; geometry caches recomputed.
    pub fn with_vertices(&self, vertices: Vec<Point3<f64>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vertices.len(),
                got: vertices.len(),
            });
        }
        let geometry = compute_face_geometry(&vertices, &self.faces);
        let dual_areas = compute_dual_areas(vertices.len(), &self.faces, &geometry.areas);
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            geometry,
            dual_areas,
        })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Cached per-face unit normals, areas (mm²), centroids and area vectors.
    pub fn face_geometry(&self) -> &FaceGeometry {
        &self.geometry
    }

    /// Barycentric dual vertex areas: each vertex receives one third of every
    /// incident face's area. Sums to the total surface area.
    pub fn vertex_dual_areas(&self) -> &[f64] {
        &self.dual_areas
    }

    /// Area-weighted vertex normals (normalized sum of incident face area
    /// vectors); zero for vertices whose incident faces cancel out.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut sums = vec![Vector3::zeros(); self.vertices.len()];
        for (f, av) in self.faces.iter().zip(&self.geometry.area_vectors) {
            for &vi in f {
                sums[vi] += av;
            }
        }
        sums.into_iter()
            .map(|s| {
                let n = s.norm();
                if n > 0.0 {
                    s / n
                } else {
                    Vector3::zeros()
                }
            })
            .collect()
    }

    pub fn total_area(&self) -> f64 {
        self.geometry.areas.iter().sum()
    }

    /// Unique undirected edges, each as (min, max), sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| {
                [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
                    .into_iter()
                    .map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// True when every undirected edge is shared by exactly two faces with
    /// opposite directions (watertight, consistently oriented).
    pub fn is_closed(&self) -> bool {
        let mut directed: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .collect();
        let total = directed.len();
        directed.sort_unstable();
        if directed.windows(2).any(|w| w[0] == w[1]) {
            return false;
        }
        // Each directed edge must have its reverse present.
        let mut matched = 0usize;
        for &(a, b) in &directed {
            if directed.binary_search(&(b, a)).is_ok() {
                matched += 1;
            }
        }
        matched == total
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        let sum: f64 = edges
            .iter()
            .map(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .sum();
        sum / edges.len() as f64
    }

    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Signed enclosed volume via the per-face centroid form
    /// `(1/3) Σ ⟨area_vector, centroid⟩`; positive for outward winding.
    pub(crate) fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let c = self.geometry.centroids[i];
                self.geometry.area_vectors[i].dot(&c.coords) / 3.0
            })
            .sum()
    }

    /// New mesh with every face winding reversed.
    pub fn reversed(&self) -> TriMesh {
        let faces = self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect();
        TriMesh::new(self.vertices.clone(), faces).expect("reversal preserves validity")
    }

    /// Concatenates two meshes into one soup (no vertex welding).
    pub fn concatenated(&self, other: &TriMesh) -> TriMesh {
        let offset = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(
            other
                .faces
                .iter()
                .map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]),
        );
        TriMesh::new(vertices, faces).expect("concatenation preserves validity")
    }
}

fn compute_face_geometry(vertices: &[Point3<f64>], faces: &[[usize; 3]]) -> FaceGeometry {
    let mut normals = Vec::with_capacity(faces.len());
    let mut areas = Vec::with_capacity(faces.len());
    let mut centroids = Vec::with_capacity(faces.len());
    let mut area_vectors = Vec::with_capacity(faces.len());
    let mut degenerate = Vec::with_capacity(faces.len());
    for f in faces {
        let (v0, v1, v2) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        let av = 0.5 * (v1 - v0).cross(&(v2 - v0));
        let area = av.norm();
        let normal = if area > 0.0 {
            av / area
        } else {
            Vector3::zeros()
        };
        normals.push(normal);
        areas.push(area);
        centroids.push(Point3::from((v0.coords + v1.coords + v2.coords) / 3.0));
        area_vectors.push(av);
        degenerate.push(area == 0.0);
    }
    FaceGeometry {
        normals,
        areas,
        centroids,
        area_vectors,
        degenerate,
    }
}

fn compute_dual_areas(num_vertices: usize, faces: &[[usize; 3]], areas: &[f64]) -> Vec<f64> {
    let mut dual = vec![0.0; num_vertices];
    for (f, &a) in faces.iter().zip(areas) {
        let third = a / 3.0;
        for &vi in f {
            dual[vi] += third;
        }
    }
    dual
}

/// Interior angles of one triangle (radians), or `None` when degenerate.
fn triangle_angles(v0: Point3<f64>, v1: Point3<f64>, v2: Point3<f64>) -> Option<[f64; 3]> {
    let corner = |a: Point3<f64>, b: Point3<f64>, c: Point3<f64>| {
        let e1 = b - a;
        let e2 = c - a;
        e1.cross(&e2).norm().atan2(e1.dot(&e2))
    };
    let angles = [
        corner(v0, v1, v2),
        corner(v1, v2, v0),
        corner(v2, v0, v1),
    ];
    if angles.iter().any(|a| !a.is_finite()) || angles.iter().all(|&a| a == 0.0) {
        None
    } else {
        Some(angles)
    }
}

/// Fraction of faces whose interior angles all lie in [30°, 120°] inclusive.
/// Degenerate faces count as bad.
pub fn good_angle_ratio(mesh: &TriMesh) -> f64 {
    quality_report(mesh).good_angle_ratio
}

pub fn quality_report(mesh: &TriMesh) -> MeshQualityReport {
    let mut good = 0usize;
    let mut degenerate = 0usize;
    let mut min_angle = f64::INFINITY;
    let mut max_angle = f64::NEG_INFINITY;
    for (i, f) in mesh.faces().iter().enumerate() {
        if mesh.face_geometry().degenerate[i] {
            degenerate += 1;
            continue;
        }
        let vs = mesh.vertices();
        match triangle_angles(vs[f[0]], vs[f[1]], vs[f[2]]) {
            Some(angles) => {
                min_angle = min_angle.min(angles[0].min(angles[1]).min(angles[2]));
                max_angle = max_angle.max(angles[0].max(angles[1]).max(angles[2]));
                if angles
                    .iter()
                    .all(|&a| (GOOD_ANGLE_MIN_RAD..=GOOD_ANGLE_MAX_RAD).contains(&a))
                {
                    good += 1;
                }
            }
            None => degenerate += 1,
        }
    }
    let nf = mesh.num_faces();
    MeshQualityReport {
        good_angle_ratio: if nf == 0 { 1.0 } else { good as f64 / nf as f64 },
        min_angle_deg: if min_angle.is_finite() {
            min_angle.to_degrees()
        } else {
            0.0
        },
        max_angle_deg: if max_angle.is_finite() {
            max_angle.to_degrees()
        } else {
            0.0
        },
        num_degenerate_faces: degenerate,
    }
}
