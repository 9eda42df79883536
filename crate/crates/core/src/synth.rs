//! Synthetic test geometry: icospheres and a thick-walled truncated
//! prolate-spheroid shell used as the canonical template shape.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

/// Default meridian resolution for [`make_shell_phantom`].
pub const DEFAULT_SHELL_RESOLUTION: usize = 24;

/// Latitude ring spacing relative to the circumferential edge length.
/// Near √3/2 the band triangles come out close to equilateral.
const RING_STEP_FACTOR: f64 = 1.2;
const STAGGER: f64 = 0.5;

/// Icosahedron subdivided `subdivisions` times, vertices projected onto the
/// sphere of the given radius around `center`. Outward winding.
pub fn make_icosphere(subdivisions: u32, radius: f64, center: Point3<f64>) -> Result<TriMesh> {
    if radius <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "icosphere radius must be positive, got {radius}"
        )));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut dirs: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|a| Vector3::new(a[0], a[1], a[2]).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for (k, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].iter().enumerate() {
                let key = (*a.min(b), *a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (dirs[*a] + dirs[*b]).normalize();
                    dirs.push(m);
                    dirs.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }

    let vertices = dirs
        .into_iter()
        .map(|d| center + radius * d)
        .collect();
    TriMesh::new(vertices, faces)
}

/// One latitude ring of a tessellated surface: vertex indices plus their
/// angular positions as fractions of a full turn, sorted increasing.
struct Ring {
    indices: Vec<usize>,
    fractions: Vec<f64>,
}

/// Triangulates the annular band between two rings by merging their angular
/// fractions. Emits `|a| + |b|` triangles. With `flip = false`, winding is
/// outward for a surface whose outside is away from the axis and whose ring
/// `a` sits above ring `b` in z.
fn band(faces: &mut Vec<[usize; 3]>, a: &Ring, b: &Ring, flip: bool) {
    let na = a.indices.len();
    let nb = b.indices.len();
    let frac = |r: &Ring, k: usize| {
        let n = r.indices.len();
        r.fractions[k % n] + (k / n) as f64
    };
    let mut push = |t: [usize; 3]| {
        if flip {
            faces.push([t[0], t[2], t[1]]);
        } else {
            faces.push(t);
        }
    };
    let (mut i, mut j) = (0usize, 0usize);
    while i < na || j < nb {
        let advance_a = if i == na {
            false
        } else if j == nb {
            true
        } else {
            frac(a, i + 1) <= frac(b, j + 1)
        };
        if advance_a {
            push([a.indices[i % na], b.indices[j % nb], a.indices[(i + 1) % na]]);
            i += 1;
        } else {
            push([b.indices[j % nb], b.indices[(j + 1) % nb], a.indices[i % na]]);
            j += 1;
        }
    }
}

/// Fan from a ring down to an apex vertex below it. With `flip = false`,
/// winding is outward for a bottom apex of an axis-aligned surface.
fn apex_fan(faces: &mut Vec<[usize; 3]>, ring: &Ring, apex: usize, flip: bool) {
    let n = ring.indices.len();
    for j in 0..n {
        let t = [ring.indices[j], apex, ring.indices[(j + 1) % n]];
        if flip {
            faces.push([t[0], t[2], t[1]]);
        } else {
            faces.push(t);
        }
    }
}

/// Cumulative meridian arc length of the spheroid profile
/// `(r, z) = (ā sinθ, c cosθ)` over `θ ∈ [θ_start, π]`, tabulated densely.
struct MeridianArc {
    thetas: Vec<f64>,
    cum: Vec<f64>,
}

impl MeridianArc {
    fn new(mean_radius: f64, c: f64, theta_start: f64) -> Self {
        const STEPS: usize = 4096;
        let g = |theta: f64| {
            let (s, co) = theta.sin_cos();
            ((mean_radius * co).powi(2) + (c * s).powi(2)).sqrt()
        };
        let mut thetas = Vec::with_capacity(STEPS + 1);
        let mut cum = Vec::with_capacity(STEPS + 1);
        let mut acc = 0.0;
        let dt = (std::f64::consts::PI - theta_start) / STEPS as f64;
        thetas.push(theta_start);
        cum.push(0.0);
        for k in 1..=STEPS {
            let t0 = theta_start + (k - 1) as f64 * dt;
            let t1 = theta_start + k as f64 * dt;
            acc += 0.5 * (g(t0) + g(t1)) * dt;
            thetas.push(t1);
            cum.push(acc);
        }
        Self { thetas, cum }
    }

    fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// θ at a given arc length from the start, by linear interpolation.
    fn theta_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total());
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(k) => self.thetas[k],
            Err(k) => {
                let (c0, c1) = (self.cum[k - 1], self.cum[k]);
                let w = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
                self.thetas[k - 1] + w * (self.thetas[k] - self.thetas[k - 1])
            }
        }
    }
}

/// Ramanujan's ellipse perimeter approximation.
fn ellipse_perimeter(ra: f64, rb: f64) -> f64 {
    let h = 3.0 * (ra + rb);
    std::f64::consts::PI * (h - ((h + rb - 2.0 * ra) * (h + ra - 2.0 * rb)).sqrt())
}

struct SpheroidPatch {
    rings: Vec<Ring>,
    apex: usize,
}

/// Tessellates a spheroid `(a sinθ cosφ, b sinθ sinφ, c cosθ)` from the cut
/// latitude `θ_cut` down to the bottom apex, appending vertices. Rings are
/// spaced at equal meridian arc length `edge`; ring vertex counts follow the
/// local circumference. Alternate rings are staggered by half a step.
fn tessellate_truncated_spheroid(
    vertices: &mut Vec<Point3<f64>>,
    a: f64,
    b: f64,
    c: f64,
    theta_cut: f64,
    edge: f64,
) -> SpheroidPatch {
    let arc = MeridianArc::new(0.5 * (a + b), c, theta_cut);
    let ring_step = edge * RING_STEP_FACTOR;
    let n_rings = ((arc.total() / ring_step).round() as usize).max(2);
    let step = arc.total() / n_rings as f64;
    let mut rings = Vec::with_capacity(n_rings);
    for i in 0..n_rings {
        let theta = arc.theta_at(i as f64 * step);
        let (s, co) = theta.sin_cos();
        let perim = ellipse_perimeter(a * s, b * s);
        let n = ((perim / edge).round() as usize).max(6);
        let offset = STAGGER * (i % 2) as f64;
        let mut indices = Vec::with_capacity(n);
        let mut fractions = Vec::with_capacity(n);
        for j in 0..n {
            let f = (j as f64 + offset) / n as f64;
            let phi = std::f64::consts::TAU * f;
            vertices.push(Point3::new(a * s * phi.cos(), b * s * phi.sin(), c * co));
            indices.push(vertices.len() - 1);
            fractions.push(f);
        }
        rings.push(Ring { indices, fractions });
    }
    vertices.push(Point3::new(0.0, 0.0, -c));
    SpheroidPatch {
        rings,
        apex: vertices.len() - 1,
    }
}

/// Thick-walled truncated prolate spheroid, centered at the origin with the
/// long axis along z and the apex pointing down.
///
/// The outer surface is the spheroid with semi-axes `(a, b, c)`; the inner
/// surface uses `(a - wall, b - wall, c - wall)`. Both are truncated at
/// `z = c·(2·base_cut − 1)` (so `base_cut` is the kept fraction of the full
/// z extent, measured from the apex) and joined by a flat annular cap.
/// `resolution` is the approximate number of latitude rings along the outer
/// meridian; edge lengths elsewhere follow from it.
pub fn make_shell_phantom(
    outer_radii: (f64, f64, f64),
    wall: f64,
    base_cut: f64,
    resolution: usize,
) -> Result<TriMesh> {
    let (a, b, c) = outer_radii;
    let invalid = |m: String| Err(Error::InvalidParameter(m));
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return invalid(format!("outer radii must be positive, got {outer_radii:?}"));
    }
    if wall <= 0.0 || wall >= a.min(b).min(c) {
        return invalid(format!(
            "wall {wall} must lie in (0, {}), the smallest outer radius",
            a.min(b).min(c)
        ));
    }
    if !(0.0 < base_cut && base_cut < 1.0) {
        return invalid(format!("base_cut must lie in (0, 1), got {base_cut}"));
    }
    if resolution < 4 {
        return invalid(format!("resolution must be at least 4, got {resolution}"));
    }
    let (ai, bi, ci) = (a - wall, b - wall, c - wall);
    let z_cut = c * (2.0 * base_cut - 1.0);
    if z_cut >= ci {
        return invalid(format!(
            "cut plane z = {z_cut} reaches above the inner surface top {ci}; \
             the inner surface would self-intersect the cap"
        ));
    }
    if z_cut <= -ci {
        return invalid(format!(
            "cut plane z = {z_cut} lies below the inner surface bottom {}; \
             the cavity would be empty",
            -ci
        ));
    }

    let theta_out = (z_cut / c).acos();
    let theta_in = (z_cut / ci).acos();
    let outer_arc = MeridianArc::new(0.5 * (a + b), c, theta_out).total();
    let edge = outer_arc / resolution as f64;

    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    let outer = tessellate_truncated_spheroid(&mut vertices, a, b, c, theta_out, edge);
    let inner = tessellate_truncated_spheroid(&mut vertices, ai, bi, ci, theta_in, edge);

    for w in outer.rings.windows(2) {
        band(&mut faces, &w[0], &w[1], false);
    }
    apex_fan(&mut faces, outer.rings.last().unwrap(), outer.apex, false);
    for w in inner.rings.windows(2) {
        band(&mut faces, &w[0], &w[1], true);
    }
    apex_fan(&mut faces, inner.rings.last().unwrap(), inner.apex, true);

    // Flat annular cap at z_cut: interpolated rings between the outer and
    // inner cut rings keep cap triangles near the target edge length.
    let s = (1.0 - (z_cut / c).powi(2)).sqrt();
    let si = (1.0 - (z_cut / ci).powi(2)).sqrt();
    let (r_out_a, r_out_b) = (a * s, b * s);
    let (r_in_a, r_in_b) = (ai * si, bi * si);
    let gap = 0.5 * ((r_out_a - r_in_a) + (r_out_b - r_in_b));
    let n_bands = ((gap / edge).round() as usize).max(1);
    let mut prev = Ring {
        indices: outer.rings[0].indices.clone(),
        fractions: outer.rings[0].fractions.clone(),
    };
    for k in 1..n_bands {
        let t = k as f64 / n_bands as f64;
        let ra = r_out_a + t * (r_in_a - r_out_a);
        let rb = r_out_b + t * (r_in_b - r_out_b);
        let n = ((ellipse_perimeter(ra, rb) / edge).round() as usize).max(6);
        let offset = STAGGER * (k % 2) as f64;
        let mut indices = Vec::with_capacity(n);
        let mut fractions = Vec::with_capacity(n);
        for j in 0..n {
            let f = (j as f64 + offset) / n as f64;
            let phi = std::f64::consts::TAU * f;
            vertices.push(Point3::new(ra * phi.cos(), rb * phi.sin(), z_cut));
            indices.push(vertices.len() - 1);
            fractions.push(f);
        }
        let ring = Ring { indices, fractions };
        band(&mut faces, &prev, &ring, true);
        prev = ring;
    }
    band(&mut faces, &prev, &inner.rings[0], true);

    let mesh = TriMesh::new(vertices, faces)?;
    if !mesh.is_closed() {
        return Err(Error::InvalidMesh(
            "shell phantom construction produced an unclosed surface".into(),
        ));
    }
    if mesh.signed_volume() <= 0.0 {
        return Err(Error::InvalidMesh(
            "shell phantom construction produced inward orientation".into(),
        ));
    }
    Ok(mesh)
}

/// Volume of the spheroid `(a, b, c)` kept below the plane `z = z_cut`.
/// Exposed for tests and fixtures.
pub fn truncated_spheroid_volume(a: f64, b: f64, c: f64, z_cut: f64) -> f64 {
    let z = z_cut.clamp(-c, c);
    std::f64::consts::PI * a * b * ((z + c) - (z.powi(3) + c.powi(3)) / (3.0 * c * c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::good_angle_ratio;
    use approx::assert_relative_eq;

    #[test]
    fn icosphere_counts() {
        let m0 = make_icosphere(0, 1.0, Point3::origin()).unwrap();
        assert_eq!(m0.num_vertices(), 12);
        assert_eq!(m0.num_faces(), 20);
        let m3 = make_icosphere(3, 1.0, Point3::origin()).unwrap();
        assert_eq!(m3.num_vertices(), 642);
        assert_eq!(m3.num_faces(), 1280);
    }

    #[test]
    fn icosphere_on_sphere_and_closed() {
        let center = Point3::new(3.0, -2.0, 1.0);
        let m = make_icosphere(3, 7.5, center).unwrap();
        for v in m.vertices() {
            assert!(((v - center).norm() - 7.5).abs() <= 1e-9);
        }
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn icosphere_volume_approaches_analytic() {
        let r = 10.0;
        let m = make_icosphere(3, r, Point3::origin()).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        let v = m.signed_volume();
        assert!(v < analytic); // inscribed
        assert!((v - analytic).abs() / analytic < 0.02);
    }

    #[test]
    fn shell_phantom_is_closed_genus_zero() {
        let m = make_shell_phantom((30.0, 30.0, 50.0), 8.0, 0.7, DEFAULT_SHELL_RESOLUTION).unwrap();
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn shell_phantom_volume_matches_numeric_integration() {
        let (a, b, c): (f64, f64, f64) = (30.0, 30.0, 50.0);
        let wall = 8.0;
        let base_cut = 0.7;
        let z_cut = c * (2.0 * base_cut - 1.0);
        // Oracle: integrate the elliptical cross-section areas of the two
        // truncated spheroids over z.
        let numeric = |aa: f64, bb: f64, cc: f64| {
            let n = 200_000;
            let z0 = -cc;
            let z1 = z_cut.min(cc);
            let dz = (z1 - z0) / n as f64;
            let area = |z: f64| {
                let q = 1.0 - (z / cc).powi(2);
                if q > 0.0 {
                    std::f64::consts::PI * aa * bb * q
                } else {
                    0.0
                }
            };
            let mut acc = 0.0;
            for k in 0..n {
                let za = z0 + k as f64 * dz;
                acc += 0.5 * (area(za) + area(za + dz)) * dz;
            }
            acc
        };
        let expected = numeric(a, b, c) - numeric(a - wall, b - wall, c - wall);
        assert_relative_eq!(
            expected,
            truncated_spheroid_volume(a, b, c, z_cut)
                - truncated_spheroid_volume(a - wall, b - wall, c - wall, z_cut),
            max_relative = 1e-8
        );
        let m = make_shell_phantom((a, b, c), wall, base_cut, DEFAULT_SHELL_RESOLUTION).unwrap();
        let v = m.signed_volume();
        assert!(
            (v - expected).abs() / expected < 0.02,
            "mesh volume {v} vs integrated {expected}"
        );
    }

    #[test]
    fn shell_phantom_angle_quality() {
        let m = make_shell_phantom((30.0, 30.0, 50.0), 8.0, 0.7, DEFAULT_SHELL_RESOLUTION).unwrap();
        let gar = good_angle_ratio(&m);
        assert!(gar >= 0.9, "GAR {gar}");
    }

    #[test]
    fn shell_phantom_parameter_validation() {
        assert!(make_shell_phantom((30.0, 30.0, 50.0), 35.0, 0.7, 24).is_err());
        assert!(make_shell_phantom((30.0, 30.0, 50.0), 8.0, 0.0, 24).is_err());
        assert!(make_shell_phantom((30.0, 30.0, 50.0), 8.0, 1.0, 24).is_err());
        // Cut plane above the inner surface top: c·(2·0.95−1) = 45 > 42.
        assert!(make_shell_phantom((30.0, 30.0, 50.0), 8.0, 0.95, 24).is_err());
        assert!(make_shell_phantom((30.0, 30.0, 50.0), 8.0, 0.7, 2).is_err());
    }

    #[test]
    fn shell_phantom_resolution_scales_vertex_count() {
        let lo = make_shell_phantom((30.0, 30.0, 50.0), 8.0, 0.7, 12).unwrap();
        let hi = make_shell_phantom((30.0, 30.0, 50.0), 8.0, 0.7, 32).unwrap();
        assert!(hi.num_vertices() > 3 * lo.num_vertices());
    }
}
