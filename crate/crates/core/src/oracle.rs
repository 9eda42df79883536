//! Non-differentiable inside/outside ground truth by parity ray casting.
//!
//! Rays are cast along the three grid axes with a fixed tiny origin jitter
//! so hits through vertices or edges become measure-zero; the three parities
//! are majority-voted. Used to voxelize meshes for supervision and to
//! cross-check the differentiable occupancy field.

use nalgebra::{Point3, Vector3};

use crate::mesh::TriMesh;
use crate::volume::{GridSpec, LabelVolume};

/// Relative ray-origin jitter. Two irrational-ish constants decorrelate the
/// two perpendicular offsets.
const JITTER: f64 = 1e-7;
const JITTER_A: f64 = 0.618_033_988_7;
const JITTER_B: f64 = 0.414_213_562_4;

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter for
/// hits strictly in front of the origin.
fn ray_triangle(
    orig: Point3<f64>,
    dir: Vector3<f64>,
    v0: Point3<f64>,
    v1: Point3<f64>,
    v2: Point3<f64>,
) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = orig - v0;
    let u = tvec.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = tvec.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Majority-voted parity test for arbitrary points. For each point, one ray
/// per grid axis counts surface crossings; odd counts vote inside.
pub fn parity_inside(mesh: &TriMesh, points: &[Point3<f64>]) -> Vec<bool> {
    let scale = mesh.bounding_box_diagonal().max(1e-12);
    let vs = mesh.vertices();
    let dirs = [Vector3::x(), Vector3::y(), Vector3::z()];
    points
        .iter()
        .map(|&q| {
            let mut votes = 0;
            for (d, dir) in dirs.iter().enumerate() {
                // Jitter perpendicular to the ray only.
                let mut orig = q;
                orig[(d + 1) % 3] += JITTER * scale * JITTER_A;
                orig[(d + 2) % 3] += JITTER * scale * JITTER_B;
                let mut crossings = 0u32;
                for f in mesh.faces() {
                    if ray_triangle(orig, *dir, vs[f[0]], vs[f[1]], vs[f[2]]).is_some() {
                        crossings += 1;
                    }
                }
                votes += (crossings % 2) as u32;
            }
            votes >= 2
        })
        .collect()
}

/// Labels every voxel center of `template` by majority-voted ray parity.
/// One scanline pass per axis: each face deposits its crossing coordinates
/// into the columns it covers, then each column is swept in order.
pub fn voxelize_oracle(mesh: &TriMesh, template: &GridSpec) -> LabelVolume {
    if !mesh.is_closed() {
        eprintln!("warning: voxelize_oracle called on a non-watertight mesh; labels are best-effort");
    }
    let (nx, ny, nz) = template.dims;
    let mut votes = vec![0u8; template.num_voxels()];

    // axis = ray direction; (p, q) = the two perpendicular axes.
    for axis in 0..3usize {
        let p_axis = (axis + 1) % 3;
        let q_axis = (axis + 2) % 3;
        let dims = [nx, ny, nz];
        let spacing = [template.spacing.0, template.spacing.1, template.spacing.2];
        let (np, nq, nr) = (dims[p_axis], dims[q_axis], dims[axis]);
        let jp = JITTER * spacing[p_axis] * JITTER_A;
        let jq = JITTER * spacing[q_axis] * JITTER_B;
        let mut dir = Vector3::zeros();
        dir[axis] = 1.0;

        // Crossing coordinates along `axis`, per column.
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); np * nq];
        let vs = mesh.vertices();
        let r_below = template.origin[axis] - spacing[axis];
        for f in mesh.faces() {
            let (v0, v1, v2) = (vs[f[0]], vs[f[1]], vs[f[2]]);
            let bounds = |sel: usize| {
                let lo = v0[sel].min(v1[sel]).min(v2[sel]);
                let hi = v0[sel].max(v1[sel]).max(v2[sel]);
                (lo, hi)
            };
            let to_index_range = |(lo, hi): (f64, f64), sel: usize, n: usize| {
                let i0 = ((lo - template.origin[sel]) / spacing[sel]).floor() as i64 - 1;
                let i1 = ((hi - template.origin[sel]) / spacing[sel]).ceil() as i64 + 1;
                (i0.max(0) as usize, (i1.min(n as i64 - 1).max(-1)) as usize)
            };
            let (p0, p1) = to_index_range(bounds(p_axis), p_axis, np);
            let (q0, q1) = to_index_range(bounds(q_axis), q_axis, nq);
            if p0 > p1 || q0 > q1 {
                continue;
            }
            for qi in q0..=q1 {
                for pi in p0..=p1 {
                    let mut orig = Point3::origin();
                    orig[p_axis] = template.origin[p_axis] + pi as f64 * spacing[p_axis] + jp;
                    orig[q_axis] = template.origin[q_axis] + qi as f64 * spacing[q_axis] + jq;
                    orig[axis] = r_below;
                    if let Some(t) = ray_triangle(orig, dir, v0, v1, v2) {
                        columns[qi * np + pi].push(r_below + t);
                    }
                }
            }
        }

        for qi in 0..nq {
            for pi in 0..np {
                let col = &mut columns[qi * np + pi];
                if col.is_empty() {
                    continue;
                }
                col.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                let mut crossed = 0usize;
                for ri in 0..nr {
                    let r = template.origin[axis] + ri as f64 * spacing[axis];
                    while crossed < col.len() && col[crossed] < r {
                        crossed += 1;
                    }
                    if crossed % 2 == 1 {
                        let mut ijk = [0usize; 3];
                        ijk[axis] = ri;
                        ijk[p_axis] = pi;
                        ijk[q_axis] = qi;
                        let idx = template.index(ijk[0], ijk[1], ijk[2]);
                        votes[idx] += 1;
                    }
                }
            }
        }
    }

    let data = votes.into_iter().map(|v| (v >= 2) as u8).collect();
    LabelVolume::new(template.clone(), data).expect("oracle output matches template dims")
}
