//! Loss terms for occupancy fitting: soft overlap, sampled surface
//! distances, wall thickness, and enclosed-volume terms, each with a
//! hand-derived vertex gradient where the optimizer needs one.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dvs::{self, GeometryMode, Quadrature, VertexGradient, DISTANCE_CLAMP};
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::volume::LabeledPoints;

/// Sample count per surface for the chamfer and Hausdorff metrics.
pub const DEFAULT_SURFACE_SAMPLES: usize = 10_000;
/// Weight of the wall-thickness penalty in the combined loss.
pub const DEFAULT_LAMBDA_THICKNESS: f64 = 0.01;
/// Minimum acceptable wall thickness in mm.
pub const DEFAULT_MIN_THICKNESS: f64 = 4.0;
/// Weight (mm per unit of normal mismatch) of the normal-consistency term in
/// the thickness pairing score.
pub const DEFAULT_LAMBDA_NORMAL: f64 = 1.0;

/// Soft Dice overlap `2 Σ o·y / (Σ o + Σ y)` between an occupancy field and
/// binary labels. Symmetric in its arguments and confined to `[0, 1]` when
/// the occupancy lies in `[0, 1]`. Two all-zero fields agree vacuously; that
/// case is defined as 1 and reported on stderr since the ratio is 0/0.
pub fn soft_dice(occupancy: &[f64], labels: &[u8]) -> Result<f64> {
    if occupancy.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: occupancy.len(),
            got: labels.len(),
        });
    }
    if let Some(i) = occupancy.iter().position(|o| !o.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "occupancy[{i}] is not finite"
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::InvalidParameter(format!(
            "labels[{i}] = {} is not binary",
            labels[i]
        )));
    }
    let mut intersection = 0.0;
    let mut denominator = 0.0;
    for (&o, &l) in occupancy.iter().zip(labels) {
        let y = f64::from(l);
        intersection += o * y;
        denominator += o + y;
    }
    if denominator == 0.0 {
        eprintln!("warning: soft dice of two empty fields; defining the overlap as 1");
        return Ok(1.0);
    }
    Ok(2.0 * intersection / denominator)
}

/// Deterministic area-uniform samples on the surface. Faces are drawn by
/// inverting the cumulative area distribution (zero-area faces are never
/// selected); positions use the square-root barycentric map, which is
/// uniform over each triangle.
pub fn sample_surface(mesh: &TriMesh, count: usize, seed: u64) -> Result<Vec<Point3<f64>>> {
    if count == 0 {
        return Err(Error::InvalidParameter(
            "surface sample count must be positive".into(),
        ));
    }
    let geom = mesh.face_geometry();
    let mut cumulative = Vec::with_capacity(geom.areas.len());
    let mut total = 0.0;
    for &a in &geom.areas {
        total += a;
        cumulative.push(total);
    }
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidMesh(format!(
            "cannot sample a surface with total area {total}"
        )));
    }
    let vs = mesh.vertices();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let target = rng.gen::<f64>() * total;
        let idx = cumulative
            .partition_point(|&c| c <= target)
            .min(geom.areas.len() - 1);
        let [a, b, c] = mesh.faces()[idx];
        let u = rng.gen::<f64>().sqrt();
        let v = rng.gen::<f64>();
        let (wa, wb, wc) = (1.0 - u, u * (1.0 - v), u * v);
        let p = vs[a].coords * wa + vs[b].coords * wb + vs[c].coords * wc;
        points.push(Point3::from(p));
    }
    Ok(points)
}

fn nearest_squared(from: &[Point3<f64>], to: &[Point3<f64>]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn check_nonempty(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter(
            "surface distance of an empty point set".into(),
        ));
    }
    Ok(())
}

/// Symmetric chamfer distance in mm² between two point sets: the sum of the
/// two directed means of squared nearest-neighbor distances.
pub fn chamfer_points(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64> {
    check_nonempty(a, b)?;
    let ab = nearest_squared(a, b);
    let ba = nearest_squared(b, a);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&ab) + mean(&ba))
}

/// Symmetric Hausdorff distance in mm between two point sets: the larger of
/// the two directed maxima of nearest-neighbor distances.
pub fn hausdorff_points(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64> {
    check_nonempty(a, b)?;
    let ab = nearest_squared(a, b);
    let ba = nearest_squared(b, a);
    let max = |v: &[f64]| v.iter().fold(0.0, |m: f64, &d| m.max(d));
    Ok(max(&ab).max(max(&ba)).sqrt())
}

/// Chamfer distance between two surfaces, each sampled area-uniformly with
/// `samples` points under the same seed. Identical meshes therefore receive
/// identical samples and a distance of exactly zero.
pub fn chamfer(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    let pa = sample_surface(a, samples, seed)?;
    let pb = sample_surface(b, samples, seed)?;
    chamfer_points(&pa, &pb)
}

/// Hausdorff distance between two surfaces, sampled like [`chamfer`].
pub fn hausdorff(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    let pa = sample_surface(a, samples, seed)?;
    let pb = sample_surface(b, samples, seed)?;
    hausdorff_points(&pa, &pb)
}

/// Closest point on the triangle `(a, b, c)` to `p`, with its barycentric
/// weights. Region tests follow the standard Voronoi-region enumeration;
/// the triangle is assumed non-degenerate.
pub fn closest_point_on_triangle(
    p: Point3<f64>,
    a: Point3<f64>,
    b: Point3<f64>,
    c: Point3<f64>,
) -> (Point3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Wall thickness measured from one query vertex.
#[derive(Debug, Clone)]
pub struct ThicknessSample {
    pub vertex: usize,
    /// Distance in mm to the closest point of the selected face;
    /// `f64::INFINITY` when no opposite-facing candidate exists.
    pub thickness: f64,
    /// Selected face, `None` when unpaired.
    pub face: Option<usize>,
    /// Closest point on the selected face.
    pub closest: Point3<f64>,
    /// Barycentric weights of `closest` in the selected face.
    pub barycentric: [f64; 3],
}

/// Wall thickness at each query vertex: over every face that is not
/// incident to the vertex and whose unit normal opposes the vertex normal
/// (`⟨N_face, N_vertex⟩ < 0`), pick the face minimizing
/// `distance + λ_normal·‖N_face + N_vertex‖` and report its distance term.
/// The normal-consistency term breaks ties toward anti-parallel walls
/// without biasing the returned distance. Queries with no candidate (open
/// sheets, isolated vertices) come back unpaired with infinite thickness.
pub fn thickness(
    mesh: &TriMesh,
    queries: &[usize],
    lambda_normal: f64,
) -> Result<Vec<ThicknessSample>> {
    if !(lambda_normal.is_finite() && lambda_normal >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda_normal must be finite and nonnegative, got {lambda_normal}"
        )));
    }
    let n = mesh.num_vertices();
    if let Some(&q) = queries.iter().find(|&&q| q >= n) {
        return Err(Error::InvalidParameter(format!(
            "thickness query vertex {q} out of range for {n} vertices"
        )));
    }
    let vertex_normals = mesh.vertex_normals();
    let geom = mesh.face_geometry();
    let vs = mesh.vertices();
    let mut samples = Vec::with_capacity(queries.len());
    for &q in queries {
        let nq = vertex_normals[q];
        let p = vs[q];
        let mut best_score = f64::INFINITY;
        let mut best = ThicknessSample {
            vertex: q,
            thickness: f64::INFINITY,
            face: None,
            closest: p,
            barycentric: [0.0; 3],
        };
        for (f, &[a, b, c]) in mesh.faces().iter().enumerate() {
            if a == q || b == q || c == q {
                continue;
            }
            if geom.normals[f].dot(&nq) >= 0.0 {
                continue;
            }
            let (closest, bary) = closest_point_on_triangle(p, vs[a], vs[b], vs[c]);
            let distance = (p - closest).norm();
            let score = distance + lambda_normal * (geom.normals[f] + nq).norm();
            if score < best_score {
                best_score = score;
                best.thickness = distance;
                best.face = Some(f);
                best.closest = closest;
                best.barycentric = bary;
            }
        }
        samples.push(best);
    }
    Ok(samples)
}

/// `x·σ(x)`, a smooth hinge: identity for large positive arguments, zero at
/// zero, exponentially small for negative arguments.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `σ(x)·(1 + x·(1 − σ(x)))`.
pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Thin-wall penalty `Σ_v SiLU(t_min − thickness_v)` over all paired
/// vertices, using the default normal-consistency weight. Walls thinner
/// than `t_min` are penalized roughly linearly in their deficit; thicker
/// walls contribute an exponentially small negative tail rather than zero,
/// which keeps the penalty differentiable through the minimum.
pub fn thickness_loss(mesh: &TriMesh, t_min: f64) -> Result<f64> {
    if !(t_min.is_finite() && t_min > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "t_min must be finite and positive, got {t_min}"
        )));
    }
    let queries: Vec<usize> = (0..mesh.num_vertices()).collect();
    let samples = thickness(mesh, &queries, DEFAULT_LAMBDA_NORMAL)?;
    Ok(samples
        .iter()
        .filter(|s| s.thickness.is_finite())
        .map(|s| silu(t_min - s.thickness))
        .sum())
}

/// Signed volume in mm³ enclosed by the oriented surface, one third of the
/// flux of the position field through the faces. Positive for outward
/// orientation. Open meshes yield an origin-dependent value and are
/// reported on stderr.
pub fn enclosed_volume(mesh: &TriMesh) -> f64 {
    if !mesh.is_closed() {
        eprintln!("warning: enclosed volume of an open mesh is origin-dependent");
    }
    mesh.signed_volume()
}

/// Gradient of [`enclosed_volume`] with respect to vertex positions: each
/// face `(a, b, c)` contributes `(v_b × v_c)/6` at `a` and cyclic shifts.
pub fn enclosed_volume_gradient(mesh: &TriMesh) -> VertexGradient {
    let vs = mesh.vertices();
    let mut grad = vec![Vector3::zeros(); mesh.num_vertices()];
    for &[a, b, c] in mesh.faces() {
        grad[a] += vs[b].coords.cross(&vs[c].coords) / 6.0;
        grad[b] += vs[c].coords.cross(&vs[a].coords) / 6.0;
        grad[c] += vs[a].coords.cross(&vs[b].coords) / 6.0;
    }
    grad
}

fn check_same_connectivity(before: &TriMesh, after: &TriMesh) -> Result<()> {
    if before.num_vertices() != after.num_vertices() || before.faces() != after.faces() {
        return Err(Error::InvalidParameter(
            "volume rate requires meshes with identical connectivity".into(),
        ));
    }
    Ok(())
}

/// Discrete rate of enclosed-volume change between two meshes with the same
/// connectivity, bilinear in area vectors and centroids:
/// `(1/3) Σ_F [⟨A_after − A_before, c_before⟩ + ⟨A_before, c_after − c_before⟩]`.
/// Exactly zero for identical meshes, zero up to roundoff for rigid
/// translations (closed surfaces have zero total area vector), and
/// first-order accurate in the displacement against the exact volume
/// difference.
pub fn volume_rate(before: &TriMesh, after: &TriMesh) -> Result<f64> {
    check_same_connectivity(before, after)?;
    let g0 = before.face_geometry();
    let g1 = after.face_geometry();
    let mut rate = 0.0;
    for f in 0..before.num_faces() {
        let da = g1.area_vectors[f] - g0.area_vectors[f];
        let dc = g1.centroids[f] - g0.centroids[f];
        rate += da.dot(&g0.centroids[f].coords) + g0.area_vectors[f].dot(&dc);
    }
    Ok(rate / 3.0)
}

/// Gradient of [`volume_rate`] with respect to the `after` vertices. The
/// `⟨A_after, c_before⟩` term differentiates like any area-vector pairing
/// (`½(v_b − v_c) × c_before` at slot `a`, cyclically); the
/// `⟨A_before, c_after⟩` term spreads `A_before/3` over the face corners.
fn volume_rate_gradient(before: &TriMesh, after: &TriMesh) -> VertexGradient {
    let g0 = before.face_geometry();
    let vs = after.vertices();
    let mut grad = vec![Vector3::zeros(); after.num_vertices()];
    for (f, &[a, b, c]) in after.faces().iter().enumerate() {
        let c0 = g0.centroids[f].coords;
        let spread = g0.area_vectors[f] / 9.0;
        grad[a] += (vs[b] - vs[c]).cross(&c0) / 6.0 + spread;
        grad[b] += (vs[c] - vs[a]).cross(&c0) / 6.0 + spread;
        grad[c] += (vs[a] - vs[b]).cross(&c0) / 6.0 + spread;
    }
    grad
}

/// Optional quadratic pull of the enclosed volume toward a target.
#[derive(Debug, Clone, Copy)]
pub struct VolumePenalty {
    pub weight: f64,
    /// Target volume in mm³.
    pub target: f64,
}

/// Weights and evaluation knobs for [`combined_loss`].
#[derive(Debug, Clone)]
pub struct CombinedLossConfig {
    /// Occupancy sharpness for the overlap term.
    pub beta: f64,
    pub quadrature: Quadrature,
    pub geometry: GeometryMode,
    /// Wall-thickness penalty weight; zero disables the term entirely.
    pub lambda_thickness: f64,
    /// Minimum acceptable wall thickness in mm.
    pub min_thickness: f64,
    /// Normal-consistency weight in the thickness pairing score.
    pub lambda_normal: f64,
    /// Query vertices for the thickness term; `None` means every vertex.
    pub thickness_queries: Option<Vec<usize>>,
    pub volume_penalty: Option<VolumePenalty>,
    /// Weight on the squared volume rate relative to the previous mesh;
    /// requires `previous` in [`combined_loss`].
    pub incompressibility_weight: Option<f64>,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        CombinedLossConfig {
            beta: 10.0,
            quadrature: Quadrature::Facet,
            geometry: GeometryMode::FullChain,
            lambda_thickness: DEFAULT_LAMBDA_THICKNESS,
            min_thickness: DEFAULT_MIN_THICKNESS,
            lambda_normal: DEFAULT_LAMBDA_NORMAL,
            thickness_queries: None,
            volume_penalty: None,
            incompressibility_weight: None,
        }
    }
}

/// Value and vertex gradient of the combined fitting loss, with the active
/// terms broken out.
#[derive(Debug, Clone)]
pub struct LossValue {
    /// `(1 − Dice) + λ_th·Σ SiLU(t_min − tᵢ) + λ_vol·(V − V*)² + λ_inc·rate²`.
    pub value: f64,
    pub dice: f64,
    /// Unweighted thin-wall penalty; zero when the term is disabled.
    pub thickness_penalty: f64,
    /// Enclosed volume, computed only when the volume penalty is active.
    pub enclosed_volume: Option<f64>,
    /// Volume rate vs `previous`, when the incompressibility term is active.
    pub volume_rate: Option<f64>,
    pub vertex_gradient: VertexGradient,
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "{name} must be finite and nonnegative, got {w}"
        )));
    }
    Ok(())
}

/// Combined fitting loss over labeled points, with its gradient with
/// respect to vertex positions. The overlap term chains the soft Dice
/// derivative through the occupancy relaxation and the winding-number
/// backward pass; gradients with respect to spectral coefficients follow by
/// projecting the vertex gradient onto the basis (`Uᵀ·G`), since vertex
/// positions are linear in the coefficients.
pub fn combined_loss(
    mesh: &TriMesh,
    points: &LabeledPoints,
    previous: Option<&TriMesh>,
    config: &CombinedLossConfig,
) -> Result<LossValue> {
    check_weight("lambda_thickness", config.lambda_thickness)?;
    if config.lambda_thickness > 0.0 && !(config.min_thickness.is_finite() && config.min_thickness > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "min_thickness must be finite and positive, got {}",
            config.min_thickness
        )));
    }

    let occ = dvs::evaluate_occupancy(mesh, &points.positions, config.quadrature, config.beta)?;
    let dice = soft_dice(&occ.smooth, &points.labels)?;
    let denominator: f64 = occ.smooth.iter().sum::<f64>()
        + points.labels.iter().map(|&l| f64::from(l)).sum::<f64>();
    let mut upstream = vec![0.0; points.positions.len()];
    if denominator > 0.0 {
        for (p, u) in upstream.iter_mut().enumerate() {
            // d(1 − Dice)/d raw_p = −(2·y_p − Dice)/denominator · s'(raw_p).
            let y = f64::from(points.labels[p]);
            let d_dice = (2.0 * y - dice) / denominator;
            *u = -d_dice * dvs::smooth_one_derivative(occ.raw[p], config.beta);
        }
    }
    let mut gradient = dvs::occupancy_gradient_with(
        mesh,
        &points.positions,
        &upstream,
        config.quadrature,
        config.geometry,
    )?;
    let mut value = 1.0 - dice;

    let mut thickness_penalty = 0.0;
    if config.lambda_thickness > 0.0 {
        let all_queries: Vec<usize>;
        let queries: &[usize] = match &config.thickness_queries {
            Some(qs) => qs,
            None => {
                all_queries = (0..mesh.num_vertices()).collect();
                &all_queries
            }
        };
        for sample in thickness(mesh, queries, config.lambda_normal)? {
            if !sample.thickness.is_finite() {
                continue;
            }
            let deficit = config.min_thickness - sample.thickness;
            thickness_penalty += silu(deficit);
            if sample.thickness < DISTANCE_CLAMP {
                continue;
            }
            // dL/d thickness = −λ_th·SiLU'(deficit); thickness moves along
            // the unit offset at the query and against it, barycentrically,
            // at the selected face.
            let face = sample.face.expect("finite thickness implies a face");
            let direction = (mesh.vertices()[sample.vertex] - sample.closest) / sample.thickness;
            let d_thickness = -config.lambda_thickness * silu_derivative(deficit);
            gradient[sample.vertex] += direction * d_thickness;
            for (slot, &v) in mesh.faces()[face].iter().enumerate() {
                gradient[v] -= direction * (d_thickness * sample.barycentric[slot]);
            }
        }
        value += config.lambda_thickness * thickness_penalty;
    }

    let mut volume = None;
    if let Some(penalty) = config.volume_penalty {
        check_weight("volume penalty weight", penalty.weight)?;
        if !penalty.target.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "volume target must be finite, got {}",
                penalty.target
            )));
        }
        let v = enclosed_volume(mesh);
        let excess = v - penalty.target;
        value += penalty.weight * excess * excess;
        let scale = 2.0 * penalty.weight * excess;
        for (g, dv) in gradient.iter_mut().zip(enclosed_volume_gradient(mesh)) {
            *g += dv * scale;
        }
        volume = Some(v);
    }

    let mut rate = None;
    if let Some(weight) = config.incompressibility_weight {
        check_weight("incompressibility weight", weight)?;
        let before = previous.ok_or_else(|| {
            Error::InvalidParameter(
                "incompressibility term requires the previous mesh".into(),
            )
        })?;
        let vr = volume_rate(before, mesh)?;
        value += weight * vr * vr;
        let scale = 2.0 * weight * vr;
        for (g, dr) in gradient.iter_mut().zip(volume_rate_gradient(before, mesh)) {
            *g += dr * scale;
        }
        rate = Some(vr);
    }

    if let Some(i) = gradient
        .iter()
        .position(|g| !(g.x.is_finite() && g.y.is_finite() && g.z.is_finite()))
    {
        return Err(Error::NonFiniteGradient(i));
    }
    Ok(LossValue {
        value,
        dice,
        thickness_penalty,
        enclosed_volume: volume,
        volume_rate: rate,
        vertex_gradient: gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::parity_inside;
    use rand::Rng;
    use crate::spectral::{
        apply_ghd, build_laplacian, ghd_basis, random_low_mode_deformation, GhdCoefficients,
        LaplacianKind, DEFAULT_LAMBDA_NORM, DEFAULT_LAMBDA_UNW,
    };
    use crate::synth::{make_icosphere, make_shell_phantom};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn origin() -> Point3<f64> {
        Point3::origin()
    }

    fn unit_cube() -> TriMesh {
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(0.0, 1.0, 1.0),
        ];
        let faces = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [2, 3, 7],
            [2, 7, 6],
            [0, 4, 7],
            [0, 7, 3],
            [1, 2, 6],
            [1, 6, 5],
        ];
        TriMesh::new(vertices, faces).unwrap()
    }

    /// Two horizontal unit squares: the lower one faces down, the upper one
    /// (at height `gap`) faces up, so each is the other's opposite wall.
    fn parallel_plates(gap: f64) -> TriMesh {
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, gap),
            Point3::new(1.0, 0.0, gap),
            Point3::new(1.0, 1.0, gap),
            Point3::new(0.0, 1.0, gap),
        ];
        let faces = vec![[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7]];
        TriMesh::new(vertices, faces).unwrap()
    }

    /// Closed shell between two concentric spheres; the inner boundary is
    /// reversed so its normals point out of the solid wall.
    fn sphere_shell(inner: f64, outer: f64, subdivisions: u32) -> TriMesh {
        let outer_mesh = make_icosphere(subdivisions, outer, origin()).unwrap();
        let inner_mesh = make_icosphere(subdivisions, inner, origin()).unwrap().reversed();
        outer_mesh.concatenated(&inner_mesh)
    }

    fn translated(mesh: &TriMesh, offset: Vector3<f64>) -> TriMesh {
        let vertices = mesh.vertices().iter().map(|v| v + offset).collect();
        TriMesh::new(vertices, mesh.faces().to_vec()).unwrap()
    }

    fn scaled(mesh: &TriMesh, factor: f64) -> TriMesh {
        let vertices = mesh.vertices().iter().map(|v| Point3::from(v.coords * factor)).collect();
        TriMesh::new(vertices, mesh.faces().to_vec()).unwrap()
    }

    fn rotated_translated(mesh: &TriMesh) -> TriMesh {
        let rotation =
            nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let offset = Vector3::new(5.0, -3.0, 2.0);
        let vertices = mesh
            .vertices()
            .iter()
            .map(|v| Point3::from(rotation * v.coords + offset))
            .collect();
        TriMesh::new(vertices, mesh.faces().to_vec()).unwrap()
    }

    /// Independent signed volume: sum of origin-tetrahedron determinants.
    fn tetra_sum_volume(mesh: &TriMesh) -> f64 {
        let vs = mesh.vertices();
        mesh.faces()
            .iter()
            .map(|&[a, b, c]| vs[a].coords.dot(&vs[b].coords.cross(&vs[c].coords)) / 6.0)
            .sum()
    }

    fn cube_lattice(center: Point3<f64>, half: f64, per_axis: usize) -> Vec<Point3<f64>> {
        let mut points = Vec::new();
        for i in 0..per_axis {
            for j in 0..per_axis {
                for k in 0..per_axis {
                    let t = |n: usize| (n as f64 + 0.5) / per_axis as f64 * 2.0 - 1.0;
                    points.push(center + Vector3::new(t(i), t(j), t(k)) * half);
                }
            }
        }
        points
    }

    // ---- soft dice ----

    #[test]
    fn dice_is_one_for_perfect_overlap() {
        let occupancy = [1.0, 0.0, 1.0, 0.0, 1.0];
        let labels = [1, 0, 1, 0, 1];
        assert_abs_diff_eq!(soft_dice(&occupancy, &labels).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dice_is_zero_for_disjoint_support() {
        let occupancy = [1.0, 1.0, 0.0, 0.0];
        let labels = [0, 0, 1, 1];
        assert_eq!(soft_dice(&occupancy, &labels).unwrap(), 0.0);
    }

    #[test]
    fn dice_of_half_occupancy_is_two_thirds() {
        let occupancy = [0.5; 6];
        let labels = [1; 6];
        assert_relative_eq!(soft_dice(&occupancy, &labels).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn dice_of_two_empty_fields_is_one() {
        assert_eq!(soft_dice(&[0.0, 0.0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_bad_inputs() {
        assert!(matches!(
            soft_dice(&[0.5], &[1, 0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            soft_dice(&[0.5, f64::NAN], &[1, 0]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            soft_dice(&[0.5, 0.5], &[1, 2]),
            Err(Error::InvalidParameter(_))
        ));
    }

    // ---- chamfer and hausdorff ----

    #[test]
    fn chamfer_of_offset_singletons_matches_hand_value() {
        let a = [origin()];
        let b = [Point3::new(3.0, 0.0, 0.0)];
        // 3² in each direction.
        assert_abs_diff_eq!(chamfer_points(&a, &b).unwrap(), 18.0, epsilon = 1e-12);
    }

    #[test]
    fn hausdorff_of_offset_singletons_matches_hand_value() {
        let a = [origin()];
        let b = [Point3::new(3.0, 0.0, 0.0)];
        assert_abs_diff_eq!(hausdorff_points(&a, &b).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn surface_distances_vanish_for_identical_meshes() {
        let mesh = make_icosphere(2, 10.0, origin()).unwrap();
        assert_abs_diff_eq!(chamfer(&mesh, &mesh, 500, 7).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hausdorff(&mesh, &mesh, 500, 7).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn surface_distances_of_concentric_spheres_match_the_gap() {
        let small = make_icosphere(3, 10.0, origin()).unwrap();
        let large = make_icosphere(3, 11.0, origin()).unwrap();
        let cd = chamfer(&small, &large, DEFAULT_SURFACE_SAMPLES, 11).unwrap();
        let hd = hausdorff(&small, &large, DEFAULT_SURFACE_SAMPLES, 11).unwrap();
        // 1 mm of separation: squared means near 1 in both directions, and a
        // worst case near 1; sampling adds a small positive tangential bias.
        assert_relative_eq!(cd, 2.0, max_relative = 0.1);
        assert_relative_eq!(hd, 1.0, max_relative = 0.1);
    }

    #[test]
    fn surface_distances_are_symmetric() {
        let a = make_icosphere(2, 8.0, origin()).unwrap();
        let b = make_icosphere(2, 9.5, Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(
            chamfer(&a, &b, 400, 3).unwrap(),
            chamfer(&b, &a, 400, 3).unwrap()
        );
        assert_eq!(
            hausdorff(&a, &b, 400, 3).unwrap(),
            hausdorff(&b, &a, 400, 3).unwrap()
        );
    }

    #[test]
    fn sampled_points_lie_on_the_surface_deterministically() {
        let mesh = make_icosphere(2, 10.0, origin()).unwrap();
        let points = sample_surface(&mesh, 2000, 42).unwrap();
        assert_eq!(points, sample_surface(&mesh, 2000, 42).unwrap());
        assert_ne!(points, sample_surface(&mesh, 2000, 43).unwrap());
        // Samples sit on chordal faces: radii at most the sphere radius and
        // no deeper than the sagitta of one face.
        let mut mean_radius = 0.0;
        for p in &points {
            let r = p.coords.norm();
            assert!(r <= 10.0 + 1e-9 && r > 9.0, "sample radius {r}");
            mean_radius += r / points.len() as f64;
        }
        assert!(mean_radius > 9.8, "mean radius {mean_radius}");
    }

    #[test]
    fn sampling_rejects_degenerate_requests() {
        let mesh = make_icosphere(1, 5.0, origin()).unwrap();
        assert!(matches!(
            sample_surface(&mesh, 0, 1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            chamfer_points(&[], &[origin()]),
            Err(Error::InvalidParameter(_))
        ));
    }

    // ---- point-to-triangle projection ----

    #[test]
    fn closest_point_covers_every_triangle_region() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(2.0, 0.0, 0.0);
        let c = Point3::new(0.0, 2.0, 0.0);
        let cases = [
            // (query, expected closest, expected barycentric)
            (Point3::new(0.5, 0.5, 1.0), Point3::new(0.5, 0.5, 0.0), [0.5, 0.25, 0.25]),
            (Point3::new(-1.0, -1.0, 0.0), a, [1.0, 0.0, 0.0]),
            (Point3::new(3.0, -0.5, 0.0), b, [0.0, 1.0, 0.0]),
            (Point3::new(-0.5, 3.0, 0.0), c, [0.0, 0.0, 1.0]),
            (Point3::new(1.0, -1.0, 0.0), Point3::new(1.0, 0.0, 0.0), [0.5, 0.5, 0.0]),
            (Point3::new(-1.0, 1.0, 0.0), Point3::new(0.0, 1.0, 0.0), [0.5, 0.0, 0.5]),
            (Point3::new(2.0, 2.0, 0.0), Point3::new(1.0, 1.0, 0.0), [0.0, 0.5, 0.5]),
        ];
        for (query, expected, bary) in cases {
            let (closest, weights) = closest_point_on_triangle(query, a, b, c);
            assert_abs_diff_eq!(closest, expected, epsilon = 1e-12);
            for (got, want) in weights.iter().zip(bary) {
                assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
            }
            let reconstructed =
                a.coords * weights[0] + b.coords * weights[1] + c.coords * weights[2];
            assert_abs_diff_eq!(Point3::from(reconstructed), closest, epsilon = 1e-12);
        }
    }

    // ---- thickness ----

    #[test]
    fn parallel_plates_measure_exact_separation() {
        let mesh = parallel_plates(3.0);
        let queries: Vec<usize> = (0..8).collect();
        let samples = thickness(&mesh, &queries, DEFAULT_LAMBDA_NORMAL).unwrap();
        for s in &samples {
            assert_abs_diff_eq!(s.thickness, 3.0, epsilon = 1e-12);
            assert!(s.face.is_some());
            assert_abs_diff_eq!((mesh.vertices()[s.vertex] - s.closest).norm(), 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn concentric_shell_thickness_matches_radial_gap() {
        let shell = sphere_shell(10.0, 12.0, 3);
        let queries: Vec<usize> = (0..shell.num_vertices()).collect();
        let samples = thickness(&shell, &queries, DEFAULT_LAMBDA_NORMAL).unwrap();
        for s in &samples {
            assert!(s.thickness.is_finite(), "vertex {} unpaired", s.vertex);
            assert_relative_eq!(s.thickness, 2.0, max_relative = 0.05);
        }
    }

    #[test]
    fn zero_normal_weight_reduces_to_nearest_opposite_face() {
        let shell = sphere_shell(10.0, 12.0, 2);
        let queries: Vec<usize> = (0..shell.num_vertices()).collect();
        let samples = thickness(&shell, &queries, 0.0).unwrap();
        let normals = shell.vertex_normals();
        let geom = shell.face_geometry();
        let vs = shell.vertices();
        for s in &samples {
            let mut nearest = f64::INFINITY;
            for (f, &[a, b, c]) in shell.faces().iter().enumerate() {
                let incident = a == s.vertex || b == s.vertex || c == s.vertex;
                if incident || geom.normals[f].dot(&normals[s.vertex]) >= 0.0 {
                    continue;
                }
                let (closest, _) = closest_point_on_triangle(vs[s.vertex], vs[a], vs[b], vs[c]);
                nearest = nearest.min((vs[s.vertex] - closest).norm());
            }
            assert_abs_diff_eq!(s.thickness, nearest, epsilon = 1e-9);
        }
    }

    #[test]
    fn thickness_is_rigid_invariant() {
        let shell = make_shell_phantom((30.0, 30.0, 45.0), 9.0, 0.75, 12).unwrap();
        let moved = rotated_translated(&shell);
        let queries: Vec<usize> = (0..shell.num_vertices()).collect();
        let before = thickness(&shell, &queries, DEFAULT_LAMBDA_NORMAL).unwrap();
        let after = thickness(&moved, &queries, DEFAULT_LAMBDA_NORMAL).unwrap();
        for (s0, s1) in before.iter().zip(&after) {
            if s0.thickness.is_finite() {
                assert_abs_diff_eq!(s0.thickness, s1.thickness, epsilon = 1e-9);
            } else {
                assert!(!s1.thickness.is_finite());
            }
        }
    }

    #[test]
    fn open_sheet_queries_come_back_unpaired() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let samples = thickness(&mesh, &[0, 1, 2], DEFAULT_LAMBDA_NORMAL).unwrap();
        for s in &samples {
            assert!(s.thickness.is_infinite());
            assert!(s.face.is_none());
        }
    }

    #[test]
    fn thickness_rejects_bad_queries() {
        let mesh = parallel_plates(3.0);
        assert!(matches!(
            thickness(&mesh, &[8], DEFAULT_LAMBDA_NORMAL),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            thickness(&mesh, &[0], -1.0),
            Err(Error::InvalidParameter(_))
        ));
    }

    // ---- thickness loss ----

    #[test]
    fn thickness_loss_is_zero_at_the_exact_minimum() {
        let mesh = parallel_plates(4.0);
        assert_eq!(thickness_loss(&mesh, 4.0).unwrap(), 0.0);
    }

    #[test]
    fn unit_deficit_costs_one_silu_per_vertex() {
        let mesh = parallel_plates(3.0);
        let loss = thickness_loss(&mesh, 4.0).unwrap();
        // SiLU(1) = 1/(1 + e⁻¹) ≈ 0.73106 per vertex, eight vertices.
        assert_abs_diff_eq!(silu(1.0), 0.73106, epsilon = 5e-6);
        assert_relative_eq!(loss, 8.0 * silu(1.0), epsilon = 1e-12);
    }

    #[test]
    fn generous_walls_leave_a_negligible_negative_tail() {
        let mesh = parallel_plates(9.0);
        let loss = thickness_loss(&mesh, 4.0).unwrap();
        assert!(loss <= 0.0, "tail should be non-positive, got {loss}");
        assert!(loss.abs() <= 8.0 * 0.0335, "tail too large: {loss}");
    }

    // ---- enclosed volume ----

    #[test]
    fn unit_cube_volume_is_one() {
        assert_abs_diff_eq!(enclosed_volume(&unit_cube()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn icosphere_volume_matches_analytic_and_tetra_sum() {
        let mesh = make_icosphere(3, 10.0, origin()).unwrap();
        let volume = enclosed_volume(&mesh);
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        assert_relative_eq!(volume, analytic, max_relative = 0.02);
        assert_relative_eq!(volume, tetra_sum_volume(&mesh), max_relative = 1e-9);
    }

    #[test]
    fn reversing_orientation_negates_the_volume() {
        let mesh = make_icosphere(2, 6.0, Point3::new(1.0, 2.0, 3.0)).unwrap();
        assert_relative_eq!(
            enclosed_volume(&mesh.reversed()),
            -enclosed_volume(&mesh),
            epsilon = 1e-12
        );
    }

    #[test]
    fn closed_volume_is_translation_invariant() {
        let mesh = make_icosphere(2, 7.0, origin()).unwrap();
        let moved = translated(&mesh, Vector3::new(13.0, -5.0, 9.0));
        assert_relative_eq!(
            enclosed_volume(&moved),
            enclosed_volume(&mesh),
            max_relative = 1e-9
        );
    }

    #[test]
    fn volume_gradient_matches_finite_differences() {
        let mesh = make_icosphere(1, 3.0, origin()).unwrap();
        let grad = enclosed_volume_gradient(&mesh);
        let h = 1e-5;
        for &(v, axis) in &[(0usize, 0usize), (3, 1), (7, 2), (20, 0), (33, 2)] {
            let probe = |delta: f64| {
                let mut vertices = mesh.vertices().to_vec();
                vertices[v][axis] += delta;
                enclosed_volume(&TriMesh::new(vertices, mesh.faces().to_vec()).unwrap())
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            assert_relative_eq!(grad[v][axis], fd, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    // ---- volume rate ----

    #[test]
    fn volume_rate_is_exactly_zero_for_identical_meshes() {
        let mesh = make_icosphere(2, 10.0, origin()).unwrap();
        assert_eq!(volume_rate(&mesh, &mesh).unwrap(), 0.0);
    }

    #[test]
    fn volume_rate_vanishes_under_translation() {
        let mesh = make_icosphere(2, 10.0, origin()).unwrap();
        let moved = translated(&mesh, Vector3::new(2.0, 1.0, -1.0));
        let bound = 1e-6 * enclosed_volume(&mesh).abs();
        assert!(volume_rate(&mesh, &moved).unwrap().abs() <= bound);
    }

    #[test]
    fn volume_rate_matches_uniform_scaling_hand_value() {
        let mesh = make_icosphere(3, 10.0, origin()).unwrap();
        let epsilon = 1e-3;
        let grown = scaled(&mesh, 1.0 + epsilon);
        let rate = volume_rate(&mesh, &grown).unwrap();
        let volume = enclosed_volume(&mesh);
        // d/dε of (1+ε)³V at 0 is 3V; the discrete rate keeps the ε² term.
        assert_relative_eq!(rate, 3.0 * epsilon * volume, max_relative = 0.05);
        let exact_difference = enclosed_volume(&grown) - volume;
        assert_relative_eq!(rate, exact_difference, max_relative = 0.01);
    }

    #[test]
    fn volume_rate_rejects_connectivity_mismatch() {
        let a = make_icosphere(1, 10.0, origin()).unwrap();
        let b = make_icosphere(2, 10.0, origin()).unwrap();
        assert!(matches!(
            volume_rate(&a, &b),
            Err(Error::InvalidParameter(_))
        ));
    }

    // ---- combined loss ----

    fn labeled_sphere_points() -> (TriMesh, LabeledPoints) {
        let mesh = make_icosphere(2, 10.0, origin()).unwrap();
        let positions = cube_lattice(origin(), 12.0, 6);
        let labels = positions
            .iter()
            .map(|p| u8::from(p.coords.norm() < 10.0))
            .collect();
        let points = LabeledPoints {
            positions,
            labels,
            truncated: false,
        };
        (mesh, points)
    }

    #[test]
    fn disabling_thickness_leaves_the_dice_complement() {
        let (mesh, points) = labeled_sphere_points();
        let config = CombinedLossConfig {
            lambda_thickness: 0.0,
            ..CombinedLossConfig::default()
        };
        let loss = combined_loss(&mesh, &points, None, &config).unwrap();
        let occ =
            dvs::evaluate_occupancy(&mesh, &points.positions, config.quadrature, config.beta)
                .unwrap();
        let dice = soft_dice(&occ.smooth, &points.labels).unwrap();
        assert_eq!(loss.value, 1.0 - dice);
        assert_eq!(loss.thickness_penalty, 0.0);
        assert!(loss.enclosed_volume.is_none() && loss.volume_rate.is_none());
    }

    #[test]
    fn perfect_fit_with_generous_walls_costs_nearly_nothing() {
        let shell = sphere_shell(10.0, 34.0, 2);
        let positions = cube_lattice(origin(), 38.0, 7);
        let inside = parity_inside(&shell, &positions);
        let points = LabeledPoints {
            positions,
            labels: inside.iter().map(|&b| u8::from(b)).collect(),
            truncated: false,
        };
        let config = CombinedLossConfig {
            beta: 1000.0,
            ..CombinedLossConfig::default()
        };
        let loss = combined_loss(&shell, &points, None, &config).unwrap();
        // Every pairing measures at least t_min + 5, so the loss is bounded
        // by the SiLU tail at that margin plus relaxation leakage.
        let tail_bound = DEFAULT_LAMBDA_THICKNESS * shell.num_vertices() as f64 * silu(-5.0).abs();
        assert!(loss.value.abs() <= tail_bound, "loss {}", loss.value);
        assert!(loss.value.abs() <= 5e-3, "loss {}", loss.value);
        assert!(loss.dice > 0.999);
    }

    #[test]
    fn combined_loss_requires_previous_mesh_for_incompressibility() {
        let (mesh, points) = labeled_sphere_points();
        let config = CombinedLossConfig {
            incompressibility_weight: Some(1.0),
            ..CombinedLossConfig::default()
        };
        assert!(matches!(
            combined_loss(&mesh, &points, None, &config),
            Err(Error::InvalidParameter(_))
        ));
    }

    /// Deformed shell, spectral basis, and supervision labeled against the
    /// canonical shell, for gradient checks through the full chain.
    fn fd_fixture() -> (TriMesh, crate::spectral::GhdBasis, GhdCoefficients, LabeledPoints) {
        let canonical = make_shell_phantom((30.0, 30.0, 45.0), 9.0, 0.75, 12).unwrap();
        let laplacian = build_laplacian(
            &canonical,
            LaplacianKind::Mixed,
            DEFAULT_LAMBDA_NORM,
            DEFAULT_LAMBDA_UNW,
        )
        .unwrap();
        let basis = ghd_basis(&laplacian, 12).unwrap();
        let phi = random_low_mode_deformation(
            &basis,
            2..12,
            0.02 * canonical.bounding_box_diagonal(),
            421,
        )
        .unwrap();
        let positions = cube_lattice(Point3::new(0.0, 0.0, 0.0), 34.0, 6);
        let inside = parity_inside(&canonical, &positions);
        let points = LabeledPoints {
            positions,
            labels: inside.iter().map(|&b| u8::from(b)).collect(),
            truncated: false,
        };
        (canonical, basis, phi, points)
    }

    fn coefficient_gradient(
        canonical: &TriMesh,
        basis: &crate::spectral::GhdBasis,
        phi: &GhdCoefficients,
        points: &LabeledPoints,
        previous: Option<&TriMesh>,
        config: &CombinedLossConfig,
    ) -> (LossValue, DMatrix<f64>) {
        let mesh = apply_ghd(canonical, basis, phi).unwrap();
        let loss = combined_loss(&mesh, points, previous, config).unwrap();
        let projected = basis.project_displacements(&loss.vertex_gradient).unwrap();
        let matrix = projected.matrix().clone();
        (loss, matrix)
    }

    fn loss_at(
        canonical: &TriMesh,
        basis: &crate::spectral::GhdBasis,
        phi: &GhdCoefficients,
        points: &LabeledPoints,
        previous: Option<&TriMesh>,
        config: &CombinedLossConfig,
    ) -> f64 {
        let mesh = apply_ghd(canonical, basis, phi).unwrap();
        combined_loss(&mesh, points, previous, config).unwrap().value
    }

    fn check_coefficient_gradient_by_fd(
        config: &CombinedLossConfig,
        previous: Option<&TriMesh>,
        probes: usize,
        seed: u64,
    ) {
        let (canonical, basis, phi, points) = fd_fixture();
        let (_, grad) =
            coefficient_gradient(&canonical, &basis, &phi, &points, previous, config);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h = 1e-3;
        for _ in 0..probes {
            let mode = rng.gen_range(0..basis.mode_count());
            let axis = rng.gen_range(0..3);
            let mut plus = phi.clone();
            plus.matrix_mut()[(mode, axis)] += h;
            let mut minus = phi.clone();
            minus.matrix_mut()[(mode, axis)] -= h;
            let fd = (loss_at(&canonical, &basis, &plus, &points, previous, config)
                - loss_at(&canonical, &basis, &minus, &points, previous, config))
                / (2.0 * h);
            let analytic = grad[(mode, axis)];
            let scale = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() <= 1e-3 * scale,
                "mode {mode} axis {axis}: analytic {analytic}, fd {fd}"
            );
        }
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        check_coefficient_gradient_by_fd(&CombinedLossConfig::default(), None, 10, 99);
    }

    #[test]
    fn volume_term_gradients_match_finite_differences() {
        let (canonical, basis, phi, _) = fd_fixture();
        let base = apply_ghd(&canonical, &basis, &phi).unwrap();
        let previous = scaled(&base, 1.002);
        let target = 0.9 * enclosed_volume(&base);
        let config = CombinedLossConfig {
            lambda_thickness: 0.0,
            volume_penalty: Some(VolumePenalty {
                weight: 1e-8,
                target,
            }),
            incompressibility_weight: Some(1e-6),
            ..CombinedLossConfig::default()
        };
        check_coefficient_gradient_by_fd(&config, Some(&previous), 4, 7);
    }

    #[test]
    fn coefficient_gradient_is_the_projected_vertex_gradient() {
        let (canonical, basis, phi, points) = fd_fixture();
        let config = CombinedLossConfig::default();
        let (loss, grad) =
            coefficient_gradient(&canonical, &basis, &phi, &points, None, &config);
        let mut dense = DMatrix::zeros(basis.vertex_count(), 3);
        for (i, g) in loss.vertex_gradient.iter().enumerate() {
            dense[(i, 0)] = g.x;
            dense[(i, 1)] = g.y;
            dense[(i, 2)] = g.z;
        }
        let direct = basis.modes().transpose() * dense;
        for r in 0..grad.nrows() {
            for c in 0..3 {
                assert_abs_diff_eq!(grad[(r, c)], direct[(r, c)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn loss_reconstructs_from_its_reported_terms() {
        let (canonical, basis, phi, points) = fd_fixture();
        let mesh = apply_ghd(&canonical, &basis, &phi).unwrap();
        let previous = scaled(&mesh, 1.001);
        let config = CombinedLossConfig {
            volume_penalty: Some(VolumePenalty {
                weight: 1e-8,
                target: 1.05 * enclosed_volume(&mesh),
            }),
            incompressibility_weight: Some(1e-6),
            ..CombinedLossConfig::default()
        };
        let loss = combined_loss(&mesh, &points, Some(&previous), &config).unwrap();
        let volume = loss.enclosed_volume.unwrap();
        let rate = loss.volume_rate.unwrap();
        let penalty = config.volume_penalty.unwrap();
        let rebuilt = (1.0 - loss.dice)
            + config.lambda_thickness * loss.thickness_penalty
            + penalty.weight * (volume - penalty.target).powi(2)
            + config.incompressibility_weight.unwrap() * rate * rate;
        assert_relative_eq!(loss.value, rebuilt, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dice_is_bounded_and_symmetric(
            pairs in proptest::collection::vec((0.0f64..=1.0, 0u8..=1), 1..40)
        ) {
            let occupancy: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let dice = soft_dice(&occupancy, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&dice));

            let rounded: Vec<u8> = occupancy.iter().map(|&o| u8::from(o >= 0.5)).collect();
            let as_field: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
            let forward = soft_dice(
                &rounded.iter().map(|&r| f64::from(r)).collect::<Vec<_>>(),
                &labels,
            )
            .unwrap();
            let swapped = soft_dice(&as_field, &rounded).unwrap();
            prop_assert!((forward - swapped).abs() < 1e-15);
        }

        #[test]
        fn point_set_distances_are_symmetric_and_zero_on_identity(
            a in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..12),
            b in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..12),
        ) {
            let to_points = |v: &[(f64, f64, f64)]| -> Vec<Point3<f64>> {
                v.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect()
            };
            let pa = to_points(&a);
            let pb = to_points(&b);
            prop_assert_eq!(chamfer_points(&pa, &pa).unwrap(), 0.0);
            prop_assert_eq!(hausdorff_points(&pa, &pa).unwrap(), 0.0);
            prop_assert_eq!(
                chamfer_points(&pa, &pb).unwrap(),
                chamfer_points(&pb, &pa).unwrap()
            );
            prop_assert_eq!(
                hausdorff_points(&pa, &pb).unwrap(),
                hausdorff_points(&pb, &pa).unwrap()
            );
        }

        #[test]
        fn closest_point_is_never_beaten_by_barycentric_search(
            q in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
            u in 0.05f64..0.95,
            v in 0.05f64..0.95,
        ) {
            let a = Point3::new(0.0, 0.0, 0.0);
            let b = Point3::new(2.0, 0.0, 0.0);
            let c = Point3::new(0.4, 1.7, 0.0);
            let query = Point3::new(q.0, q.1, q.2);
            let (closest, _) = closest_point_on_triangle(query, a, b, c);
            let best = (query - closest).norm();
            // Coarse interior sweep: no sampled point may be closer.
            for i in 0..=10 {
                for j in 0..=(10 - i) {
                    let (s, t) = (i as f64 / 10.0, j as f64 / 10.0);
                    let p = a.coords * (1.0 - s - t) + b.coords * s + c.coords * t;
                    prop_assert!((query - Point3::from(p)).norm() >= best - 1e-9);
                }
            }
            // And the returned point is itself on the triangle.
            let _ = (u, v);
        }
    }
}
