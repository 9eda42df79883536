//! End-to-end surface reconstruction: rigid quaternion pre-alignment to the
//! labeled points, Adam optimization of spectral deformation coefficients
//! under the combined loss with a sharpness ramp, and metric reporting.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, Point3, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dvs::{self, Quadrature};
use crate::error::{Error, Result};
use crate::losses::{
    self, CombinedLossConfig, VolumePenalty, DEFAULT_LAMBDA_NORMAL, DEFAULT_LAMBDA_THICKNESS,
    DEFAULT_MIN_THICKNESS,
};
use crate::mesh::{good_angle_ratio, TriMesh};
use crate::spectral::{
    apply_ghd, build_laplacian, ghd_basis, GhdBasis, GhdCoefficients, LaplacianKind,
    DEFAULT_LAMBDA_NORM, DEFAULT_LAMBDA_UNW, DEFAULT_MODE_COUNT,
};
use crate::volume::{sample_points, LabelVolume, LabeledPoints, SliceStack, Supervision};

/// Iterations without improvement before a rigid restart gives up.
const RIGID_PATIENCE: usize = 20;
/// Deterministic restart orientations about the long (z) axis.
const RIGID_RESTARTS: usize = 8;
/// Canonical surface samples used by the rigid stage.
const RIGID_SURFACE_SAMPLES: usize = 500;
/// Cap on target points used by the rigid stage; more adds cost, not accuracy.
const RIGID_TARGET_CAP: usize = 4000;
/// Trailing window for the relative-loss-change convergence test.
const CONVERGENCE_WINDOW: usize = 20;
/// Occupancy sharpness used when binarizing for reported Dice.
const EVALUATION_BETA: f64 = 1e3;

/// Rigid (plus optional isotropic scale) placement of the canonical mesh:
/// `p ↦ scale·R(p) + translation`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: UnitQuaternion<f64>,
    /// Translation in mm.
    pub translation: Vector3<f64>,
    /// Isotropic scale; `None` means fixed at 1.
    pub scale: Option<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.rotation.as_ref().norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rotation quaternion norm {} is not 1",
                self.rotation.as_ref().norm()
            )));
        }
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "pose scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn apply_point(&self, p: Point3<f64>) -> Point3<f64> {
        let scaled = (self.rotation * p.coords) * self.scale.unwrap_or(1.0);
        Point3::from(scaled + self.translation)
    }

    pub fn apply_mesh(&self, mesh: &TriMesh) -> TriMesh {
        let vertices = mesh.vertices().iter().map(|&v| self.apply_point(v)).collect();
        TriMesh::new(vertices, mesh.faces().to_vec())
            .expect("rigid motion preserves mesh validity")
    }
}

/// Which parameterization the optimizer moves: spectral coefficients or raw
/// per-vertex displacements (an ablation that sacrifices mesh regularity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformationModel {
    #[default]
    Ghd,
    Vertex,
}

/// All knobs of one fit. Serializable as JSON; unknown or missing fields are
/// rejected by name so configs stay in sync with the code.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Number of spectral modes.
    pub mode_count: usize,
    /// Occupancy sharpness ramp: geometric from start to end over the ramp.
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_ramp_iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Coefficient-optimization iteration budget.
    pub iterations: usize,
    pub lambda_thickness: f64,
    /// Minimum acceptable wall thickness in mm.
    pub min_thickness: f64,
    /// Weight of the quadratic volume penalty; 0 disables it.
    pub lambda_volume: f64,
    /// Target volume in mm³; required when `lambda_volume > 0`.
    #[serde(default)]
    pub volume_target: Option<f64>,
    /// Weight of the squared per-iteration volume rate; 0 disables it.
    pub lambda_incompressibility: f64,
    /// Foreground and near-surface background sampling budgets.
    pub n_foreground: usize,
    pub n_background: usize,
    /// Background band width in mm around the foreground.
    pub background_band: f64,
    pub seed: u64,
    pub rigid_iterations: usize,
    pub rigid_learning_rate: f64,
    /// Whether the rigid stage also optimizes an isotropic scale.
    pub rigid_scale: bool,
    pub quadrature: Quadrature,
    /// Relative loss change over the trailing window that declares
    /// convergence.
    pub convergence_tolerance: f64,
    #[serde(default)]
    pub deformation: DeformationModel,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            mode_count: DEFAULT_MODE_COUNT,
            beta_start: 10.0,
            beta_end: 1e3,
            beta_ramp_iterations: 200,
            learning_rate: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            iterations: 400,
            lambda_thickness: DEFAULT_LAMBDA_THICKNESS,
            min_thickness: DEFAULT_MIN_THICKNESS,
            lambda_volume: 0.0,
            volume_target: None,
            lambda_incompressibility: 0.0,
            n_foreground: 20_000,
            n_background: 20_000,
            background_band: 10.0,
            seed: 0,
            rigid_iterations: 60,
            rigid_learning_rate: 0.25,
            rigid_scale: false,
            quadrature: Quadrature::Facet,
            convergence_tolerance: 1e-5,
            deformation: DeformationModel::Ghd,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta_start", self.beta_start),
            ("beta_end", self.beta_end),
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("min_thickness", self.min_thickness),
            ("background_band", self.background_band),
            ("rigid_learning_rate", self.rigid_learning_rate),
            ("convergence_tolerance", self.convergence_tolerance),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and positive, got {value}"
                )));
            }
        }
        for (name, value) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1), got {value}"
                )));
            }
        }
        for (name, value) in [
            ("lambda_thickness", self.lambda_thickness),
            ("lambda_volume", self.lambda_volume),
            ("lambda_incompressibility", self.lambda_incompressibility),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and nonnegative, got {value}"
                )));
            }
        }
        if self.mode_count == 0 {
            return Err(Error::InvalidParameter("mode_count must be at least 1".into()));
        }
        if self.n_foreground == 0 {
            return Err(Error::InvalidParameter(
                "n_foreground must be at least 1".into(),
            ));
        }
        if self.lambda_volume > 0.0 {
            match self.volume_target {
                Some(t) if t.is_finite() => {}
                _ => {
                    return Err(Error::InvalidParameter(
                        "lambda_volume > 0 requires a finite volume_target".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Occupancy sharpness at iteration `t`: geometric ramp from
    /// `beta_start` to `beta_end` over the ramp, flat afterwards.
    pub fn beta_at(&self, t: usize) -> f64 {
        if self.beta_ramp_iterations == 0 || t >= self.beta_ramp_iterations {
            return self.beta_end;
        }
        let progress = t as f64 / self.beta_ramp_iterations as f64;
        self.beta_start * (self.beta_end / self.beta_start).powf(progress)
    }
}

/// First and second moment accumulators of the Adam optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: DMatrix<f64>,
    second: DMatrix<f64>,
    step_count: u32,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            first: DMatrix::zeros(rows, cols),
            second: DMatrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    /// Standard bias-corrected update; returns the parameter step
    /// `−η·m̂/(√v̂ + ε)`.
    pub fn step(
        &mut self,
        gradient: &DMatrix<f64>,
        eta: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<DMatrix<f64>> {
        if gradient.shape() != self.first.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.first.nrows() * self.first.ncols(),
                got: gradient.nrows() * gradient.ncols(),
            });
        }
        self.step_count += 1;
        let correction1 = 1.0 - beta1.powi(self.step_count as i32);
        let correction2 = 1.0 - beta2.powi(self.step_count as i32);
        let mut step = DMatrix::zeros(gradient.nrows(), gradient.ncols());
        for ((m, v), (g, s)) in self
            .first
            .iter_mut()
            .zip(self.second.iter_mut())
            .zip(gradient.iter().zip(step.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *s = -eta * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(step)
    }
}

/// Rotation of `v` by the quaternion `(w, u)`, written so the expression is
/// defined for any `q` (it equals the rotation only at unit norm, where the
/// optimizer keeps it).
fn rotate_raw(w: f64, u: Vector3<f64>, v: Vector3<f64>) -> Vector3<f64> {
    v + (u.cross(&v)) * (2.0 * w) + u.cross(&u.cross(&v)) * 2.0
}

struct RigidParams {
    q: Vector4<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

struct RigidGradient {
    q: Vector4<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

/// One-sided mean squared distance from the posed samples to their nearest
/// targets, with its gradient with respect to pose parameters. The
/// correspondence is recomputed here, so the gradient treats it as fixed
/// (valid almost everywhere).
fn rigid_loss_and_gradient(
    params: &RigidParams,
    samples: &[Point3<f64>],
    targets: &[Point3<f64>],
    with_scale: bool,
) -> (f64, RigidGradient) {
    let w = params.q[0];
    let u = Vector3::new(params.q[1], params.q[2], params.q[3]);
    let inv_n = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut g_q = Vector4::zeros();
    let mut g_t = Vector3::zeros();
    let mut g_s = 0.0;
    for sample in samples {
        let v = sample.coords;
        let rotated = rotate_raw(w, u, v);
        let placed = rotated * params.scale + params.translation;
        let mut best = f64::INFINITY;
        let mut residual = Vector3::zeros();
        for target in targets {
            let r = placed - target.coords;
            let d = r.norm_squared();
            if d < best {
                best = d;
                residual = r;
            }
        }
        loss += best * inv_n;
        let r2 = residual * (2.0 * inv_n);
        g_t += r2;
        if with_scale {
            g_s += r2.dot(&rotated);
        }
        // c pairs with ∂(Rv): ∂/∂w is 2(u×v); directionally in u,
        // c·∂(Rv)·η = η·2[w(v×c) + (u×v)×c + c(u·v) − u(c·v)].
        let c = r2 * params.scale;
        g_q[0] += 2.0 * c.dot(&u.cross(&v));
        let gu = (v.cross(&c) * w + u.cross(&v).cross(&c) + c * u.dot(&v) - u * c.dot(&v)) * 2.0;
        g_q[1] += gu.x;
        g_q[2] += gu.y;
        g_q[3] += gu.z;
    }
    (
        loss,
        RigidGradient {
            q: g_q,
            translation: g_t,
            scale: g_s,
        },
    )
}

fn centroid(points: &[Point3<f64>]) -> Vector3<f64> {
    points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / points.len() as f64
}

/// Rough placement of the canonical mesh over the labeled foreground:
/// gradient descent on the one-sided chamfer distance from posed canonical
/// surface samples to foreground points, over quaternion and translation
/// (and isotropic scale when enabled). The phantom is symmetric about its
/// long axis, so the stage runs deterministic restart orientations about z
/// and keeps the best pose seen anywhere.
pub fn rigid_align(
    canonical: &TriMesh,
    target: &LabeledPoints,
    config: &FitConfig,
) -> Result<RigidPose> {
    config.validate()?;
    let foreground = target.foreground();
    if foreground.is_empty() {
        return Err(Error::InvalidParameter(
            "rigid alignment needs at least one foreground point".into(),
        ));
    }
    let samples = losses::sample_surface(canonical, RIGID_SURFACE_SAMPLES, config.seed)?;
    let targets: Vec<Point3<f64>> = if foreground.len() > RIGID_TARGET_CAP {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut picked = rand::seq::index::sample(&mut rng, foreground.len(), RIGID_TARGET_CAP)
            .into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| foreground[i]).collect()
    } else {
        foreground
    };

    let sample_center = centroid(&samples);
    let target_center = centroid(&targets);
    // Quaternion and scale gradients carry an extra factor of squared length
    // relative to translation; normalize their step size accordingly.
    let diag = canonical.bounding_box_diagonal().max(1e-9);
    let attitude_rate = config.rigid_learning_rate / (diag * diag);

    let mut best_loss = f64::INFINITY;
    let mut best = RigidParams {
        q: Vector4::new(1.0, 0.0, 0.0, 0.0),
        translation: target_center - sample_center,
        scale: 1.0,
    };
    let mut diverged = false;
    for restart in 0..RIGID_RESTARTS {
        let angle = 2.0 * std::f64::consts::PI * restart as f64 / RIGID_RESTARTS as f64;
        let q0 = Vector4::new((angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin());
        let u0 = Vector3::new(q0[1], q0[2], q0[3]);
        let mut params = RigidParams {
            q: q0,
            translation: target_center - rotate_raw(q0[0], u0, sample_center),
            scale: 1.0,
        };
        let mut restart_best = f64::INFINITY;
        let mut since_improvement = 0;
        let mut last_loss = f64::INFINITY;
        for _ in 0..config.rigid_iterations {
            let (loss, grad) =
                rigid_loss_and_gradient(&params, &samples, &targets, config.rigid_scale);
            last_loss = loss;
            if loss < best_loss {
                best_loss = loss;
                best = RigidParams {
                    q: params.q,
                    translation: params.translation,
                    scale: params.scale,
                };
            }
            if loss < restart_best - 1e-12 {
                restart_best = loss;
                since_improvement = 0;
            } else {
                since_improvement += 1;
                if since_improvement >= RIGID_PATIENCE {
                    break;
                }
            }
            params.translation -= grad.translation * config.rigid_learning_rate;
            let tangent = grad.q - params.q * grad.q.dot(&params.q);
            params.q = (params.q - tangent * attitude_rate).normalize();
            if config.rigid_scale {
                params.scale = (params.scale - grad.scale * attitude_rate).max(0.05);
            }
        }
        if last_loss.is_finite() && restart_best.is_finite() && last_loss > 1.5 * restart_best {
            diverged = true;
        }
    }
    if diverged {
        eprintln!("warning: rigid alignment diverged in at least one restart; keeping the best pose seen");
    }

    Ok(RigidPose {
        rotation: UnitQuaternion::from_quaternion(Quaternion::new(
            best.q[0], best.q[1], best.q[2], best.q[3],
        )),
        translation: best.translation,
        scale: config.rigid_scale.then_some(best.scale),
    })
}

/// Wall-clock bookkeeping for a fit; excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitTiming {
    pub wall_seconds: f64,
    pub unix_ms: u128,
}

/// Everything a fit reports: the loss trace, convergence, overlap and
/// surface metrics where a reference is available, mesh quality before and
/// after, and the final enclosed volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub loss_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub rigid: RigidPose,
    /// Binarized-occupancy Dice against dense reference labels.
    pub dice_3d: Option<f64>,
    /// Per-plane Dice when the supervision is a slice stack.
    pub dice_slices: Option<Vec<f64>>,
    pub chamfer_mm2: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub gar_before: f64,
    pub gar_after: f64,
    pub enclosed_volume_mm3: f64,
    pub timing: FitTiming,
}

/// Reference against which a fitted mesh is scored.
#[derive(Debug, Clone, Copy)]
pub enum EvalReference<'a> {
    Volume(&'a LabelVolume),
    Slices(&'a SliceStack),
    Mesh(&'a TriMesh),
}

/// Metrics of [`evaluate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub dice_3d: Option<f64>,
    pub dice_slices: Option<Vec<f64>>,
    pub chamfer_mm2: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub good_angle_ratio: f64,
    pub enclosed_volume_mm3: f64,
}

fn binary_dice(counts: (usize, usize, usize)) -> f64 {
    // (intersection, predicted, labeled); empty agreement is perfect.
    if counts.1 == 0 && counts.2 == 0 {
        return 1.0;
    }
    2.0 * counts.0 as f64 / (counts.1 + counts.2) as f64
}

fn occupancy_inside(mesh: &TriMesh, points: &[Point3<f64>]) -> Vec<bool> {
    let smooth = dvs::evaluate_occupancy(mesh, points, Quadrature::Facet, EVALUATION_BETA)
        .expect("positive beta")
        .smooth;
    smooth.iter().map(|&o| o >= 0.5).collect()
}

/// Mean agreement of binarized occupancy (threshold ½ at sharp relaxation)
/// with the reference labels at voxel centers, plane by plane to bound
/// memory.
fn volume_dice(mesh: &TriMesh, volume: &LabelVolume) -> f64 {
    let (nx, ny, nz) = volume.grid.dims;
    let mut counts = (0usize, 0usize, 0usize);
    let mut centers = Vec::with_capacity(nx * ny);
    for k in 0..nz {
        centers.clear();
        for j in 0..ny {
            for i in 0..nx {
                centers.push(volume.grid.center(i, j, k));
            }
        }
        let inside = occupancy_inside(mesh, &centers);
        for (idx, &is_in) in inside.iter().enumerate() {
            let i = idx % nx;
            let j = idx / nx;
            let labeled = volume.label(i, j, k) == 1;
            counts.1 += usize::from(is_in);
            counts.2 += usize::from(labeled);
            counts.0 += usize::from(is_in && labeled);
        }
    }
    binary_dice(counts)
}

fn slice_dices(mesh: &TriMesh, stack: &SliceStack) -> Vec<f64> {
    stack
        .slices
        .iter()
        .map(|slice| {
            let (nu, nv) = slice.dims;
            let mut centers = Vec::with_capacity(nu * nv);
            for j in 0..nv {
                for i in 0..nu {
                    centers.push(
                        slice.origin
                            + slice.u * (i as f64 * slice.spacing.0)
                            + slice.v * (j as f64 * slice.spacing.1),
                    );
                }
            }
            let inside = occupancy_inside(mesh, &centers);
            let mut counts = (0usize, 0usize, 0usize);
            for (&is_in, &label) in inside.iter().zip(&slice.data) {
                let labeled = label == 1;
                counts.1 += usize::from(is_in);
                counts.2 += usize::from(labeled);
                counts.0 += usize::from(is_in && labeled);
            }
            binary_dice(counts)
        })
        .collect()
}

/// Scores a mesh against a reference: binarized-occupancy Dice for volumes
/// and slice stacks, sampled chamfer/Hausdorff for meshes, plus angle
/// quality and enclosed volume of the mesh itself.
pub fn evaluate(
    mesh: &TriMesh,
    reference: EvalReference,
    samples: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    let mut metrics = EvalMetrics {
        dice_3d: None,
        dice_slices: None,
        chamfer_mm2: None,
        hausdorff_mm: None,
        good_angle_ratio: good_angle_ratio(mesh),
        enclosed_volume_mm3: losses::enclosed_volume(mesh),
    };
    match reference {
        EvalReference::Volume(volume) => {
            metrics.dice_3d = Some(volume_dice(mesh, volume));
        }
        EvalReference::Slices(stack) => {
            metrics.dice_slices = Some(slice_dices(mesh, stack));
        }
        EvalReference::Mesh(other) => {
            let pa = losses::sample_surface(mesh, samples, seed)?;
            let pb = losses::sample_surface(other, samples, seed)?;
            metrics.chamfer_mm2 = Some(losses::chamfer_points(&pa, &pb)?);
            metrics.hausdorff_mm = Some(losses::hausdorff_points(&pa, &pb)?);
        }
    }
    Ok(metrics)
}

/// `(V_ed − V_es)/V_ed`. Warns (but still answers) when the volumes are
/// outside the expected `0 ≤ V_es ≤ V_ed` range.
pub fn ejection_fraction(v_ed: f64, v_es: f64) -> Result<f64> {
    if !(v_ed.is_finite() && v_ed > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "end-diastolic volume must be positive, got {v_ed}"
        )));
    }
    if !(0.0..=v_ed).contains(&v_es) {
        eprintln!("warning: end-systolic volume {v_es} outside [0, {v_ed}]");
    }
    Ok((v_ed - v_es) / v_ed)
}

fn displaced_mesh(base: &TriMesh, displacement: &DMatrix<f64>) -> TriMesh {
    let vertices = base
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, v)| v + Vector3::new(displacement[(i, 0)], displacement[(i, 1)], displacement[(i, 2)]))
        .collect();
    TriMesh::new(vertices, base.faces().to_vec()).expect("displacement preserves indexing")
}

fn gradient_matrix(gradient: &[Vector3<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(gradient.len(), 3);
    for (i, g) in gradient.iter().enumerate() {
        m[(i, 0)] = g.x;
        m[(i, 1)] = g.y;
        m[(i, 2)] = g.z;
    }
    m
}

/// Full reconstruction pipeline: sample supervision points, rigidly align
/// the canonical mesh, build the spectral basis on the aligned mesh, then
/// run Adam on the deformation parameters under the combined loss with the
/// sharpness ramp. Deterministic under the config seed.
pub fn fit_ghd(
    canonical: &TriMesh,
    supervision: &Supervision,
    config: &FitConfig,
) -> Result<(TriMesh, GhdCoefficients, FitReport)> {
    config.validate()?;
    let start = Instant::now();
    if !canonical.is_closed() {
        return Err(Error::InvalidMesh(
            "fitting requires a closed canonical mesh".into(),
        ));
    }

    let points = sample_points(
        supervision,
        config.n_foreground,
        config.n_background,
        config.background_band,
        config.seed,
    );
    let pose = rigid_align(canonical, &points, config)?;
    let aligned = pose.apply_mesh(canonical);
    let gar_before = good_angle_ratio(&aligned);

    let basis: Option<GhdBasis> = match config.deformation {
        DeformationModel::Ghd => {
            let laplacian = build_laplacian(
                &aligned,
                LaplacianKind::Mixed,
                DEFAULT_LAMBDA_NORM,
                DEFAULT_LAMBDA_UNW,
            )?;
            Some(ghd_basis(&laplacian, config.mode_count)?)
        }
        DeformationModel::Vertex => None,
    };

    let parameter_rows = match config.deformation {
        DeformationModel::Ghd => config.mode_count,
        DeformationModel::Vertex => aligned.num_vertices(),
    };
    let mut parameters = DMatrix::<f64>::zeros(parameter_rows, 3);
    let mut adam = AdamState::new(parameter_rows, 3);
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = config.iterations == 0;
    let mut previous_mesh: Option<TriMesh> = None;

    let build_mesh = |params: &DMatrix<f64>| -> Result<TriMesh> {
        match (&basis, config.deformation) {
            (Some(b), DeformationModel::Ghd) => {
                let phi = GhdCoefficients::from_matrix(params.clone())?;
                apply_ghd(&aligned, b, &phi)
            }
            _ => Ok(displaced_mesh(&aligned, params)),
        }
    };

    let mut loss_config = CombinedLossConfig {
        beta: config.beta_start,
        quadrature: config.quadrature,
        geometry: dvs::GeometryMode::FullChain,
        lambda_thickness: config.lambda_thickness,
        min_thickness: config.min_thickness,
        lambda_normal: DEFAULT_LAMBDA_NORMAL,
        thickness_queries: None,
        volume_penalty: (config.lambda_volume > 0.0).then(|| VolumePenalty {
            weight: config.lambda_volume,
            target: config.volume_target.expect("validated"),
        }),
        incompressibility_weight: (config.lambda_incompressibility > 0.0)
            .then_some(config.lambda_incompressibility),
    };

    for t in 0..config.iterations {
        loss_config.beta = config.beta_at(t);
        let mesh_t = build_mesh(&parameters)?;
        let loss = losses::combined_loss(&mesh_t, &points, previous_mesh.as_ref(), &loss_config)
            .map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::NonFiniteGradient(t),
                other => other,
            })?;
        trace.push(loss.value);
        if t >= CONVERGENCE_WINDOW {
            let past = trace[t - CONVERGENCE_WINDOW];
            let change = (loss.value - past).abs() / past.abs().max(1e-12);
            if change < config.convergence_tolerance {
                converged = true;
                break;
            }
        }
        let gradient = match (&basis, config.deformation) {
            (Some(b), DeformationModel::Ghd) => {
                b.project_displacements(&loss.vertex_gradient)?.matrix().clone()
            }
            _ => gradient_matrix(&loss.vertex_gradient),
        };
        let step = adam.step(
            &gradient,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
        )?;
        parameters += step;
        if loss_config.incompressibility_weight.is_some() {
            previous_mesh = Some(mesh_t);
        }
    }

    let fitted = build_mesh(&parameters)?;
    let coefficients = match config.deformation {
        DeformationModel::Ghd => GhdCoefficients::from_matrix(parameters.clone())?,
        DeformationModel::Vertex => {
            // The ablation has no spectral coefficients; report the raw
            // displacement field projected onto nothing, i.e. zeros sized by
            // convention to the configured mode count.
            GhdCoefficients::zeros(config.mode_count)
        }
    };

    let (dice_3d, dice_slices) = match supervision {
        Supervision::Volume(volume) => (Some(volume_dice(&fitted, volume)), None),
        Supervision::Slices(stack) => (None, Some(slice_dices(&fitted, stack))),
    };

    let iterations_run = trace.len();
    let report = FitReport {
        loss_trace: trace,
        iterations_run,
        converged,
        rigid: pose,
        dice_3d,
        dice_slices,
        chamfer_mm2: None,
        hausdorff_mm: None,
        gar_before,
        gar_after: good_angle_ratio(&fitted),
        enclosed_volume_mm3: losses::enclosed_volume(&fitted),
        timing: FitTiming {
            wall_seconds: start.elapsed().as_secs_f64(),
            unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        },
    };
    Ok((fitted, coefficients, report))
}
