//! Graph Laplacians, low-frequency eigenbases, and harmonic mesh deformation.
//!
//! A mesh is viewed as a weighted graph; its Laplacian's lowest eigenvectors
//! form smooth "surface waves" that serve as a deformation basis. Deforming
//! through a truncated basis moves vertices collectively and preserves
//! triangle quality far better than free per-vertex displacement.
//!
//! Four edge weightings are supported: unweighted, inverse-distance,
//! cotangent, and a mixed form that adds small inverse-distance and
//! unweighted terms to the cotangent Laplacian to damp the effect of
//! negative cotangent weights at obtuse angle pairs.
//!
//! Bases can be saved as a JSON header (`.ghb.json`) plus a raw
//! little-endian `f64` payload (`.ghb.bin`) holding the mode matrix
//! column by column.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::linalg::SymmetricEigen;
use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::volume::{format_err, sibling, stem_for};

/// Inverse-distance share of the mixed Laplacian.
pub const DEFAULT_LAMBDA_NORM: f64 = 0.1;
/// Unweighted share of the mixed Laplacian.
pub const DEFAULT_LAMBDA_UNW: f64 = 0.05;
/// Default deformation mode count (6², covering six whole frequency bands:
/// sphere-like spectra carry 2k−1 modes in the k-th band, so square totals
/// avoid truncating a band partway).
pub const DEFAULT_MODE_COUNT: usize = 36;
/// Largest vertex count solved with a dense symmetric eigendecomposition;
/// larger graphs use the iterative block solver.
pub const DENSE_EIGEN_LIMIT: usize = 3000;

/// Fixed seed for the iterative eigensolver's starting block, so bases are
/// reproducible across runs and machines.
const EIGEN_INIT_SEED: u64 = 0x6772_6170_686c_6170;

/// Edge weighting used to assemble a [`GraphLaplacian`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKind {
    /// Every edge weighs 1.
    Unweighted,
    /// Edge (i,j) weighs 1/‖x_j − x_i‖.
    InvDistance,
    /// Edge (i,j) weighs (cot α + cot β)/2 over the angles opposite the
    /// edge in its incident faces.
    Cotangent,
    /// Cotangent plus λ_norm·inverse-distance plus λ_unw·unweighted.
    Mixed,
}

/// Eigensolver selection for [`ghd_basis_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    /// Dense up to [`DENSE_EIGEN_LIMIT`] vertices, iterative above.
    Auto,
    /// Full dense symmetric eigendecomposition.
    Dense,
    /// Blocked preconditioned conjugate-gradient eigensolver.
    Iterative,
}

// ---------------------------------------------------------------------------
// Graph Laplacian
// ---------------------------------------------------------------------------

/// Symmetric graph Laplacian L = D − W stored as edge weights plus diagonal.
///
/// Off-diagonal entries are L_ij = −w_ij on graph edges and zero elsewhere;
/// the diagonal is the row sum of incident weights, so every row sums to
/// zero by construction.
#[derive(Debug, Clone)]
pub struct GraphLaplacian {
    size: usize,
    kind: LaplacianKind,
    /// (λ_norm, λ_unw) when `kind` is `Mixed`.
    mixing: Option<(f64, f64)>,
    /// Undirected edges (i, j) with i < j, ascending.
    edges: Vec<(usize, usize)>,
    /// Edge weights w_ij aligned with `edges`.
    weights: Vec<f64>,
    diagonal: Vec<f64>,
}

impl GraphLaplacian {
    fn from_weight_map(
        size: usize,
        kind: LaplacianKind,
        mixing: Option<(f64, f64)>,
        map: BTreeMap<(usize, usize), f64>,
    ) -> Self {
        let mut edges = Vec::with_capacity(map.len());
        let mut weights = Vec::with_capacity(map.len());
        let mut diagonal = vec![0.0; size];
        for ((i, j), w) in map {
            diagonal[i] += w;
            diagonal[j] += w;
            edges.push((i, j));
            weights.push(w);
        }
        GraphLaplacian {
            size,
            kind,
            mixing,
            edges,
            weights,
            diagonal,
        }
    }

    /// Builds a Laplacian directly from weighted graph edges (no mesh
    /// required). Duplicate edges accumulate their weights.
    pub fn from_weighted_edges(
        size: usize,
        edges: &[(usize, usize, f64)],
        kind: LaplacianKind,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidParameter("empty graph".into()));
        }
        let mut map = BTreeMap::new();
        for &(i, j, w) in edges {
            if i == j {
                return Err(Error::InvalidParameter(format!("self loop at vertex {i}")));
            }
            if i >= size || j >= size {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i}, {j}) exceeds graph size {size}"
                )));
            }
            if !w.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite weight on edge ({i}, {j})"
                )));
            }
            *map.entry((i.min(j), i.max(j))).or_insert(0.0) += w;
        }
        Ok(Self::from_weight_map(size, kind, None, map))
    }

    /// Number of graph vertices.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    /// Mixing weights (λ_norm, λ_unw); `None` unless the kind is `Mixed`.
    pub fn mixing_weights(&self) -> Option<(f64, f64)> {
        self.mixing
    }

    /// Adjacency weight w_ij, zero when (i,j) is not a graph edge.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        match self.edges.binary_search(&key) {
            Ok(pos) => self.weights[pos],
            Err(_) => 0.0,
        }
    }

    /// Diagonal entries L_ii (weighted vertex degrees).
    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    /// Largest entry magnitude over the whole matrix.
    pub fn max_abs_entry(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.diagonal.iter())
            .fold(0.0, |acc: f64, &v| acc.max(v.abs()))
    }

    /// y = L x. Panics when `x` has the wrong length.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.size, "vector length must match graph size");
        let mut y: Vec<f64> = self
            .diagonal
            .iter()
            .zip(x)
            .map(|(&d, &v)| d * v)
            .collect();
        for (&(i, j), &w) in self.edges.iter().zip(&self.weights) {
            y[i] -= w * x[j];
            y[j] -= w * x[i];
        }
        y
    }

    /// Quadratic form xᵀLx.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(&y, &v)| y * v).sum()
    }

    /// Dense copy of the matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for i in 0..self.size {
            m[(i, i)] = self.diagonal[i];
        }
        for (&(i, j), &w) in self.edges.iter().zip(&self.weights) {
            m[(i, j)] = -w;
            m[(j, i)] = -w;
        }
        m
    }

    /// Y = L X, column by column.
    fn mul_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.size);
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        for c in 0..x.ncols() {
            for i in 0..self.size {
                y[(i, c)] = self.diagonal[i] * x[(i, c)];
            }
            for (&(i, j), &w) in self.edges.iter().zip(&self.weights) {
                y[(i, c)] -= w * x[(j, c)];
                y[(j, c)] -= w * x[(i, c)];
            }
        }
        y
    }
}

/// Per-edge cotangent weights (cot α + cot β)/2; boundary edges take half
/// their single opposite cotangent.
fn cotangent_weights(mesh: &TriMesh) -> Result<BTreeMap<(usize, usize), f64>> {
    let geometry = mesh.face_geometry();
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (f, face) in mesh.faces().iter().enumerate() {
        if geometry.degenerate[f] {
            return Err(Error::InvalidMesh(format!(
                "degenerate face {f} has no interior angles for cotangent weights"
            )));
        }
        for corner in 0..3 {
            let apex = mesh.vertices()[face[corner]];
            let b = face[(corner + 1) % 3];
            let c = face[(corner + 2) % 3];
            let u = mesh.vertices()[b] - apex;
            let v = mesh.vertices()[c] - apex;
            let cot = u.dot(&v) / u.cross(&v).norm();
            let key = (b.min(c), b.max(c));
            let entry = sums.entry(key).or_insert((0.0, 0));
            entry.0 += cot;
            entry.1 += 1;
        }
    }
    let offending: Vec<(usize, usize)> = sums
        .iter()
        .filter(|(_, &(_, count))| count > 2)
        .map(|(&edge, _)| edge)
        .collect();
    if !offending.is_empty() {
        return Err(Error::NonManifoldEdges(offending));
    }
    Ok(sums.into_iter().map(|(e, (sum, _))| (e, sum / 2.0)).collect())
}

/// Per-edge weights 1/‖x_j − x_i‖, optionally rescaled by `scale`.
fn inv_distance_weights(mesh: &TriMesh, scale: f64) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut map = BTreeMap::new();
    for (i, j) in mesh.edges() {
        let w = scale / (mesh.vertices()[j] - mesh.vertices()[i]).norm();
        if !w.is_finite() {
            return Err(Error::CoincidentVertices(i, j));
        }
        map.insert((i, j), w);
    }
    Ok(map)
}

/// Assembles the graph Laplacian of a mesh under the requested weighting.
///
/// `lambda_norm` and `lambda_unw` are the inverse-distance and unweighted
/// shares of the mixed kind and are ignored otherwise. The mixed kind
/// computes inverse-distance weights at unit bounding-box diagonal scale,
/// so the shares are dimensionless and independent of mesh units.
pub fn build_laplacian(
    mesh: &TriMesh,
    kind: LaplacianKind,
    lambda_norm: f64,
    lambda_unw: f64,
) -> Result<GraphLaplacian> {
    let n = mesh.num_vertices();
    match kind {
        LaplacianKind::Unweighted => {
            let map = mesh.edges().into_iter().map(|e| (e, 1.0)).collect();
            Ok(GraphLaplacian::from_weight_map(n, kind, None, map))
        }
        LaplacianKind::InvDistance => {
            let map = inv_distance_weights(mesh, 1.0)?;
            Ok(GraphLaplacian::from_weight_map(n, kind, None, map))
        }
        LaplacianKind::Cotangent => {
            let map = cotangent_weights(mesh)?;
            Ok(GraphLaplacian::from_weight_map(n, kind, None, map))
        }
        LaplacianKind::Mixed => {
            if !(lambda_norm.is_finite() && lambda_norm >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "inverse-distance share must be finite and non-negative, got {lambda_norm}"
                )));
            }
            if !(lambda_unw.is_finite() && lambda_unw >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "unweighted share must be finite and non-negative, got {lambda_unw}"
                )));
            }
            let diag = mesh.bounding_box_diagonal();
            if diag <= 0.0 {
                return Err(Error::InvalidMesh(
                    "mesh has zero bounding-box diagonal".into(),
                ));
            }
            let mut map = cotangent_weights(mesh)?;
            // Weights of the normalized mesh x/diag are diag/‖x_j − x_i‖.
            for ((i, j), w) in inv_distance_weights(mesh, diag)? {
                *map.entry((i, j)).or_insert(0.0) += lambda_norm * w;
            }
            for (i, j) in mesh.edges() {
                *map.entry((i, j)).or_insert(0.0) += lambda_unw;
            }
            Ok(GraphLaplacian::from_weight_map(
                n,
                kind,
                Some((lambda_norm, lambda_unw)),
                map,
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Eigenbasis
// ---------------------------------------------------------------------------

/// Lowest modes of a graph Laplacian: an n×m orthonormal matrix whose
/// columns are eigenvectors in ascending eigenvalue order.
#[derive(Debug, Clone)]
pub struct GhdBasis {
    kind: LaplacianKind,
    mixing: Option<(f64, f64)>,
    eigenvalues: Vec<f64>,
    /// n×m mode matrix, one eigenvector per column.
    modes: DMatrix<f64>,
}

impl GhdBasis {
    pub fn vertex_count(&self) -> usize {
        self.modes.nrows()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.ncols()
    }

    /// Ascending eigenvalues, one per mode.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// The n×m mode matrix U.
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    /// Weighting of the Laplacian this basis was extracted from.
    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    pub fn mixing_weights(&self) -> Option<(f64, f64)> {
        self.mixing
    }

    /// Per-vertex displacements U·Φ.
    pub fn synthesize_displacements(&self, phi: &GhdCoefficients) -> Result<Vec<Vector3<f64>>> {
        if phi.mode_count() != self.mode_count() {
            return Err(Error::DimensionMismatch {
                expected: self.mode_count(),
                got: phi.mode_count(),
            });
        }
        let d = &self.modes * phi.matrix();
        Ok((0..d.nrows())
            .map(|i| Vector3::new(d[(i, 0)], d[(i, 1)], d[(i, 2)]))
            .collect())
    }

    /// Per-axis projection Uᵀ·F of a per-vertex vector field; the adjoint
    /// of [`GhdBasis::synthesize_displacements`].
    pub fn project_displacements(&self, field: &[Vector3<f64>]) -> Result<GhdCoefficients> {
        if field.len() != self.vertex_count() {
            return Err(Error::DimensionMismatch {
                expected: self.vertex_count(),
                got: field.len(),
            });
        }
        let f = DMatrix::from_fn(field.len(), 3, |i, c| field[i][c]);
        Ok(GhdCoefficients {
            phi: self.modes.transpose() * f,
        })
    }
}

/// Per-axis mode coefficients Φ (m×3): column 0 scales the modes along x,
/// column 1 along y, column 2 along z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhdCoefficients {
    phi: DMatrix<f64>,
}

impl GhdCoefficients {
    /// The all-zero (identity deformation) coefficient set.
    pub fn zeros(mode_count: usize) -> Self {
        GhdCoefficients {
            phi: DMatrix::zeros(mode_count, 3),
        }
    }

    /// Wraps an m×3 matrix, rejecting wrong widths and non-finite entries.
    pub fn from_matrix(phi: DMatrix<f64>) -> Result<Self> {
        if phi.ncols() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: phi.ncols(),
            });
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "coefficient matrix contains non-finite entries".into(),
            ));
        }
        Ok(GhdCoefficients { phi })
    }

    pub fn mode_count(&self) -> usize {
        self.phi.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.phi
    }
}

/// Flips each column so its largest-magnitude entry is positive, making
/// eigenvector signs deterministic.
fn fix_mode_signs(u: &mut DMatrix<f64>) {
    for c in 0..u.ncols() {
        let mut lead = 0usize;
        let mut lead_abs = -1.0;
        for i in 0..u.nrows() {
            let a = u[(i, c)].abs();
            if a > lead_abs {
                lead_abs = a;
                lead = i;
            }
        }
        if u[(lead, c)] < 0.0 {
            for i in 0..u.nrows() {
                u[(i, c)] = -u[(i, c)];
            }
        }
    }
}

/// Rounds eigenvalue noise at the kernel up to exact zero.
fn clamp_eigenvalue(value: f64) -> f64 {
    if value < 0.0 && value > -1e-9 {
        0.0
    } else {
        value
    }
}

fn dense_lowest_modes(laplacian: &GraphLaplacian, m: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(laplacian.to_dense());
    let mut order: Vec<usize> = (0..laplacian.size()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut modes = DMatrix::zeros(laplacian.size(), m);
    let mut values = Vec::with_capacity(m);
    for (c, &idx) in order[..m].iter().enumerate() {
        modes.set_column(c, &eig.eigenvectors.column(idx));
        values.push(clamp_eigenvalue(eig.eigenvalues[idx]));
    }
    (values, modes)
}

/// Orthonormalizes the columns of `a`, dropping near-dependent columns.
/// Returns `None` when no independent column survives.
fn orthonormal_columns(a: DMatrix<f64>, drop_tol: f64) -> Option<DMatrix<f64>> {
    let ncols = a.ncols();
    let qr = a.col_piv_qr();
    let r = qr.r();
    let lead = r[(0, 0)].abs();
    if lead == 0.0 {
        return None;
    }
    let mut rank = 0;
    for c in 0..ncols.min(r.nrows()) {
        if r[(c, c)].abs() > drop_tol * lead {
            rank = c + 1;
        } else {
            break;
        }
    }
    if rank == 0 {
        return None;
    }
    Some(qr.q().columns(0, rank).into_owned())
}

/// Iterative residuals must sit well inside the per-mode contract
/// ‖Lu − λu‖ ≤ 1e-6·max(1, λ).
const ITERATIVE_TOL: f64 = 1e-8;
const ITERATIVE_MAX_ITERATIONS: usize = 1500;

/// Locally optimal block preconditioned conjugate gradient for the lowest
/// `m` eigenpairs. Deterministic: seeded start block with a constant first
/// column, Jacobi preconditioning when the diagonal is positive.
fn iterative_lowest_modes(
    laplacian: &GraphLaplacian,
    m: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = laplacian.size();
    let block = (m + 8).min(n);
    let mut rng = ChaCha12Rng::seed_from_u64(EIGEN_INIT_SEED);
    let mut x = DMatrix::zeros(n, block);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    for c in 1..block {
        for i in 0..n {
            x[(i, c)] = rng.gen::<f64>() - 0.5;
        }
    }
    let mut x = orthonormal_columns(x, 1e-12)
        .ok_or_else(|| Error::InvalidParameter("degenerate eigensolver start block".into()))?;
    let inv_diag: Option<Vec<f64>> = if laplacian.diagonal().iter().all(|&d| d > 0.0) {
        Some(laplacian.diagonal().iter().map(|&d| 1.0 / d).collect())
    } else {
        None
    };

    let mut lx = laplacian.mul_block(&x);
    let mut previous: Option<DMatrix<f64>> = None;
    let mut residual_norms = vec![f64::INFINITY; m];
    for _ in 0..ITERATIVE_MAX_ITERATIONS {
        // Ritz values of the current block (x stays orthonormal throughout).
        let theta: Vec<f64> = (0..x.ncols()).map(|c| x.column(c).dot(&lx.column(c))).collect();
        let mut residuals = lx.clone();
        for c in 0..x.ncols() {
            let mut col = residuals.column_mut(c);
            col.axpy(-theta[c], &x.column(c), 1.0);
        }
        for c in 0..m {
            residual_norms[c] = residuals.column(c).norm();
        }
        if (0..m).all(|c| residual_norms[c] <= ITERATIVE_TOL * theta[c].abs().max(1.0)) {
            let mut modes = x.columns(0, m).into_owned();
            fix_mode_signs(&mut modes);
            let values = theta[..m].iter().map(|&v| clamp_eigenvalue(v)).collect();
            return Ok((values, modes));
        }

        let mut search = residuals.columns(0, x.ncols()).into_owned();
        if let Some(inv) = &inv_diag {
            for c in 0..search.ncols() {
                for i in 0..n {
                    search[(i, c)] *= inv[i];
                }
            }
        }
        let mut subspace_cols = x.ncols() + search.ncols();
        if let Some(p) = &previous {
            subspace_cols += p.ncols();
        }
        let mut subspace = DMatrix::zeros(n, subspace_cols);
        subspace.columns_mut(0, x.ncols()).copy_from(&x);
        subspace
            .columns_mut(x.ncols(), search.ncols())
            .copy_from(&search);
        if let Some(p) = &previous {
            subspace
                .columns_mut(x.ncols() + search.ncols(), p.ncols())
                .copy_from(p);
        }
        let s = orthonormal_columns(subspace, 1e-10)
            .ok_or_else(|| Error::InvalidParameter("eigensolver subspace collapsed".into()))?;
        let ls = laplacian.mul_block(&s);
        let mut small = s.transpose() * &ls;
        small = (&small + small.transpose()) * 0.5;
        let eig = SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..s.ncols()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let keep = block.min(s.ncols());
        let mut rotation = DMatrix::zeros(s.ncols(), keep);
        for (c, &idx) in order[..keep].iter().enumerate() {
            rotation.set_column(c, &eig.eigenvectors.column(idx));
        }
        let x_new = &s * &rotation;
        let lx_new = &ls * &rotation;
        // Conjugate directions: the part of the new block outside span(x).
        let overlap = x.transpose() * &x_new;
        let p_raw = &x_new - &x * overlap;
        previous = orthonormal_columns(p_raw, 1e-10);
        x = x_new;
        lx = lx_new;
    }
    Err(Error::EigenNonConvergence {
        iterations: ITERATIVE_MAX_ITERATIONS,
        residuals: residual_norms,
    })
}

/// Extracts the `m` lowest eigenpairs of a graph Laplacian, choosing the
/// solver by size ([`DENSE_EIGEN_LIMIT`]).
pub fn ghd_basis(laplacian: &GraphLaplacian, m: usize) -> Result<GhdBasis> {
    ghd_basis_with(laplacian, m, EigenMethod::Auto)
}

/// Extracts the `m` lowest eigenpairs with an explicit solver choice.
///
/// Modes come back in ascending eigenvalue order, orthonormal, with each
/// eigenvector's largest-magnitude entry positive.
pub fn ghd_basis_with(
    laplacian: &GraphLaplacian,
    m: usize,
    method: EigenMethod,
) -> Result<GhdBasis> {
    let n = laplacian.size();
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!(
            "mode count {m} out of range 1..={n}"
        )));
    }
    let dense = match method {
        EigenMethod::Dense => true,
        EigenMethod::Iterative => false,
        EigenMethod::Auto => n <= DENSE_EIGEN_LIMIT,
    };
    let (eigenvalues, mut modes) = if dense {
        dense_lowest_modes(laplacian, m)
    } else {
        iterative_lowest_modes(laplacian, m)?
    };
    fix_mode_signs(&mut modes);
    Ok(GhdBasis {
        kind: laplacian.kind(),
        mixing: laplacian.mixing_weights(),
        eigenvalues,
        modes,
    })
}

// ---------------------------------------------------------------------------
// Graph Fourier Transform and deformation
// ---------------------------------------------------------------------------

/// Projects a per-vertex scalar field onto the basis: φ = Uᵀ·f.
pub fn gft_forward(basis: &GhdBasis, field: &[f64]) -> Result<Vec<f64>> {
    if field.len() != basis.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: basis.vertex_count(),
            got: field.len(),
        });
    }
    let f = DVector::from_column_slice(field);
    Ok((basis.modes.transpose() * f).data.into())
}

/// Reconstructs a per-vertex scalar field from coefficients: f = U·φ.
///
/// `gft_inverse(gft_forward(f))` is the orthogonal projection of `f` onto
/// the basis span; it reproduces `f` exactly when `f` already lies there.
pub fn gft_inverse(basis: &GhdBasis, coefficients: &[f64]) -> Result<Vec<f64>> {
    if coefficients.len() != basis.mode_count() {
        return Err(Error::DimensionMismatch {
            expected: basis.mode_count(),
            got: coefficients.len(),
        });
    }
    let c = DVector::from_column_slice(coefficients);
    Ok((&basis.modes * c).data.into())
}

/// Draws a seeded random deformation over the mode columns in `modes`,
/// scaled so the largest vertex displacement equals `max_displacement`.
///
/// Per-mode amplitudes decay quadratically with eigenvalue (relative to
/// the smallest positive eigenvalue in the range), so the draw is
/// dominated by the smoothest modes the way natural shape variation is,
/// rather than by the most oscillatory ones. Used to manufacture deformed
/// phantoms; at peak displacements up to 10% of the bounding-box diagonal
/// such draws barely move the good-angle ratio of a shell mesh.
pub fn random_low_mode_deformation(
    basis: &GhdBasis,
    modes: std::ops::Range<usize>,
    max_displacement: f64,
    seed: u64,
) -> Result<GhdCoefficients> {
    if modes.is_empty() || modes.end > basis.mode_count() {
        return Err(Error::InvalidParameter(format!(
            "mode range {modes:?} out of range for {} modes",
            basis.mode_count()
        )));
    }
    if !(max_displacement.is_finite() && max_displacement >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "peak displacement must be finite and non-negative, got {max_displacement}"
        )));
    }
    let reference = basis.eigenvalues[modes.clone()]
        .iter()
        .copied()
        .find(|&v| v > 0.0)
        .unwrap_or(1.0);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut phi = GhdCoefficients::zeros(basis.mode_count());
    for c in modes {
        let ratio = reference / basis.eigenvalues[c].max(reference);
        let amplitude = ratio * ratio;
        for axis in 0..3 {
            phi.matrix_mut()[(c, axis)] = amplitude * (rng.gen::<f64>() * 2.0 - 1.0);
        }
    }
    let displacements = basis.synthesize_displacements(&phi)?;
    let peak = displacements.iter().fold(0.0f64, |m, d| m.max(d.norm()));
    if peak > 0.0 {
        *phi.matrix_mut() *= max_displacement / peak;
    }
    Ok(phi)
}

/// Deforms a mesh through the basis: vertices move to X₀ + U·Φ with
/// connectivity untouched.
pub fn apply_ghd(canonical: &TriMesh, basis: &GhdBasis, phi: &GhdCoefficients) -> Result<TriMesh> {
    if basis.vertex_count() != canonical.num_vertices() {
        return Err(Error::DimensionMismatch {
            expected: canonical.num_vertices(),
            got: basis.vertex_count(),
        });
    }
    let displacements = basis.synthesize_displacements(phi)?;
    let vertices: Vec<Point3<f64>> = canonical
        .vertices()
        .iter()
        .zip(&displacements)
        .map(|(v, d)| v + d)
        .collect();
    canonical.with_vertices(vertices)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    vertex_count: usize,
    mode_count: usize,
    kind: LaplacianKind,
    mixing: Option<(f64, f64)>,
    eigenvalues: Vec<f64>,
    dtype: String,
    payload: String,
}

const BASIS_HEADER_EXT: &str = ".ghb.json";
const BASIS_PAYLOAD_EXT: &str = ".ghb.bin";
const BASIS_DTYPE: &str = "f64le";

/// Writes `basis` as `<stem>.ghb.json` plus `<stem>.ghb.bin`; the payload
/// holds the mode matrix column by column as little-endian `f64`.
pub fn save_basis<P: AsRef<Path>>(basis: &GhdBasis, path: P) -> Result<()> {
    let path = path.as_ref();
    let stem = stem_for(path, BASIS_HEADER_EXT)?;
    let payload_name = format!("{stem}{BASIS_PAYLOAD_EXT}");
    let header = BasisHeader {
        vertex_count: basis.vertex_count(),
        mode_count: basis.mode_count(),
        kind: basis.kind(),
        mixing: basis.mixing_weights(),
        eigenvalues: basis.eigenvalues.clone(),
        dtype: BASIS_DTYPE.into(),
        payload: payload_name.clone(),
    };
    let mut bytes = Vec::with_capacity(basis.modes.len() * 8);
    for value in basis.modes.as_slice() {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    std::fs::write(path, serde_json::to_string_pretty(&header)?)?;
    std::fs::write(sibling(path, &payload_name), &bytes)?;
    Ok(())
}

/// Loads a basis written by [`save_basis`].
pub fn load_basis<P: AsRef<Path>>(path: P) -> Result<GhdBasis> {
    let path = path.as_ref();
    let header: BasisHeader = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if header.dtype != BASIS_DTYPE {
        return Err(format_err(
            path,
            format!("unsupported dtype `{}`", header.dtype),
        ));
    }
    if header.mode_count == 0 || header.mode_count > header.vertex_count {
        return Err(format_err(
            path,
            format!(
                "mode count {} out of range for {} vertices",
                header.mode_count, header.vertex_count
            ),
        ));
    }
    if header.eigenvalues.len() != header.mode_count {
        return Err(format_err(
            path,
            format!(
                "{} eigenvalues listed for {} modes",
                header.eigenvalues.len(),
                header.mode_count
            ),
        ));
    }
    let payload_path = sibling(path, &header.payload);
    let bytes = std::fs::read(&payload_path)?;
    let expected = header.vertex_count * header.mode_count * 8;
    if bytes.len() != expected {
        return Err(format_err(
            &payload_path,
            format!("payload holds {} bytes, header expects {expected}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format_err(&payload_path, "payload contains non-finite values"));
    }
    let modes = DMatrix::from_column_slice(header.vertex_count, header.mode_count, &values);
    Ok(GhdBasis {
        kind: header.kind,
        mixing: header.mixing,
        eigenvalues: header.eigenvalues,
        modes,
    })
}
