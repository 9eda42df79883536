//! Voxel label volumes, sparse slice stacks, their file formats, and
//! query-point sampling for occupancy supervision.
//!
//! Volumes are stored as a JSON header (`.lvh.json`) next to a raw
//! little-endian `u8` payload (`.lvr`), row-major with x fastest. Slice
//! stacks use one JSON manifest (`.sst.json`) plus one raw mask payload per
//! slice (`.sNN.msk`). All world coordinates are in millimeters.

use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a voxel grid: `origin` is the world position of the center of
/// voxel (0,0,0); voxel (i,j,k) sits at `origin + (i·sx, j·sy, k·sz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub origin: Point3<f64>,
}

impl GridSpec {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), origin: Point3<f64>) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid dims must be positive, got {dims:?}"
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "grid spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Isotropic grid covering `[lo, hi]` with `margin` voxels of padding on
    /// every side.
    pub fn covering(lo: Point3<f64>, hi: Point3<f64>, spacing: f64, margin: usize) -> Result<Self> {
        if spacing <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "grid spacing must be positive, got {spacing}"
            )));
        }
        let mut dims = [0usize; 3];
        let mut origin = [0.0f64; 3];
        for d in 0..3 {
            let extent = (hi[d] - lo[d]).max(0.0);
            dims[d] = (extent / spacing).ceil() as usize + 1 + 2 * margin;
            origin[d] = lo[d] - margin as f64 * spacing;
        }
        Self::new(
            (dims[0], dims[1], dims[2]),
            (spacing, spacing, spacing),
            Point3::new(origin[0], origin[1], origin[2]),
        )
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims.1 + j) * self.dims.0 + i
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        Point3::new(
            self.origin.x + i as f64 * self.spacing.0,
            self.origin.y + j as f64 * self.spacing.1,
            self.origin.z + k as f64 * self.spacing.2,
        )
    }

    /// Voxel of the world point `p`, or `None` outside the grid.
    pub fn voxel_of(&self, p: Point3<f64>) -> Option<(usize, usize, usize)> {
        let mut ijk = [0usize; 3];
        let spacing = [self.spacing.0, self.spacing.1, self.spacing.2];
        let dims = [self.dims.0, self.dims.1, self.dims.2];
        for d in 0..3 {
            let t = ((p[d] - self.origin[d]) / spacing[d]).round();
            if t < 0.0 || t as usize >= dims[d] {
                return None;
            }
            ijk[d] = t as usize;
        }
        Some((ijk[0], ijk[1], ijk[2]))
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.0 * self.spacing.1 * self.spacing.2
    }
}

/// Binary label volume over a [`GridSpec`]; data row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: GridSpec,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: GridSpec, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.num_voxels() {
            return Err(Error::DimensionMismatch {
                expected: grid.num_voxels(),
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidParameter(format!(
                "label volume must be binary, found value {bad}"
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn label(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b == 1).count()
    }

    /// Labeled fraction times voxel volume, mm³.
    pub fn foreground_volume(&self) -> f64 {
        self.count_foreground() as f64 * self.grid.voxel_volume()
    }
}

/// One posed binary mask: `origin` is the world center of pixel (0,0);
/// pixel (i,j) sits at `origin + i·su·u + j·sv·v`; data row-major, u fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMask {
    pub origin: Point3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub spacing: (f64, f64),
    pub dims: (usize, usize),
    pub data: Vec<u8>,
}

const AXIS_TOL: f64 = 1e-9;

impl SliceMask {
    pub fn new(
        origin: Point3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        spacing: (f64, f64),
        dims: (usize, usize),
        data: Vec<u8>,
    ) -> Result<Self> {
        if (u.norm() - 1.0).abs() > AXIS_TOL || (v.norm() - 1.0).abs() > AXIS_TOL {
            return Err(Error::InvalidParameter(format!(
                "slice axes must be unit length: |u| = {}, |v| = {}",
                u.norm(),
                v.norm()
            )));
        }
        if u.dot(&v).abs() > AXIS_TOL {
            return Err(Error::InvalidParameter(format!(
                "slice axes must be orthogonal: u·v = {}",
                u.dot(&v)
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || dims.0 == 0 || dims.1 == 0 {
            return Err(Error::InvalidParameter(
                "slice spacing and dims must be positive".into(),
            ));
        }
        if data.len() != dims.0 * dims.1 {
            return Err(Error::DimensionMismatch {
                expected: dims.0 * dims.1,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidParameter(format!(
                "slice mask must be binary, found value {bad}"
            )));
        }
        Ok(Self { origin, u, v, spacing, dims, data })
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v)
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> Point3<f64> {
        self.origin + i as f64 * self.spacing.0 * self.u + j as f64 * self.spacing.1 * self.v
    }

    pub fn label(&self, i: usize, j: usize) -> u8 {
        self.data[j * self.dims.0 + i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<SliceMask>,
}

impl SliceStack {
    pub fn new(slices: Vec<SliceMask>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::InvalidParameter("slice stack needs ≥ 1 slice".into()));
        }
        Ok(Self { slices })
    }
}

/// Either kind of label supervision accepted by sampling and fitting.
#[derive(Debug, Clone)]
pub enum Supervision {
    Volume(LabelVolume),
    Slices(SliceStack),
}

/// Query points with binary inside/outside labels.
#[derive(Debug, Clone)]
pub struct LabeledPoints {
    pub positions: Vec<Point3<f64>>,
    pub labels: Vec<u8>,
    /// Set when a sampling budget exceeded the available candidates.
    pub truncated: bool,
}

impl LabeledPoints {
    pub fn foreground(&self) -> Vec<Point3<f64>> {
        self.positions
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(p, _)| *p)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Pulls the listed constant-index planes out of a volume as posed slices.
/// No interpolation: each slice carries the exact voxel values, and pixel
/// (i,j) of a slice maps to the same world point as its source voxel.
pub fn extract_slices(volume: &LabelVolume, axis: Axis, indices: &[usize]) -> Result<SliceStack> {
    if indices.is_empty() {
        return Err(Error::InvalidParameter("extract_slices needs ≥ 1 index".into()));
    }
    let (nx, ny, nz) = volume.grid.dims;
    let (sx, sy, sz) = volume.grid.spacing;
    let limit = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    let mut slices = Vec::with_capacity(indices.len());
    for &idx in indices {
        if idx >= limit {
            return Err(Error::InvalidParameter(format!(
                "slice index {idx} out of range for axis dimension {limit}"
            )));
        }
        // In-plane axes chosen so u × v is the +axis normal.
        let slice = match axis {
            Axis::Z => {
                let mut data = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        data.push(volume.label(i, j, idx));
                    }
                }
                SliceMask::new(
                    volume.grid.center(0, 0, idx),
                    Vector3::x(),
                    Vector3::y(),
                    (sx, sy),
                    (nx, ny),
                    data,
                )?
            }
            Axis::X => {
                let mut data = Vec::with_capacity(ny * nz);
                for j in 0..nz {
                    for i in 0..ny {
                        data.push(volume.label(idx, i, j));
                    }
                }
                SliceMask::new(
                    volume.grid.center(idx, 0, 0),
                    Vector3::y(),
                    Vector3::z(),
                    (sy, sz),
                    (ny, nz),
                    data,
                )?
            }
            Axis::Y => {
                let mut data = Vec::with_capacity(nz * nx);
                for j in 0..nx {
                    for i in 0..nz {
                        data.push(volume.label(j, idx, i));
                    }
                }
                SliceMask::new(
                    volume.grid.center(0, idx, 0),
                    Vector3::z(),
                    Vector3::x(),
                    (sz, sx),
                    (nz, nx),
                    data,
                )?
            }
        };
        slices.push(slice);
    }
    SliceStack::new(slices)
}

/// One-dimensional squared-distance transform (Felzenszwalb/Huttenlocher)
/// over samples at positions `i·step`. `f` holds squared distances in, the
/// result holds the lower envelope out.
fn dt1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    let x = |i: usize| i as f64 * step;
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * x(q) - 2.0 * x(p));
            if s <= z[k] {
                if k == 0 {
                    // q dominates everything so far.
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < x(q) {
            k += 1;
        }
        let d = x(q) - x(v[k]);
        out[q] = d * d + f[v[k]];
    }
}

/// Large finite stand-in for "no seed anywhere"; keeps the envelope
/// arithmetic free of inf−inf.
const EDT_FAR: f64 = 1e20;

/// Exact squared Euclidean distance (mm²) from every voxel center to the
/// nearest center with `data = 1`, separable over the three axes.
pub(crate) fn edt_squared_3d(
    data: &[u8],
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let mut dist: Vec<f64> = data
        .iter()
        .map(|&b| if b == 1 { 0.0 } else { EDT_FAR })
        .collect();
    let mut line = vec![0.0f64; nx.max(ny).max(nz)];
    let mut out = vec![0.0f64; nx.max(ny).max(nz)];
    // x pass
    for k in 0..nz {
        for j in 0..ny {
            let base = (k * ny + j) * nx;
            line[..nx].copy_from_slice(&dist[base..base + nx]);
            dt1d(&line[..nx], spacing.0, &mut out[..nx]);
            dist[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    // y pass
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                line[j] = dist[(k * ny + j) * nx + i];
            }
            dt1d(&line[..ny], spacing.1, &mut out[..ny]);
            for j in 0..ny {
                dist[(k * ny + j) * nx + i] = out[j];
            }
        }
    }
    // z pass
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                line[k] = dist[(k * ny + j) * nx + i];
            }
            dt1d(&line[..nz], spacing.2, &mut out[..nz]);
            for k in 0..nz {
                dist[(k * ny + j) * nx + i] = out[k];
            }
        }
    }
    dist
}

pub(crate) fn edt_squared_2d(data: &[u8], dims: (usize, usize), spacing: (f64, f64)) -> Vec<f64> {
    edt_squared_3d(data, (dims.0, dims.1, 1), (spacing.0, spacing.1, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Positions jittered uniformly within their voxel/pixel (default).
    Jitter,
    /// Exact voxel/pixel centers, for oracle cross-checks.
    ExactCenters,
}

/// Draws `n_fg` points from label-1 cells and `n_bg` points from label-0
/// cells whose centers lie within `bg_band` mm of a label-1 center (in-plane
/// distance for slice stacks). Selection is uniform without replacement and
/// deterministic under `seed`; when a budget exceeds the candidates, all
/// candidates are returned and the result is flagged truncated.
pub fn sample_points(
    source: &Supervision,
    n_fg: usize,
    n_bg: usize,
    bg_band: f64,
    seed: u64,
) -> LabeledPoints {
    sample_points_with(source, n_fg, n_bg, bg_band, seed, SampleMode::Jitter)
}

pub fn sample_points_with(
    source: &Supervision,
    n_fg: usize,
    n_bg: usize,
    bg_band: f64,
    seed: u64,
    mode: SampleMode,
) -> LabeledPoints {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match source {
        Supervision::Volume(vol) => sample_volume(vol, n_fg, n_bg, bg_band, mode, &mut rng),
        Supervision::Slices(stack) => sample_slices(stack, n_fg, n_bg, bg_band, mode, &mut rng),
    }
}

/// Uniform choice of `amount` items from `0..len` without replacement,
/// returned ascending. Flags truncation when `amount > len`.
fn choose(rng: &mut ChaCha12Rng, len: usize, amount: usize) -> (Vec<usize>, bool) {
    if amount >= len {
        return ((0..len).collect(), amount > len);
    }
    let mut picked = rand::seq::index::sample(rng, len, amount).into_vec();
    picked.sort_unstable();
    (picked, false)
}

fn jitter_offset(rng: &mut ChaCha12Rng, step: f64) -> f64 {
    // 0.999 keeps jittered points strictly inside their cell.
    (rng.gen::<f64>() - 0.5) * 0.999 * step
}

fn sample_volume(
    vol: &LabelVolume,
    n_fg: usize,
    n_bg: usize,
    bg_band: f64,
    mode: SampleMode,
    rng: &mut ChaCha12Rng,
) -> LabeledPoints {
    let (nx, ny, _) = vol.grid.dims;
    let fg_candidates: Vec<usize> = (0..vol.data.len()).filter(|&i| vol.data[i] == 1).collect();
    let bg_candidates: Vec<usize> = if n_bg > 0 {
        let dist2 = edt_squared_3d(&vol.data, vol.grid.dims, vol.grid.spacing);
        let band2 = bg_band * bg_band;
        (0..vol.data.len())
            .filter(|&i| vol.data[i] == 0 && dist2[i] <= band2)
            .collect()
    } else {
        Vec::new()
    };

    let (fg_pick, fg_trunc) = choose(rng, fg_candidates.len(), n_fg);
    let (bg_pick, bg_trunc) = choose(rng, bg_candidates.len(), n_bg);

    let mut positions = Vec::with_capacity(fg_pick.len() + bg_pick.len());
    let mut labels = Vec::with_capacity(fg_pick.len() + bg_pick.len());
    let mut emit = |lin: usize, label: u8, rng: &mut ChaCha12Rng| {
        let i = lin % nx;
        let j = (lin / nx) % ny;
        let k = lin / (nx * ny);
        let mut p = vol.grid.center(i, j, k);
        if mode == SampleMode::Jitter {
            p.x += jitter_offset(rng, vol.grid.spacing.0);
            p.y += jitter_offset(rng, vol.grid.spacing.1);
            p.z += jitter_offset(rng, vol.grid.spacing.2);
        }
        positions.push(p);
        labels.push(label);
    };
    for &c in &fg_pick {
        emit(fg_candidates[c], 1, rng);
    }
    for &c in &bg_pick {
        emit(bg_candidates[c], 0, rng);
    }
    LabeledPoints {
        positions,
        labels,
        truncated: fg_trunc || bg_trunc,
    }
}

fn sample_slices(
    stack: &SliceStack,
    n_fg: usize,
    n_bg: usize,
    bg_band: f64,
    mode: SampleMode,
    rng: &mut ChaCha12Rng,
) -> LabeledPoints {
    // (slice, pixel) candidate pools across the whole stack.
    let mut fg_candidates: Vec<(usize, usize)> = Vec::new();
    let mut bg_candidates: Vec<(usize, usize)> = Vec::new();
    let band2 = bg_band * bg_band;
    for (s, slice) in stack.slices.iter().enumerate() {
        for (p, &l) in slice.data.iter().enumerate() {
            if l == 1 {
                fg_candidates.push((s, p));
            }
        }
        if n_bg > 0 {
            let dist2 = edt_squared_2d(&slice.data, slice.dims, slice.spacing);
            for (p, &l) in slice.data.iter().enumerate() {
                if l == 0 && dist2[p] <= band2 {
                    bg_candidates.push((s, p));
                }
            }
        }
    }

    let (fg_pick, fg_trunc) = choose(rng, fg_candidates.len(), n_fg);
    let (bg_pick, bg_trunc) = choose(rng, bg_candidates.len(), n_bg);

    let mut positions = Vec::with_capacity(fg_pick.len() + bg_pick.len());
    let mut labels = Vec::with_capacity(fg_pick.len() + bg_pick.len());
    let mut emit = |(s, p): (usize, usize), label: u8, rng: &mut ChaCha12Rng| {
        let slice = &stack.slices[s];
        let i = p % slice.dims.0;
        let j = p / slice.dims.0;
        let mut pos = slice.pixel_center(i, j);
        if mode == SampleMode::Jitter {
            // In-plane only; points must stay on the slice plane.
            pos += jitter_offset(rng, slice.spacing.0) * slice.u;
            pos += jitter_offset(rng, slice.spacing.1) * slice.v;
        }
        positions.push(pos);
        labels.push(label);
    };
    for &c in &fg_pick {
        emit(fg_candidates[c], 1, rng);
    }
    for &c in &bg_pick {
        emit(bg_candidates[c], 0, rng);
    }
    LabeledPoints {
        positions,
        labels,
        truncated: fg_trunc || bg_trunc,
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    axis_order: String,
    dtype: String,
    payload: String,
}

const VOLUME_HEADER_EXT: &str = ".lvh.json";
const VOLUME_PAYLOAD_EXT: &str = ".lvr";
const STACK_HEADER_EXT: &str = ".sst.json";

pub(crate) fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Strips `suffix` from the file name of `path`, erroring when absent.
pub(crate) fn stem_for(path: &Path, suffix: &str) -> Result<String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| format_err(path, "path has no file name"))?;
    name.strip_suffix(suffix)
        .map(str::to_owned)
        .ok_or_else(|| format_err(path, format!("expected a `{suffix}` path")))
}

pub(crate) fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new("")).join(name)
}

pub fn save_volume<P: AsRef<Path>>(volume: &LabelVolume, path: P) -> Result<()> {
    let path = path.as_ref();
    let stem = stem_for(path, VOLUME_HEADER_EXT)?;
    let payload_name = format!("{stem}{VOLUME_PAYLOAD_EXT}");
    let header = VolumeHeader {
        dims: [volume.grid.dims.0, volume.grid.dims.1, volume.grid.dims.2],
        spacing: [volume.grid.spacing.0, volume.grid.spacing.1, volume.grid.spacing.2],
        origin: [volume.grid.origin.x, volume.grid.origin.y, volume.grid.origin.z],
        axis_order: "xyz".into(),
        dtype: "u8".into(),
        payload: payload_name.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&header)?)?;
    std::fs::write(sibling(path, &payload_name), &volume.data)?;
    Ok(())
}

pub fn load_volume<P: AsRef<Path>>(path: P) -> Result<LabelVolume> {
    let path = path.as_ref();
    let header: VolumeHeader = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if header.axis_order != "xyz" {
        return Err(format_err(path, format!("unsupported axis order {:?}", header.axis_order)));
    }
    if header.dtype != "u8" {
        return Err(format_err(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    let grid = GridSpec::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        Point3::new(header.origin[0], header.origin[1], header.origin[2]),
    )?;
    let payload_path = sibling(path, &header.payload);
    let data = std::fs::read(&payload_path)?;
    if data.len() != grid.num_voxels() {
        return Err(format_err(
            &payload_path,
            format!("payload holds {} bytes, header expects {}", data.len(), grid.num_voxels()),
        ));
    }
    if data.iter().any(|&b| b > 1) {
        return Err(format_err(&payload_path, "payload contains non-binary labels"));
    }
    LabelVolume::new(grid, data)
}

#[derive(Serialize, Deserialize)]
struct SliceHeader {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    spacing: [f64; 2],
    dims: [usize; 2],
    payload: String,
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    slices: Vec<SliceHeader>,
}

pub fn save_slices<P: AsRef<Path>>(stack: &SliceStack, path: P) -> Result<()> {
    let path = path.as_ref();
    let stem = stem_for(path, STACK_HEADER_EXT)?;
    let mut headers = Vec::with_capacity(stack.slices.len());
    for (idx, slice) in stack.slices.iter().enumerate() {
        let payload_name = format!("{stem}.s{idx:02}.msk");
        std::fs::write(sibling(path, &payload_name), &slice.data)?;
        headers.push(SliceHeader {
            origin: slice.origin.coords.into(),
            u: slice.u.into(),
            v: slice.v.into(),
            spacing: [slice.spacing.0, slice.spacing.1],
            dims: [slice.dims.0, slice.dims.1],
            payload: payload_name,
        });
    }
    std::fs::write(path, serde_json::to_string_pretty(&StackHeader { slices: headers })?)?;
    Ok(())
}

pub fn load_slices<P: AsRef<Path>>(path: P) -> Result<SliceStack> {
    let path = path.as_ref();
    let header: StackHeader = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut slices = Vec::with_capacity(header.slices.len());
    for h in &header.slices {
        let payload_path = sibling(path, &h.payload);
        let data = std::fs::read(&payload_path)?;
        if data.len() != h.dims[0] * h.dims[1] {
            return Err(format_err(
                &payload_path,
                format!(
                    "payload holds {} bytes, manifest expects {}",
                    data.len(),
                    h.dims[0] * h.dims[1]
                ),
            ));
        }
        let slice = SliceMask::new(
            Point3::new(h.origin[0], h.origin[1], h.origin[2]),
            Vector3::new(h.u[0], h.u[1], h.u[2]),
            Vector3::new(h.v[0], h.v[1], h.v[2]),
            (h.spacing[0], h.spacing[1]),
            (h.dims[0], h.dims[1]),
            data,
        )
        .map_err(|e| format_err(path, e.to_string()))?;
        slices.push(slice);
    }
    SliceStack::new(slices).map_err(|e| format_err(path, e.to_string()))
}
