//! Batch front end for template-mesh fitting: synthesize phantoms, fit to
//! labeled volumes or slice stacks, score results, extract slices, dump
//! occupancy fields, and compute ejection fractions.
//!
//! Exit codes: 0 success, 1 usage or format error, 2 non-convergence (only
//! with `fit --require-convergence`). Given identical inputs and seed, every
//! command writes byte-identical JSON; wall-clock timing lives in a separate
//! `timing` field so comparisons can drop it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Point3;
use serde::Serialize;

use ghdfit_core::dvs::{evaluate_occupancy, Quadrature};
use ghdfit_core::fit::{
    ejection_fraction, evaluate, fit_ghd, EvalMetrics, EvalReference, FitConfig,
};
use ghdfit_core::losses::enclosed_volume;
use ghdfit_core::obj::{load_mesh, save_mesh};
use ghdfit_core::oracle::voxelize_oracle;
use ghdfit_core::synth::{make_icosphere, make_shell_phantom};
use ghdfit_core::volume::{
    extract_slices, load_slices, load_volume, save_slices, save_volume, Axis, GridSpec,
    Supervision,
};
use ghdfit_core::{good_angle_ratio, TriMesh};

const VOLUME_EXT: &str = ".lvh.json";
const STACK_EXT: &str = ".sst.json";

#[derive(Parser)]
#[command(
    name = "ghdfit",
    version,
    about = "Deformable template-mesh fitting to labeled volumes and slice stacks"
)]
struct Cli {
    /// Overrides every configured or default seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prints progress to standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic phantom mesh, optionally with its voxelization.
    Synth(SynthArgs),
    /// Fits the canonical mesh to a label volume or slice stack.
    Fit(FitArgs),
    /// Scores a mesh against a reference mesh, volume, or slice stack.
    Metrics(MetricsArgs),
    /// Extracts axis-aligned slices from a label volume.
    Slice(SliceArgs),
    /// Evaluates raw and smooth occupancy at query points.
    Occupancy(OccupancyArgs),
    /// Ejection fraction from end-diastolic and end-systolic volumes (mm³).
    Ef(EfArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(subcommand)]
    kind: SynthKind,
}

#[derive(Subcommand)]
enum SynthKind {
    /// Subdivided icosahedron sphere.
    Icosphere {
        /// Subdivision depth.
        #[arg(long, default_value_t = 3)]
        subdiv: u32,
        /// Radius in mm.
        #[arg(short, long, default_value_t = 10.0)]
        radius: f64,
        /// Center as `x,y,z` in mm.
        #[arg(long, default_value = "0,0,0", value_parser = parse_point)]
        center: Point3<f64>,
        #[command(flatten)]
        output: SynthOutput,
    },
    /// Thick-walled truncated spheroid shell.
    Shell {
        /// Outer semi-axes as `a,b,c` in mm.
        #[arg(long, value_parser = parse_triple)]
        outer: (f64, f64, f64),
        /// Wall thickness in mm.
        #[arg(long)]
        wall: f64,
        /// Kept fraction of the long axis, measured from the apex.
        #[arg(long)]
        cut: f64,
        /// Approximate latitude rings along the outer meridian.
        #[arg(long, default_value_t = 24)]
        resolution: usize,
        #[command(flatten)]
        output: SynthOutput,
    },
}

#[derive(Args)]
struct SynthOutput {
    /// Output mesh path (OBJ).
    #[arg(short, long)]
    out: PathBuf,
    /// Voxel spacing in mm; also requires --volume.
    #[arg(long, requires = "volume")]
    voxelize: Option<f64>,
    /// Output label volume path (`*.lvh.json`); requires --voxelize.
    #[arg(long, requires = "voxelize")]
    volume: Option<PathBuf>,
    /// Margin in voxels around the mesh bounding box.
    #[arg(long, default_value_t = 2)]
    margin: usize,
}

#[derive(Args)]
struct FitArgs {
    /// Canonical template mesh (OBJ).
    #[arg(long)]
    canonical: PathBuf,
    /// Label volume (`*.lvh.json`) or slice stack (`*.sst.json`).
    #[arg(long)]
    supervision: PathBuf,
    /// Fit configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output prefix for `.fitted.obj`, `.coefficients.json`,
    /// `.report.json`, and `.trace.csv`.
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
    /// Overrides the configured iteration budget.
    #[arg(long)]
    iterations: Option<usize>,
    /// Exit with status 2 when the budget ends without convergence.
    #[arg(long)]
    require_convergence: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Mesh to score (OBJ).
    mesh: PathBuf,
    /// Reference: OBJ mesh, `*.lvh.json` volume, or `*.sst.json` stack.
    reference: PathBuf,
    /// Output JSON path; standard output when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Surface samples per mesh for chamfer and Hausdorff distances.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Voxel spacing in mm for Dice against a mesh reference.
    #[arg(long, default_value_t = 0.5)]
    spacing: f64,
}

#[derive(Args)]
struct SliceArgs {
    /// Source label volume (`*.lvh.json`).
    volume: PathBuf,
    /// Slicing axis.
    #[arg(long, value_enum)]
    axis: CliAxis,
    /// Comma-separated plane indices.
    #[arg(long, value_delimiter = ',', required = true)]
    indices: Vec<usize>,
    /// Output slice stack path (`*.sst.json`).
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct OccupancyArgs {
    /// Mesh (OBJ).
    mesh: PathBuf,
    /// JSON array of `[x, y, z]` query points in mm.
    points: PathBuf,
    /// Occupancy sharpness.
    #[arg(long, default_value_t = 1e3)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = CliQuadrature::Facet)]
    quadrature: CliQuadrature,
    /// Output JSON path; standard output when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EfArgs {
    /// End-diastolic volume in mm³.
    v_ed: f64,
    /// End-systolic volume in mm³.
    v_es: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliAxis {
    X,
    Y,
    Z,
}

impl From<CliAxis> for Axis {
    fn from(axis: CliAxis) -> Axis {
        match axis {
            CliAxis::X => Axis::X,
            CliAxis::Y => Axis::Y,
            CliAxis::Z => Axis::Z,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliQuadrature {
    Vertex,
    Facet,
}

impl From<CliQuadrature> for Quadrature {
    fn from(q: CliQuadrature) -> Quadrature {
        match q {
            CliQuadrature::Vertex => Quadrature::Vertex,
            CliQuadrature::Facet => Quadrature::Facet,
        }
    }
}

fn parse_triple(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got {s:?}"));
    }
    let mut values = [0.0; 3];
    for (v, p) in values.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad number {p:?}: {e}"))?;
    }
    Ok((values[0], values[1], values[2]))
}

fn parse_point(s: &str) -> std::result::Result<Point3<f64>, String> {
    parse_triple(s).map(|(x, y, z)| Point3::new(x, y, z))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args, cli.verbose),
        Command::Fit(args) => cmd_fit(args, cli.seed, cli.verbose),
        Command::Metrics(args) => cmd_metrics(args, cli.seed),
        Command::Slice(args) => cmd_slice(args),
        Command::Occupancy(args) => cmd_occupancy(args),
        Command::Ef(args) => cmd_ef(args),
    }
}

fn bounding_box(mesh: &TriMesh) -> (Point3<f64>, Point3<f64>) {
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in mesh.vertices() {
        for d in 0..3 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    (lo, hi)
}

fn voxelize_to(mesh: &TriMesh, spacing: f64, margin: usize, path: &Path) -> Result<()> {
    let (lo, hi) = bounding_box(mesh);
    let grid = GridSpec::covering(lo, hi, spacing, margin)?;
    let labels = voxelize_oracle(mesh, &grid);
    save_volume(&labels, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_synth(args: SynthArgs, verbose: u8) -> Result<ExitCode> {
    let (mesh, output) = match args.kind {
        SynthKind::Icosphere {
            subdiv,
            radius,
            center,
            output,
        } => (make_icosphere(subdiv, radius, center)?, output),
        SynthKind::Shell {
            outer,
            wall,
            cut,
            resolution,
            output,
        } => (make_shell_phantom(outer, wall, cut, resolution)?, output),
    };
    save_mesh(&mesh, &output.out).with_context(|| format!("writing {}", output.out.display()))?;
    if verbose > 0 {
        eprintln!(
            "wrote {} ({} vertices, {} faces)",
            output.out.display(),
            mesh.num_vertices(),
            mesh.num_faces()
        );
    }
    if let (Some(spacing), Some(volume_path)) = (output.voxelize, output.volume) {
        voxelize_to(&mesh, spacing, output.margin, &volume_path)?;
        if verbose > 0 {
            eprintln!("wrote {}", volume_path.display());
        }
    }
    println!("volume_mm3 {}", enclosed_volume(&mesh));
    println!("gar {}", good_angle_ratio(&mesh));
    Ok(ExitCode::SUCCESS)
}

fn load_supervision(path: &Path) -> Result<Supervision> {
    let name = path.display().to_string();
    if name.ends_with(VOLUME_EXT) {
        Ok(Supervision::Volume(load_volume(path)?))
    } else if name.ends_with(STACK_EXT) {
        Ok(Supervision::Slices(load_slices(path)?))
    } else {
        bail!("{name}: supervision must be a `{VOLUME_EXT}` volume or `{STACK_EXT}` slice stack")
    }
}

fn read_config(path: &Path) -> Result<FitConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: FitConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    config.validate()?;
    Ok(config)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn cmd_fit(args: FitArgs, seed: Option<u64>, verbose: u8) -> Result<ExitCode> {
    let canonical = load_mesh(&args.canonical)?;
    let supervision = load_supervision(&args.supervision)?;
    let mut config = read_config(&args.config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        config.iterations = iterations;
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }

    if verbose > 0 {
        eprintln!(
            "fitting {} ({} vertices) with {} iterations",
            args.canonical.display(),
            canonical.num_vertices(),
            config.iterations
        );
    }
    let (fitted, coefficients, report) = fit_ghd(&canonical, &supervision, &config)?;

    let mesh_path = with_suffix(&args.out, ".fitted.obj");
    save_mesh(&fitted, &mesh_path).with_context(|| format!("writing {}", mesh_path.display()))?;
    write_json(&coefficients, Some(&with_suffix(&args.out, ".coefficients.json")))?;
    write_json(&report, Some(&with_suffix(&args.out, ".report.json")))?;

    let mut csv = String::from("iteration,loss\n");
    for (t, loss) in report.loss_trace.iter().enumerate() {
        writeln!(csv, "{t},{loss}").expect("string write");
    }
    let csv_path = with_suffix(&args.out, ".trace.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;

    println!(
        "converged {} iterations_run {} final_loss {}",
        report.converged,
        report.iterations_run,
        report.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    if args.require_convergence && !report.converged {
        eprintln!(
            "error: no convergence within {} iterations",
            config.iterations
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_metrics(args: MetricsArgs, seed: Option<u64>) -> Result<ExitCode> {
    let mesh = load_mesh(&args.mesh)?;
    let seed = seed.unwrap_or(0);
    let name = args.reference.display().to_string();
    let metrics: EvalMetrics = if name.ends_with(VOLUME_EXT) {
        let volume = load_volume(&args.reference)?;
        evaluate(&mesh, EvalReference::Volume(&volume), args.samples, seed)?
    } else if name.ends_with(STACK_EXT) {
        let stack = load_slices(&args.reference)?;
        evaluate(&mesh, EvalReference::Slices(&stack), args.samples, seed)?
    } else {
        let reference = load_mesh(&args.reference)?;
        let mut metrics =
            evaluate(&mesh, EvalReference::Mesh(&reference), args.samples, seed)?;
        // Dice needs labels; voxelize the reference at the requested spacing.
        let (lo, hi) = bounding_box(&reference);
        let grid = GridSpec::covering(lo, hi, args.spacing, 2)?;
        let labels = voxelize_oracle(&reference, &grid);
        metrics.dice_3d =
            evaluate(&mesh, EvalReference::Volume(&labels), args.samples, seed)?.dice_3d;
        metrics
    };
    write_json(&metrics, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_slice(args: SliceArgs) -> Result<ExitCode> {
    let volume = load_volume(&args.volume)?;
    let stack = extract_slices(&volume, args.axis.into(), &args.indices)?;
    save_slices(&stack, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct OccupancyDump {
    beta: f64,
    quadrature: Quadrature,
    raw: Vec<f64>,
    smooth: Vec<f64>,
    clamped: Vec<bool>,
}

fn cmd_occupancy(args: OccupancyArgs) -> Result<ExitCode> {
    let mesh = load_mesh(&args.mesh)?;
    let text = fs::read_to_string(&args.points)
        .with_context(|| format!("reading {}", args.points.display()))?;
    let raw_points: Vec<[f64; 3]> = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: {e}", args.points.display()))?;
    let points: Vec<Point3<f64>> = raw_points
        .into_iter()
        .map(|[x, y, z]| Point3::new(x, y, z))
        .collect();
    let result = evaluate_occupancy(&mesh, &points, args.quadrature.into(), args.beta)?;
    let dump = OccupancyDump {
        beta: result.beta,
        quadrature: args.quadrature.into(),
        raw: result.raw,
        smooth: result.smooth,
        clamped: result.clamped,
    };
    write_json(&dump, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EfOutput {
    ejection_fraction: f64,
}

fn cmd_ef(args: EfArgs) -> Result<ExitCode> {
    let value = ejection_fraction(args.v_ed, args.v_es)?;
    write_json(&EfOutput { ejection_fraction: value }, None)?;
    Ok(ExitCode::SUCCESS)
}
