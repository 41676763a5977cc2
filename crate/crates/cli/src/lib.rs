//! `chamfer-align` command-line tool: simulate pairs, align them, score the
//! alignments, and draw overlays.
//!
//! Exit status is 0 on success, 1 for usage errors (bad flags, unreadable or
//! invalid configs) and 2 for failures while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod overlay;
pub mod selftest;

pub use config::RunConfig;
pub use overlay::{emit_overlay, overlay_png};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<chamfer_align::Error> for CliError {
    fn from(e: chamfer_align::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "chamfer-align", version, about = "Contour alignment with a shape-aware Chamfer loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset of seeded source/target pairs and a manifest.
    Simulate(SimulateArgs),
    /// Align one pair, or every pair of a manifest.
    Align(AlignArgs),
    /// Score alignment results against the clean pairs of a manifest.
    Eval(EvalArgs),
    /// Write an RGB overlay: red = aligned, green = target, blue = source.
    Overlay(OverlayArgs),
    /// Dump the distance field of a contour image.
    Dt(DtArgs),
    /// Run quick oracle checks on the core routines.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config (e.g. a previous run.json); flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for batch work [default: logical cores].
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory [default: $CHAMFER_ALIGN_DATA/simulated].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// First seed of the dataset.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of pairs.
    #[arg(long)]
    pub count: Option<usize>,
    /// Largest control-point offset of the ground-truth warp, px.
    #[arg(long)]
    pub magnitude: Option<f64>,
    /// Control lattice size of the ground-truth warp.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Probability that a background pixel of the source becomes noise.
    #[arg(long)]
    pub density: Option<f64>,
    /// Inclusive range for the number of occlusion boxes.
    #[arg(long, value_name = "MIN,MAX", value_parser = parse_range)]
    pub occlusions: Option<[usize; 2]>,
    /// Inclusive range for occlusion box sides, px.
    #[arg(long, value_name = "MIN,MAX", value_parser = parse_range)]
    pub box_size: Option<[usize; 2]>,
    /// Canvas side, px.
    #[arg(long)]
    pub size: Option<usize>,
    /// Threshold for re-binarizing the warped contour.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// IDX3 image file to take base digits from instead of synthetic shapes.
    #[arg(long, value_name = "FILE")]
    pub mnist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Weight of the shape term.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Side of the shape-term window (odd).
    #[arg(long)]
    pub window: Option<usize>,
    /// Loss: upperbound, reparam, chamfer, ncc or mse.
    #[arg(long, value_name = "KIND")]
    pub loss: Option<chamfer_align::loss::LossKind>,
    /// Chamfer normalization: support_mass, as_written or none.
    #[arg(long, value_parser = parse_normalization)]
    pub normalization: Option<chamfer_align::loss::Normalization>,
    /// TPS bending-energy weight.
    #[arg(long)]
    pub bending_weight: Option<f64>,
    /// Per-stage loss weights, comma separated.
    #[arg(long, value_name = "W,W,...", value_delimiter = ',')]
    pub scale_weights: Option<Vec<f64>>,
    /// JSON array of stages replacing the default five-stage schedule.
    #[arg(long, value_name = "FILE")]
    pub schedule: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub common: Common,
    /// Source contour image (single-pair mode).
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    /// Target contour image (single-pair mode).
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// Dataset manifest (batch mode) [default: $CHAMFER_ALIGN_DATA/simulated/manifest.jsonl].
    #[arg(long, value_name = "FILE", conflicts_with_all = ["source", "target"])]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: $CHAMFER_ALIGN_DATA/results].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset manifest [default: $CHAMFER_ALIGN_DATA/simulated/manifest.jsonl].
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Directory written by `align --manifest` [default: $CHAMFER_ALIGN_DATA/results].
    #[arg(long, value_name = "DIR")]
    pub results: Option<PathBuf>,
    /// Output directory [default: $CHAMFER_ALIGN_DATA/eval].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Misalignment threshold for the percentage column, px.
    #[arg(long)]
    pub z: Option<f64>,
    /// Binarize the warped clean source at this threshold before scoring.
    #[arg(long, value_name = "TH")]
    pub binarize: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Aligned source image.
    #[arg(long, conflicts_with = "forward")]
    pub aligned: Option<PathBuf>,
    /// Forward warp field (.wfld) to apply to the source instead of --aligned.
    #[arg(long)]
    pub forward: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DtArgs {
    #[command(flatten)]
    pub common: Common,
    /// Contour image.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output image (.pgm or .png); the scale goes to `<out>.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Seed for the random test cases.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per check.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected MIN,MAX, got {s:?}"))?;
    let lo = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok([lo, hi])
}

fn parse_normalization(s: &str) -> Result<chamfer_align::loss::Normalization, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown normalization {s:?}"))
}

/// Parse `argv` (program name first) and run the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("chamfer-align: {e}");
            e.exit_code()
        }
    }
}

/// Write `bytes` to a temporary file next to `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
