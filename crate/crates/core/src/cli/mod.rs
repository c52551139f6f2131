//! The `slicesr` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for
//! unknown flags, missing arguments and invalid configs.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::model::Stage;
use crate::volume::Axis;

pub use config::{DataConfig, Resolved, RunConfig, DATA_ROOT_ENV};

/// Sidecar written next to every `infer` output.
pub const LINEAGE_SUFFIX: &str = ".lineage.json";
/// Written next to the CSV of `evaluate`; read by `report`.
pub const EVALUATION_FILE: &str = "evaluation.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config; exit code 2.
    Usage(String),
    /// Anything that failed while running; exit code 1.
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "slicesr", version, about = "Inter-slice super-resolution for anisotropic MR volumes")]
pub struct Cli {
    /// Debug-level logging (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic videos or phantom volumes.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Simulate a low-resolution acquisition from a volume.
    Degrade(DegradeArgs),
    /// Stage 1: pre-train on natural videos.
    Pretrain(TrainArgs),
    /// Stage 2: supervised fine-tuning on high-resolution MR volumes.
    Finetune(TrainArgs),
    /// Stage 3: self-supervised fine-tuning on one low-resolution subject.
    Selfsup(TrainArgs),
    /// Upsample a low-resolution volume along z.
    Infer(InferArgs),
    /// PSNR and SSIM of upsampled volumes against references.
    Evaluate(EvaluateArgs),
    /// Markdown tables and error-map figures from evaluations.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write frame directories `<out>/<kind>-<seed>/frame_00000.png ...`.
    Video(SynthVideoArgs),
    /// Write volumes `<out>/<kind>-<seed>.<format>`.
    Phantom(SynthPhantomArgs),
    /// List the available generators.
    List,
}

#[derive(Debug, Args)]
pub struct SynthVideoArgs {
    #[arg(long, default_value = "translating_gradient")]
    pub kind: String,
    #[arg(long, default_value_t = 180)]
    pub frames: usize,
    /// Frame size as HEIGHT,WIDTH.
    #[arg(long, value_parser = parse_list::<usize, 2>, default_value = "90,160")]
    pub size: [usize; 2],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of sequences, with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses exactly `N` comma-separated values.
fn parse_list<T, const N: usize>(s: &str) -> Result<[T; N], String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    let items = s
        .split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| format!("'{x}': {e}")))
        .collect::<Result<Vec<T>, _>>()?;
    let got = items.len();
    items
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated values, got {got}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VolumeExt {
    Nii,
    #[value(name = "nii.gz")]
    NiiGz,
    Raw,
}

impl VolumeExt {
    pub fn suffix(self) -> &'static str {
        match self {
            VolumeExt::Nii => "nii",
            VolumeExt::NiiGz => "nii.gz",
            VolumeExt::Raw => "raw",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthPhantomArgs {
    #[arg(long, default_value = "sinusoid_z")]
    pub kind: String,
    /// Extents as X,Y,Z.
    #[arg(long, value_parser = parse_list::<usize, 3>, default_value = "64,64,64")]
    pub size: [usize; 3],
    /// Voxel spacing in mm as X,Y,Z.
    #[arg(long, value_parser = parse_list::<f64, 3>, default_value = "1,1,1")]
    pub spacing: [f64; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long, value_enum, default_value = "nii.gz")]
    pub format: VolumeExt,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileKind {
    None,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output file; `.nii`, `.nii.gz` or anything else for raw.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    #[arg(long, value_enum, default_value = "z")]
    pub axis: AxisArg,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub profile: ProfileKind,
    /// Gaussian FWHM in mm; defaults to factor times the spacing along the axis.
    #[arg(long)]
    pub fwhm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; omitted keys take the stage defaults.
    #[arg(long, required_unless_present = "print_config")]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoints, logs and the resolved config.
    #[arg(long, required_unless_present = "print_config")]
    pub run: Option<PathBuf>,
    /// Write into a non-empty run directory.
    #[arg(long)]
    pub force: bool,
    /// Continue from a checkpoint (overrides `resume` in the config).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the default config for this stage and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Model,
    Linear,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Trained parameters (not needed for `--method linear`).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Integer upsampling factor along z.
    #[arg(long, conflicts_with = "target_spacing", required_unless_present = "target_spacing")]
    pub factor: Option<usize>,
    /// Output slice spacing in mm.
    #[arg(long)]
    pub target_spacing: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
    #[arg(long, default_value_t = 16)]
    pub overlap: usize,
    #[arg(long, value_enum, default_value = "model")]
    pub method: Method,
    /// Run self-supervised fine-tuning on the input before inference.
    #[arg(long, overrides_with = "no_selfsup")]
    pub selfsup: bool,
    #[arg(long)]
    pub no_selfsup: bool,
    /// Config for the self-supervised stage (data and init come from the flags).
    #[arg(long, requires = "selfsup")]
    pub selfsup_config: Option<PathBuf>,
    /// Run directory for the self-supervised stage; defaults to `<out>.selfsup`.
    #[arg(long, requires = "selfsup")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference (high-resolution) volumes.
    #[arg(long)]
    pub ref_dir: PathBuf,
    /// Volumes under test, matched to references by file stem.
    #[arg(long)]
    pub test_dir: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
    #[arg(long)]
    pub report_md: Option<PathBuf>,
    /// Row label for `report --methods`; defaults to the test directory name.
    #[arg(long)]
    pub label: Option<String>,
    /// Write per-subject error-map PNGs of the middle slice here.
    #[arg(long)]
    pub error_maps: Option<PathBuf>,
    /// Error that maps to the top of the color ramp.
    #[arg(long, default_value_t = 0.2)]
    pub vmax: f32,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true)))]
pub struct ReportArgs {
    /// Evaluations (files or directories holding evaluation.json) as ablation rows.
    #[arg(long, num_args = 1.., group = "mode")]
    pub ablation: Vec<PathBuf>,
    /// Evaluations as method-comparison rows.
    #[arg(long, num_args = 1.., group = "mode")]
    pub methods: Vec<PathBuf>,
    /// Render an error-map grid PNG to this path.
    #[arg(long, group = "mode", requires_all = ["reference", "test"])]
    pub figure: Option<PathBuf>,
    /// Reference volume for `--figure`.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// LABEL=PATH volumes for `--figure`.
    #[arg(long, num_args = 1..)]
    pub test: Vec<String>,
    /// Slice index along z for `--figure`; defaults to the middle.
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub vmax: f32,
    /// Markdown output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(c) => commands::synth(c),
        Command::Degrade(a) => commands::degrade(a),
        Command::Pretrain(a) => commands::train(Stage::VideoPretrain, a),
        Command::Finetune(a) => commands::train(Stage::MrFinetune, a),
        Command::Selfsup(a) => commands::train(Stage::Selfsup, a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => report::run(a),
    }
}
